//! Synthetic B-mode-like test images: dark elliptical inclusions in bright
//! tissue under multiplicative speckle, with exact ground-truth masks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::mask::SegmentationMask;
use crate::preprocess::gaussian_blur;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomParams {
    pub width: usize,
    pub height: usize,
    /// Inclusions per image, drawn uniformly from this inclusive range.
    pub ellipses: (usize, usize),
    /// Semi-axis range in pixels.
    pub semi_axis: (f64, f64),
    pub tissue: f64,
    pub inclusion: f64,
    /// Grain size of the speckle as a blur sigma in pixels.
    pub speckle_sigma: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            width: 128,
            height: 128,
            ellipses: (1, 2),
            semi_axis: (14.0, 26.0),
            tissue: 0.55,
            inclusion: 0.12,
            speckle_sigma: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: GrayImage,
    /// 1 inside any inclusion, 0 elsewhere.
    pub ground_truth: SegmentationMask,
    pub ellipses: Vec<Ellipse>,
}

fn place_ellipses(rng: &mut ChaCha8Rng, p: &PhantomParams) -> Vec<Ellipse> {
    let n = rng.random_range(p.ellipses.0..=p.ellipses.1);
    let (w, h) = (p.width as f64, p.height as f64);
    let mut out: Vec<Ellipse> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 1000 {
        attempts += 1;
        let a = rng.random_range(p.semi_axis.0..=p.semi_axis.1);
        let b = rng.random_range(p.semi_axis.0..=a);
        let margin = a + 4.0;
        if 2.0 * margin >= w.min(h) {
            continue;
        }
        let e = Ellipse {
            cx: rng.random_range(margin..w - margin),
            cy: rng.random_range(margin..h - margin),
            a,
            b,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        };
        // bounding circles kept apart so inclusions never touch
        if out
            .iter()
            .all(|o| ((o.cx - e.cx).powi(2) + (o.cy - e.cy).powi(2)).sqrt() > o.a + e.a + 6.0)
        {
            out.push(e);
        }
    }
    out
}

/// Deterministic phantom for `seed`.
pub fn generate(seed: u64, p: &PhantomParams) -> Result<Phantom> {
    if p.width < 16 || p.height < 16 {
        return Err(Error::Config("phantoms need at least 16x16 pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ellipses = place_ellipses(&mut rng, p);
    let (w, h) = (p.width, p.height);

    // Rayleigh amplitude with unit mean, spatially correlated by a blur
    let scale = (2.0 / std::f64::consts::PI).sqrt();
    let raw: Vec<f32> = (0..w * h)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            (scale * (-2.0 * u.ln()).sqrt() / 4.0) as f32
        })
        .collect();
    let speckle = gaussian_blur(&GrayImage::from_fn(w, h, |x, y| raw[y * w + x]), p.speckle_sigma);

    let mut labels = Vec::with_capacity(w * h);
    let image = GrayImage::from_fn(w, h, |x, y| {
        let inside = ellipses
            .iter()
            .any(|e| e.contains(x as f64 + 0.5, y as f64 + 0.5));
        let base = if inside { p.inclusion } else { p.tissue };
        (base * 4.0 * speckle.get(x, y) as f64) as f32
    });
    for y in 0..h {
        for x in 0..w {
            let inside = ellipses
                .iter()
                .any(|e| e.contains(x as f64 + 0.5, y as f64 + 0.5));
            labels.push(u32::from(inside));
        }
    }
    let ground_truth = SegmentationMask::new(w, h, labels)?.with_label_space(2)?;
    Ok(Phantom {
        image,
        ground_truth,
        ellipses,
    })
}

/// Writes `n` phantoms as `phantom_XX.png` plus `phantom_XX_gt.png` into
/// `dir` and returns the path of a manifest listing them.
pub fn write_dataset(dir: impl AsRef<Path>, n: usize, seed: u64, p: &PhantomParams) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for i in 0..n {
        let ph = generate(seed.wrapping_add(i as u64), p)?;
        let img = format!("phantom_{i:02}.png");
        let gt = format!("phantom_{i:02}_gt.png");
        ph.image.save_png(dir.join(&img))?;
        ph.ground_truth.save_png(dir.join(&gt))?;
        let _ = writeln!(manifest, "{img}\t{gt}");
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let p = PhantomParams::default();
        let a = generate(3, &p).unwrap();
        let b = generate(3, &p).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.ground_truth, b.ground_truth);
        assert_ne!(generate(4, &p).unwrap().image, a.image);
    }

    #[test]
    fn inclusions_are_dark() {
        let p = PhantomParams::default();
        for seed in 0..5 {
            let ph = generate(seed, &p).unwrap();
            assert!(!ph.ellipses.is_empty() && ph.ellipses.len() <= 2);
            let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
            for (v, l) in ph.image.data().iter().zip(ph.ground_truth.labels()) {
                if *l == 1 {
                    inside += *v as f64;
                    ni += 1;
                } else {
                    outside += *v as f64;
                    no += 1;
                }
            }
            assert!(ni > 0);
            assert!(inside / (ni as f64) < 0.5 * outside / no as f64);
        }
    }

    #[test]
    fn speckle_is_multiplicative() {
        let p = PhantomParams::default();
        let ph = generate(11, &p).unwrap();
        let outside: Vec<f64> = ph
            .image
            .data()
            .iter()
            .zip(ph.ground_truth.labels())
            .filter(|(_, &l)| l == 0)
            .map(|(&v, _)| v as f64)
            .collect();
        let mean = outside.iter().sum::<f64>() / outside.len() as f64;
        assert!((mean - p.tissue).abs() < 0.05, "tissue mean {mean}");
    }
}

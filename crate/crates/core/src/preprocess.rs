//! Classical image enhancement run before affinity construction.

use crate::config::{HistEq, PreprocessSpec};
use crate::gray::GrayImage;

const BINS: usize = 256;

pub fn preprocess(img: &GrayImage, spec: &PreprocessSpec) -> GrayImage {
    let blurred = gaussian_blur(img, spec.gaussian_sigma);
    equalize_histogram(&blurred, spec)
}

/// Sampled, normalized Gaussian truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`),
/// periodic in `2n` so any offset maps inside `[0, n)`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian convolution with reflect padding. `sigma == 0` returns
/// the input unchanged.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel_1d(sigma);
    let r = (kernel.len() / 2) as isize;
    let (w, h) = img.dims();
    let src = img.data();

    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * row[reflect(x as isize + t as isize - r, w)] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + t as isize - r, h) * w + x];
            }
            out[y * w + x] = acc as f32;
        }
    }
    GrayImage::from_raw_clamped(w, h, out)
}

#[inline]
fn bin_of(v: f32) -> usize {
    ((v * BINS as f32) as usize).min(BINS - 1)
}

pub fn equalize_histogram(img: &GrayImage, spec: &PreprocessSpec) -> GrayImage {
    match spec.hist_eq {
        HistEq::None => img.clone(),
        HistEq::Global => equalize_global(img),
        HistEq::Clahe => clahe(img, spec.clahe_clip, spec.clahe_tiles),
    }
}

/// Maps each pixel to the fraction of pixels falling in its bin or below.
pub fn equalize_global(img: &GrayImage) -> GrayImage {
    let mut hist = [0usize; BINS];
    for &v in img.data() {
        hist[bin_of(v)] += 1;
    }
    let lut = cdf_lut(&hist.map(|c| c as f64));
    let (w, h) = img.dims();
    let out = img.data().iter().map(|&v| lut[bin_of(v)]).collect();
    GrayImage::from_raw_clamped(w, h, out)
}

fn cdf_lut(hist: &[f64; BINS]) -> [f32; BINS] {
    let total: f64 = hist.iter().sum();
    let mut lut = [0.0f32; BINS];
    let mut acc = 0.0;
    for (b, c) in hist.iter().enumerate() {
        acc += c;
        lut[b] = (acc / total) as f32;
    }
    lut
}

/// Contrast-limited adaptive equalization: per-tile clipped CDFs blended
/// bilinearly between tile centers.
pub fn clahe(img: &GrayImage, clip: f64, tiles: usize) -> GrayImage {
    let (w, h) = img.dims();
    let tx = tiles.clamp(1, w);
    let ty = tiles.clamp(1, h);
    let tile_bounds = |i: usize, n: usize, len: usize| (i * len / n, (i + 1) * len / n);

    let mut luts = Vec::with_capacity(tx * ty);
    for j in 0..ty {
        let (y0, y1) = tile_bounds(j, ty, h);
        for i in 0..tx {
            let (x0, x1) = tile_bounds(i, tx, w);
            let mut hist = [0.0f64; BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin_of(img.get(x, y))] += 1.0;
                }
            }
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            clip_histogram(&mut hist, clip * n / BINS as f64);
            luts.push(cdf_lut(&hist));
        }
    }

    // Tile centers in pixel coordinates.
    let centers = |n: usize, len: usize| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let (a, b) = tile_bounds(i, n, len);
                (a + b) as f64 / 2.0 - 0.5
            })
            .collect()
    };
    let cx = centers(tx, w);
    let cy = centers(ty, h);
    let locate = |c: &[f64], p: f64| -> (usize, usize, f64) {
        if p <= c[0] {
            return (0, 0, 0.0);
        }
        if p >= c[c.len() - 1] {
            return (c.len() - 1, c.len() - 1, 0.0);
        }
        let i = c.partition_point(|&v| v <= p) - 1;
        (i, i + 1, (p - c[i]) / (c[i + 1] - c[i]))
    };

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (j0, j1, fy) = locate(&cy, y as f64);
        for x in 0..w {
            let (i0, i1, fx) = locate(&cx, x as f64);
            let b = bin_of(img.get(x, y));
            let v = |i: usize, j: usize| luts[j * tx + i][b] as f64;
            let top = v(i0, j0) * (1.0 - fx) + v(i1, j0) * fx;
            let bot = v(i0, j1) * (1.0 - fx) + v(i1, j1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    GrayImage::from_raw_clamped(w, h, out)
}

/// Clips bins at `limit` and spreads the excess uniformly over all bins.
fn clip_histogram(hist: &mut [f64; BINS], limit: f64) {
    let mut excess = 0.0;
    for c in hist.iter_mut() {
        if *c > limit {
            excess += *c - limit;
            *c = limit;
        }
    }
    let share = excess / BINS as f64;
    hist.iter_mut().for_each(|c| *c += share);
}

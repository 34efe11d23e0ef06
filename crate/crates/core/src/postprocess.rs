//! Mask upscaling and mean-field CRF refinement.


use crate::config::CrfParams;
use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::mask::SegmentationMask;

/// Nearest-neighbor expansion. Output pixel `x` samples source column
/// `floor((x + 0.5) * src_w / dst_w)`, so integer factors give exact blocks.
pub fn upscale_mask(mask: &SegmentationMask, width: usize, height: usize) -> Result<SegmentationMask> {
    let (gw, gh) = mask.dims();
    if width < gw || height < gh {
        return Err(Error::Shape(format!(
            "cannot upscale {gw}x{gh} mask to smaller {width}x{height}"
        )));
    }
    let map = |o: usize, src: usize, dst: usize| {
        (((o as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
    };
    let cols: Vec<usize> = (0..width).map(|x| map(x, gw, width)).collect();
    let mut labels = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = map(y, gh, height);
        labels.extend(cols.iter().map(|&sx| mask.get(sx, sy)));
    }
    SegmentationMask::new(width, height, labels)?.with_label_space(mask.n_labels())
}

/// `exp(t)` for `t <= 0` by range reduction and a degree-8 polynomial;
/// relative error below `1e-6 (1 + |t|)`, written branch-free so loops over it
/// vectorize.
#[inline(always)]
fn exp_nonpos(t: f32) -> f32 {
    let x = t.max(-80.0) * std::f32::consts::LOG2_E;
    let n = x as i32;
    let r = (x - n as f32) * std::f32::consts::LN_2;
    let mut p = 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    p * f32::from_bits(((n + 127) as u32) << 23)
}

/// Bilateral message `sum_{j != i} k(i, j) q_j` per label plane, with
/// `k = g(dx) g(dy) exp(-(I_i - I_j)^2 * range_scale)` over the truncated
/// window. Each unordered pixel pair is visited once, walking row segments
/// of equal offset so the inner loops are contiguous.
fn bilateral_messages(
    planes: &[Vec<f32>],
    intensity: &[f32],
    w: usize,
    h: usize,
    taps: &[f32],
    range_scale: f32,
) -> Vec<Vec<f32>> {
    let r = taps.len() - 1;
    let mut acc = vec![vec![0.0f32; w * h]; planes.len()];
    let mut kbuf = vec![0.0f32; w];
    for dy in 0..=r.min(h - 1) {
        let dx_lo = if dy == 0 { 1 } else { -(r.min(w - 1) as isize) };
        for y in 0..h - dy {
            let yy = y + dy;
            for dx in dx_lo..=r.min(w - 1) as isize {
                let k0 = taps[dy] * taps[dx.unsigned_abs()];
                let (x0, x1) = if dx >= 0 {
                    (0, w - dx as usize)
                } else {
                    (dx.unsigned_abs(), w)
                };
                let i0 = y * w + x0;
                let j0 = (yy * w + x0) as isize + dx;
                let j0 = j0 as usize;
                let len = x1 - x0;
                let (ri, rj) = (&intensity[i0..i0 + len], &intensity[j0..j0 + len]);
                let kb = &mut kbuf[..len];
                for t in 0..len {
                    let d = ri[t] - rj[t];
                    kb[t] = k0 * exp_nonpos(-d * d * range_scale);
                }
                for (a, q) in acc.iter_mut().zip(planes) {
                    let (ai, qj) = (&mut a[i0..i0 + len], &q[j0..j0 + len]);
                    for t in 0..len {
                        ai[t] += kb[t] * qj[t];
                    }
                    let (aj, qi) = (&mut a[j0..j0 + len], &q[i0..i0 + len]);
                    for t in 0..len {
                        aj[t] += kb[t] * qi[t];
                    }
                }
            }
        }
    }
    acc
}

/// Per-pixel label distributions after mean-field inference.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfMarginals {
    /// Competing labels: those present in the input, ascending.
    pub labels: Vec<u32>,
    /// Row-major, `labels.len()` probabilities per pixel.
    pub q: Vec<f64>,
}

/// Mean-field inference on a CRF with Potts compatibility, a Gaussian
/// spatial kernel and a bilateral (position + intensity) kernel, both
/// truncated to a `3 sigma` window. The unary term is the input labeling
/// softened to `unary_confidence`. Only labels present in the input compete.
pub fn crf_refine(mask: &SegmentationMask, img: &GrayImage, p: &CrfParams) -> Result<SegmentationMask> {
    if p.n_iters == 0 || mask.distinct().len() < 2 {
        if img.dims() != mask.dims() {
            return Err(Error::Shape("mask and image dims differ".into()));
        }
        return Ok(mask.clone());
    }
    let m = crf_marginals(mask, img, p)?;
    let n_l = m.labels.len();
    let labels = m
        .q
        .chunks_exact(n_l)
        .map(|row| {
            let mut best = 0;
            for k in 1..n_l {
                if row[k] > row[best] {
                    best = k;
                }
            }
            m.labels[best]
        })
        .collect();
    SegmentationMask::new(mask.width(), mask.height(), labels)?.with_label_space(mask.n_labels())
}

/// The distributions behind [`crf_refine`]; `n_iters == 0` gives the
/// softened unary term.
pub fn crf_marginals(mask: &SegmentationMask, img: &GrayImage, p: &CrfParams) -> Result<CrfMarginals> {
    let (w, h) = mask.dims();
    if img.dims() != (w, h) {
        return Err(Error::Shape(format!(
            "mask {w}x{h} and image {}x{} differ",
            img.width(),
            img.height()
        )));
    }
    let present = mask.distinct();
    let n_l = present.len();
    if n_l < 2 {
        return Ok(CrfMarginals {
            labels: present,
            q: vec![1.0; w * h],
        });
    }
    let index_of = |l: u32| present.binary_search(&l).expect("present label");
    let hi = p.unary_confidence;
    let lo = (1.0 - hi) / (n_l - 1) as f64;
    let log_unary: Vec<f64> = mask
        .labels()
        .iter()
        .flat_map(|&l| {
            let li = index_of(l);
            (0..n_l).map(move |k| if k == li { hi.ln() } else { lo.ln() })
        })
        .collect();

    let mut q: Vec<f64> = log_unary.iter().map(|v| v.exp()).collect();
    normalize_rows(&mut q, n_l);

    let spatial_1d = gaussian_taps(p.spatial_sigma);
    let bil_r = (3.0 * p.bilateral_sigma_xy).ceil() as usize;
    let bil_taps: Vec<f32> = (0..=bil_r)
        .map(|d| (-((d * d) as f64) / (2.0 * p.bilateral_sigma_xy.powi(2))).exp() as f32)
        .collect();
    let range_scale = (1.0 / (2.0 * p.bilateral_sigma_int.powi(2))) as f32;
    let intensity = img.data();

    for _ in 0..p.n_iters {
        let spatial = if p.w_spatial > 0.0 {
            separable_filter(&q, w, h, n_l, &spatial_1d)
        } else {
            vec![0.0; q.len()]
        };
        let bilateral: Vec<f64> = if p.w_bilateral > 0.0 {
            let planes: Vec<Vec<f32>> = (0..n_l)
                .map(|l| q.iter().skip(l).step_by(n_l).map(|&v| v as f32).collect())
                .collect();
            let msg = bilateral_messages(&planes, intensity, w, h, &bil_taps, range_scale);
            (0..w * h)
                .flat_map(|i| msg.iter().map(move |m| m[i] as f64))
                .collect()
        } else {
            vec![0.0; q.len()]
        };
        for i in 0..q.len() {
            // the filtered sums include the pixel itself with weight 1
            let s = spatial[i] - if p.w_spatial > 0.0 { q[i] } else { 0.0 };
            q[i] = log_unary[i] + p.w_spatial * s + p.w_bilateral * bilateral[i];
        }
        softmax_rows(&mut q, n_l);
    }
    Ok(CrfMarginals { labels: present, q })
}

/// Unnormalized Gaussian taps `exp(-d^2 / 2 sigma^2)` for `|d| <= 3 sigma`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Zero-padded separable filtering of an interleaved `n_l`-channel field.
fn separable_filter(q: &[f64], w: usize, h: usize, n_l: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; q.len()];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * n_l;
            for (t, kv) in taps.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                let s = (y * w + xx as usize) * n_l;
                for c in 0..n_l {
                    tmp[o + c] += kv * q[s + c];
                }
            }
        }
    }
    let mut out = vec![0.0; q.len()];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * n_l;
            for (t, kv) in taps.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                let s = (yy as usize * w + x) * n_l;
                for c in 0..n_l {
                    out[o + c] += kv * tmp[s + c];
                }
            }
        }
    }
    out
}

fn normalize_rows(q: &mut [f64], n_l: usize) {
    for row in q.chunks_exact_mut(n_l) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

fn softmax_rows(q: &mut [f64], n_l: usize) {
    for row in q.chunks_exact_mut(n_l) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

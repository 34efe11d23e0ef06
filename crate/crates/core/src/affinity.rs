//! Patch-graph affinities: feature correlation, SSD and mutual-information
//! kernels, grid position, and their weighted combination.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::config::AffinityConfig;
use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::tensor::FeatureMap;

/// Symmetric, finite patch-graph weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix(DMatrix<f64>);

impl AffinityMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Shape(format!(
                "affinity must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("affinity has non-finite entries".into()));
        }
        let n = m.nrows();
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if (a - b).abs() > 1e-6 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::Data(format!(
                        "affinity not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(AffinityMatrix(m))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scaled(&self, c: f64) -> Self {
        AffinityMatrix(&self.0 * c)
    }
}

/// `k x k` intensity blocks in row-major grid order, anchored at the top-left
/// corner (callers center-crop first).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub k: usize,
    pub n_h: usize,
    pub n_w: usize,
    pub patches: Vec<Vec<f32>>,
}

impl PatchGrid {
    pub fn from_image(img: &GrayImage, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("patch size must be at least 1".into()));
        }
        let n_h = img.height() / k;
        let n_w = img.width() / k;
        if n_h * n_w < 2 {
            return Err(Error::Shape(format!(
                "{}x{} image yields fewer than two {k}x{k} patches",
                img.width(),
                img.height()
            )));
        }
        let mut patches = Vec::with_capacity(n_h * n_w);
        for r in 0..n_h {
            for c in 0..n_w {
                let mut p = Vec::with_capacity(k * k);
                for y in r * k..(r + 1) * k {
                    for x in c * k..(c + 1) * k {
                        p.push(img.get(x, y));
                    }
                }
                patches.push(p);
            }
        }
        Ok(PatchGrid {
            k,
            n_h,
            n_w,
            patches,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Per-patch `(x_pos, y_pos)`, each interpolated linearly from 0 to 1 across
/// the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionEncoding {
    pub n_h: usize,
    pub n_w: usize,
    pub coords: Vec<(f64, f64)>,
}

impl PositionEncoding {
    pub fn new(n_h: usize, n_w: usize) -> Self {
        let lin = |i: usize, n: usize| {
            if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.0
            }
        };
        let coords = (0..n_h)
            .flat_map(|r| (0..n_w).map(move |c| (lin(c, n_w), lin(r, n_h))))
            .collect();
        PositionEncoding { n_h, n_w, coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Squared distance scaled by `((n_w-1)(n_h-1))^2`, exact in integers so
    /// neighbor ranking has no rounding ties.
    fn rank_key(&self, a: usize, b: usize) -> u64 {
        let (ra, ca) = ((a / self.n_w) as i64, (a % self.n_w) as i64);
        let (rb, cb) = ((b / self.n_w) as i64, (b % self.n_w) as i64);
        let sx = (self.n_h.max(2) - 1) as i64;
        let sy = (self.n_w.max(2) - 1) as i64;
        let dx = (ca - cb) * sx;
        let dy = (ra - rb) * sy;
        (dx * dx + dy * dy) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMetric {
    Ssd,
    Mi,
}

/// Cosine self-correlation of the feature rows with anti-correlations zeroed.
pub fn feature_affinity(f: &FeatureMap) -> Result<AffinityMatrix> {
    let n = f.n_patches;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let row = f.row(i);
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateFeature { index: i });
        }
        rows.push(row.iter().map(|&v| v as f64 / norm).collect());
    }
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| {
                    let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    if dot > 0.0 {
                        dot.min(1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    AffinityMatrix::new(symmetric_from_upper(n, &upper))
}

fn symmetric_from_upper(n: usize, upper: &[Vec<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + off;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Sum of squared differences divided by the number of pixels in a patch.
pub fn ssd(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    s / a.len() as f64
}

#[inline]
fn bin(v: f32, bins: usize) -> u32 {
    ((v * bins as f32) as usize).min(bins - 1) as u32
}

fn entropy_of_sorted(codes: &[u32]) -> f64 {
    let n = codes.len() as f64;
    let mut h = 0.0;
    let mut i = 0;
    while i < codes.len() {
        let mut j = i + 1;
        while j < codes.len() && codes[j] == codes[i] {
            j += 1;
        }
        let p = (j - i) as f64 / n;
        h -= p * p.ln();
        i = j;
    }
    h
}

/// Binned patch: sorted bin codes and marginal entropy.
struct BinnedPatch {
    bins: Vec<u32>,
    entropy: f64,
}

impl BinnedPatch {
    fn new(p: &[f32], n_bins: usize) -> Self {
        let bins: Vec<u32> = p.iter().map(|&v| bin(v, n_bins)).collect();
        let mut sorted = bins.clone();
        sorted.sort_unstable();
        BinnedPatch {
            entropy: entropy_of_sorted(&sorted),
            bins,
        }
    }
}

fn mi_binned(a: &BinnedPatch, b: &BinnedPatch, n_bins: usize) -> f64 {
    let mut joint: Vec<u32> = a
        .bins
        .iter()
        .zip(&b.bins)
        .map(|(&x, &y)| x * n_bins as u32 + y)
        .collect();
    joint.sort_unstable();
    let hj = entropy_of_sorted(&joint);
    if hj == 0.0 {
        // both patches sit in a single bin each
        return if a.bins[0] == b.bins[0] { 2.0 } else { 1.0 };
    }
    (a.entropy + b.entropy) / hj
}

/// `(H(a) + H(b)) / H(a, b)` from `n_bins` histograms over `[0, 1]`.
///
/// Two patches that each fall in a single bin have zero joint entropy; they
/// score 2 when the bins agree and 1 otherwise.
pub fn mutual_information(a: &[f32], b: &[f32], n_bins: usize) -> f64 {
    mi_binned(&BinnedPatch::new(a, n_bins), &BinnedPatch::new(b, n_bins), n_bins)
}

/// Dense dissimilarity between every pair of patches: normalized SSD, or
/// `1 - MI`.
pub fn patchwise_distance(g: &PatchGrid, metric: PatchMetric, mi_bins: usize) -> Result<DMatrix<f64>> {
    let n = g.len();
    if n < 2 {
        return Err(Error::Shape("need at least two patches".into()));
    }
    let upper: Vec<Vec<f64>> = match metric {
        PatchMetric::Ssd => (0..n)
            .into_par_iter()
            .map(|i| (i..n).map(|j| ssd(&g.patches[i], &g.patches[j])).collect())
            .collect(),
        PatchMetric::Mi => {
            let binned: Vec<BinnedPatch> = g
                .patches
                .iter()
                .map(|p| BinnedPatch::new(p, mi_bins))
                .collect();
            (0..n)
                .into_par_iter()
                .map(|i| {
                    (i..n)
                        .map(|j| 1.0 - mi_binned(&binned[i], &binned[j], mi_bins))
                        .collect()
                })
                .collect()
        }
    };
    Ok(symmetric_from_upper(n, &upper))
}

/// Elementwise `exp(-delta * D)`.
pub fn gaussian_kernel(d: &DMatrix<f64>, delta: f64) -> Result<AffinityMatrix> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!("kernel rate must be > 0, got {delta}")));
    }
    AffinityMatrix::new(d.map(|v| (-delta * v).exp()))
}

/// `max(0, 1 - |psi_i - psi_j|)` restricted to each patch's `knn` nearest
/// neighbors, symmetrized by elementwise max, with a unit diagonal.
///
/// Neighbors tied with the `knn`-th distance are all kept, so the result does
/// not depend on patch numbering.
pub fn positional_affinity(pe: &PositionEncoding, knn: usize) -> Result<AffinityMatrix> {
    let n = pe.len();
    if knn == 0 || knn >= n {
        return Err(Error::Config(format!(
            "knn must be in [1, {}), got {knn}",
            n
        )));
    }
    let value = |i: usize, j: usize| {
        let (xi, yi) = pe.coords[i];
        let (xj, yj) = pe.coords[j];
        (1.0 - ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt()).max(0.0)
    };
    let columns: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut keys: Vec<(u64, usize)> = (0..n)
                .filter(|&i| i != j)
                .map(|i| (pe.rank_key(i, j), i))
                .collect();
            keys.sort_unstable();
            let cutoff = keys[knn - 1].0;
            keys.iter()
                .take_while(|(k, _)| *k <= cutoff)
                .map(|&(_, i)| (i, value(i, j)))
                .collect()
        })
        .collect();
    let mut m = DMatrix::zeros(n, n);
    for (j, col) in columns.iter().enumerate() {
        for &(i, v) in col {
            let v = v.max(m[(i, j)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m[(j, j)] = 1.0;
    }
    AffinityMatrix::new(m)
}

/// Weighting for [`combine`]; a zero coefficient drops its term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub ssd: f64,
    pub mi: f64,
    pub pos: f64,
}

impl From<&AffinityConfig> for Coefficients {
    fn from(c: &AffinityConfig) -> Self {
        Coefficients {
            ssd: c.c_ssd,
            mi: c.c_mi,
            pos: c.c_pos,
        }
    }
}

/// `W_feat + c_ssd W_ssd + c_mi W_mi + c_pos W_pos`, negatives clamped to 0.
pub fn combine(
    w_feat: Option<&AffinityMatrix>,
    w_ssd: Option<&AffinityMatrix>,
    w_mi: Option<&AffinityMatrix>,
    w_pos: Option<&AffinityMatrix>,
    c: Coefficients,
) -> Result<AffinityMatrix> {
    let terms: Vec<(f64, &AffinityMatrix)> = [
        (1.0, w_feat),
        (c.ssd, w_ssd),
        (c.mi, w_mi),
        (c.pos, w_pos),
    ]
    .into_iter()
    .filter_map(|(coef, w)| w.filter(|_| coef != 0.0).map(|w| (coef, w)))
    .collect();
    let Some(&(_, first)) = terms.first() else {
        return Err(Error::Config(
            "no affinity term is active (all coefficients zero and no features)".into(),
        ));
    };
    let n = first.n();
    if let Some((_, w)) = terms.iter().find(|(_, w)| w.n() != n) {
        return Err(Error::Shape(format!(
            "affinity sizes differ: {n} vs {}",
            w.n()
        )));
    }
    let mut out = DMatrix::zeros(n, n);
    for (coef, w) in &terms {
        out.zip_apply(w.matrix(), |o: &mut f64, v: f64| *o += coef * v);
    }
    out.apply(|v: &mut f64| *v = v.max(0.0));
    AffinityMatrix::new(out)
}

/// Builds the combined affinity for one (already cropped) image.
pub fn build_affinity(
    img: &GrayImage,
    k: usize,
    features: Option<&FeatureMap>,
    cfg: &AffinityConfig,
) -> Result<AffinityMatrix> {
    let grid = PatchGrid::from_image(img, k)?;
    let w_feat = match features {
        Some(f) if cfg.use_features => {
            let f = f.clone().with_grid(grid.n_h, grid.n_w)?;
            Some(feature_affinity(&f)?)
        }
        _ => None,
    };
    let w_ssd = (cfg.c_ssd != 0.0)
        .then(|| gaussian_kernel(&patchwise_distance(&grid, PatchMetric::Ssd, cfg.mi_bins)?, cfg.delta))
        .transpose()?;
    let w_mi = (cfg.c_mi != 0.0)
        .then(|| gaussian_kernel(&patchwise_distance(&grid, PatchMetric::Mi, cfg.mi_bins)?, cfg.delta))
        .transpose()?;
    let w_pos = (cfg.c_pos != 0.0)
        .then(|| {
            let pe = PositionEncoding::new(grid.n_h, grid.n_w);
            positional_affinity(&pe, cfg.knn.min(grid.len() - 1))
        })
        .transpose()?;
    combine(
        w_feat.as_ref(),
        w_ssd.as_ref(),
        w_mi.as_ref(),
        w_pos.as_ref(),
        cfg.into(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn fm(rows: usize, cols: usize, v: Vec<f32>) -> FeatureMap {
        FeatureMap::from_tensor(Tensor::matrix(rows, cols, v).unwrap()).unwrap()
    }

    #[test]
    fn orthogonal_features() {
        let w = feature_affinity(&fm(2, 2, vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(w.matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn anti_correlation_zeroed() {
        let w = feature_affinity(&fm(2, 2, vec![1.0, 0.0, -1.0, 0.0])).unwrap();
        assert_eq!(w.matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn zero_feature_row_names_patch() {
        let err = feature_affinity(&fm(3, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::DegenerateFeature { index: 1 }));
    }

    #[test]
    fn ssd_examples() {
        assert_eq!(ssd(&[0.3; 4], &[0.3; 4]), 0.0);
        assert_eq!(ssd(&[0.0; 4], &[1.0; 4]), 1.0);
    }

    #[test]
    fn mi_of_identical_nonconstant_patch_is_two() {
        let p: Vec<f32> = (0..64).map(|i| (i % 7) as f32 / 7.0).collect();
        assert!((mutual_information(&p, &p, 32) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mi_degenerate_constants() {
        assert_eq!(mutual_information(&[0.2; 16], &[0.2; 16], 32), 2.0);
        assert_eq!(mutual_information(&[0.2; 16], &[0.9; 16], 32), 1.0);
    }

    #[test]
    fn kernel_values() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        let w = gaussian_kernel(&d, 1.0).unwrap();
        assert_eq!(w.get(0, 0), 1.0);
        assert!((w.get(0, 1) - std::f64::consts::E).abs() < 1e-12);
        assert!(gaussian_kernel(&d, 0.0).is_err());
    }

    #[test]
    fn position_encoding_corners() {
        let pe = PositionEncoding::new(2, 2);
        assert_eq!(pe.coords, vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn positional_self_and_far_corner() {
        let pe = PositionEncoding::new(2, 2);
        let w = positional_affinity(&pe, 3).unwrap();
        for i in 0..4 {
            assert_eq!(w.get(i, i), 1.0);
        }
        assert_eq!(w.get(0, 3), 0.0);
        assert_eq!(w.get(0, 1), 0.0); // 1 - 1
    }

    #[test]
    fn positional_keeps_ties() {
        // edge-center patch of a 3x3 grid has three neighbors at distance 0.5
        let pe = PositionEncoding::new(3, 3);
        let w = positional_affinity(&pe, 2).unwrap();
        for j in [0, 2, 4] {
            assert!((w.get(1, j) - 0.5).abs() < 1e-12, "neighbor {j}");
        }
    }

    #[test]
    fn combine_shape_mismatch() {
        let a = AffinityMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let b = AffinityMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let c = Coefficients { ssd: 1.0, mi: 0.0, pos: 0.0 };
        assert!(matches!(combine(Some(&a), Some(&b), None, None, c), Err(Error::Shape(_))));
    }

    #[test]
    fn combine_zero_coefficients_returns_feat() {
        let a = AffinityMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0])).unwrap();
        let junk = AffinityMatrix::new(DMatrix::from_element(2, 2, 9.0)).unwrap();
        let c = Coefficients { ssd: 0.0, mi: 0.0, pos: 0.0 };
        let out = combine(Some(&a), Some(&junk), Some(&junk), Some(&junk), c).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn combine_clamps_negatives() {
        let a = AffinityMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, -2.0, -2.0, 1.0])).unwrap();
        let c = Coefficients { ssd: 0.0, mi: 0.0, pos: 0.0 };
        let out = combine(Some(&a), None, None, None, c).unwrap();
        assert_eq!(out.get(0, 1), 0.0);
    }

    #[test]
    fn patch_grid_order() {
        let img = GrayImage::from_fn(4, 2, |x, y| (x + 4 * y) as f32 / 8.0);
        let g = PatchGrid::from_image(&img, 2).unwrap();
        assert_eq!((g.n_h, g.n_w), (1, 2));
        assert_eq!(g.patches[1], vec![2.0 / 8.0, 3.0 / 8.0, 6.0 / 8.0, 7.0 / 8.0]);
    }
}

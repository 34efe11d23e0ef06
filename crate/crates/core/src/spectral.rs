//! Normalized Laplacian, its low eigenpairs, and k-means oversegmentation of
//! the resulting spectral embedding.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::affinity::AffinityMatrix;
use crate::config::Solver;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansParams};
use crate::mask::SegmentationMask;

/// Lowest eigenpairs of a Laplacian, eigenvalues ascending, one eigenvector
/// per column.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralDecomposition {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// `D^{-1/2} (D - W) D^{-1/2}` with `d_ii = sum_j w_ij`.
pub fn normalized_laplacian(w: &AffinityMatrix) -> Result<DMatrix<f64>> {
    let m = w.matrix();
    let n = m.nrows();
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let d: f64 = m.row(i).iter().sum();
        if d.is_nan() || d <= 0.0 {
            return Err(Error::DegenerateGraph { node: i });
        }
        inv_sqrt.push(1.0 / d.sqrt());
    }
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let v = -m[(i, j)] * inv_sqrt[i] * inv_sqrt[j];
            l[(i, j)] = if i == j { 1.0 + v } else { v };
        }
    }
    // exact symmetry regardless of rounding order
    for j in 0..n {
        for i in 0..j {
            let avg = 0.5 * (l[(i, j)] + l[(j, i)]);
            l[(i, j)] = avg;
            l[(j, i)] = avg;
        }
    }
    Ok(l)
}

/// Flips each column so its largest-magnitude entry (first one on ties) is
/// positive.
fn fix_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

fn check_residuals(l: &DMatrix<f64>, dec: &SpectralDecomposition, iterations: usize) -> Result<()> {
    let tol = 1e-6 * l.norm().max(f64::MIN_POSITIVE);
    for (c, &lambda) in dec.eigenvalues.iter().enumerate() {
        let v = dec.eigenvectors.column(c);
        let r = (l * v - v * lambda).norm();
        if r.is_nan() || r > tol {
            return Err(Error::Solver { iterations });
        }
    }
    Ok(())
}

/// The `n` smallest eigenpairs of symmetric `l`.
pub fn eigendecompose(l: &DMatrix<f64>, n: usize, solver: Solver) -> Result<SpectralDecomposition> {
    if !l.is_square() {
        return Err(Error::Shape("Laplacian must be square".into()));
    }
    if n == 0 || n > l.nrows() {
        return Err(Error::Shape(format!(
            "cannot take {n} eigenpairs of a {}x{} matrix",
            l.nrows(),
            l.ncols()
        )));
    }
    match solver {
        Solver::Dense => dense_eigen(l, n),
        Solver::Lanczos => lanczos_eigen(l, n, 0),
    }
}

fn sorted_pairs(eig: SymmetricEigen<f64, nalgebra::Dyn>, n: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    order.truncate(n);
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), n, |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

const DENSE_MAX_SWEEPS: usize = 10_000;

fn dense_eigen(l: &DMatrix<f64>, n: usize) -> Result<SpectralDecomposition> {
    let eig = SymmetricEigen::try_new(l.clone(), f64::EPSILON, DENSE_MAX_SWEEPS)
        .ok_or(Error::Solver {
            iterations: DENSE_MAX_SWEEPS,
        })?;
    let (eigenvalues, mut eigenvectors) = sorted_pairs(eig, n);
    fix_signs(&mut eigenvectors);
    let dec = SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    };
    check_residuals(l, &dec, DENSE_MAX_SWEEPS)?;
    Ok(dec)
}

/// Lanczos with full reorthogonalization. The Krylov basis grows until the
/// wanted Ritz pairs meet the residual bound or the space is exhausted.
pub fn lanczos_eigen(l: &DMatrix<f64>, n: usize, seed: u64) -> Result<SpectralDecomposition> {
    let dim = l.nrows();
    let tol = 1e-9 * l.norm().max(f64::MIN_POSITIVE);

    // deterministic, non-degenerate start vector
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    let start = DVector::from_fn(dim, |_, _| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 + 0.5
    });
    let mut basis: Vec<DVector<f64>> = vec![start.normalize()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();

    let mut steps = 0;
    loop {
        steps += 1;
        let q = basis.last().unwrap().clone();
        let mut w = l * &q;
        let alpha = q.dot(&w);
        alphas.push(alpha);
        // two passes of classical Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let beta = w.norm();
        let m = alphas.len();

        let exhausted = m == dim || beta <= 1e-12 * l.norm().max(1.0);
        if m >= n && (m.is_multiple_of(5) || exhausted) {
            let t = DMatrix::from_fn(m, m, |i, j| {
                if i == j {
                    alphas[i]
                } else if i + 1 == j {
                    betas[i]
                } else if j + 1 == i {
                    betas[j]
                } else {
                    0.0
                }
            });
            let eig = SymmetricEigen::try_new(t, f64::EPSILON, DENSE_MAX_SWEEPS)
                .ok_or(Error::Solver { iterations: steps })?;
            let (values, s) = sorted_pairs(eig, n);
            let converged = exhausted || (0..n).all(|c| (beta * s[(m - 1, c)]).abs() <= tol);
            if converged {
                let q_mat = DMatrix::from_columns(&basis);
                let mut vectors = q_mat * s;
                for mut col in vectors.column_iter_mut() {
                    let nrm = col.norm();
                    col /= nrm;
                }
                fix_signs(&mut vectors);
                let dec = SpectralDecomposition {
                    eigenvalues: values,
                    eigenvectors: vectors,
                };
                check_residuals(l, &dec, steps)?;
                return Ok(dec);
            }
        }
        if exhausted {
            // invariant subspace found before `n` vectors; restart is not
            // attempted for such tiny or reducible inputs
            return dense_eigen(l, n);
        }
        betas.push(beta);
        basis.push(w / beta);
    }
}

/// Per-eigenvector fields reshaped onto the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigensegments {
    pub n_h: usize,
    pub n_w: usize,
    pub fields: Vec<Vec<f64>>,
}

impl Eigensegments {
    pub fn from_decomposition(dec: &SpectralDecomposition, n_h: usize, n_w: usize) -> Result<Self> {
        if dec.eigenvectors.nrows() != n_h * n_w {
            return Err(Error::Shape(format!(
                "{} eigenvector rows do not fit a {n_h}x{n_w} grid",
                dec.eigenvectors.nrows()
            )));
        }
        let fields = dec
            .eigenvectors
            .column_iter()
            .map(|c| c.iter().copied().collect())
            .collect();
        Ok(Eigensegments { n_h, n_w, fields })
    }

    /// Binary view of one eigensegment: patches where the eigenvector is
    /// positive.
    pub fn positive_mask(&self, index: usize) -> SegmentationMask {
        let labels = self.fields[index].iter().map(|&v| u32::from(v > 0.0)).collect();
        SegmentationMask::new(self.n_w, self.n_h, labels)
            .expect("grid dims")
            .with_label_space(2)
            .expect("binary")
    }
}

/// k-means over the per-patch rows of the eigenvectors that follow the
/// trivial first one. Returns a grid-resolution mask whose labels are sorted
/// by descending segment size. A complete decomposition of a graph with
/// fewer nodes than `n_segments + 1` uses every vector it has.
pub fn oversegment(
    dec: &SpectralDecomposition,
    n_segments: usize,
    grid: (usize, usize),
    seed: u64,
    restarts: usize,
) -> Result<SegmentationMask> {
    let (n_h, n_w) = grid;
    let rows = dec.eigenvectors.nrows();
    if rows != n_h * n_w {
        return Err(Error::Shape(format!(
            "{rows} eigenvector rows do not fit a {n_h}x{n_w} grid"
        )));
    }
    if n_segments == 0 {
        return Err(Error::Config("need at least one segment".into()));
    }
    let mut cols = embedding_columns(n_segments);
    if dec.len() < cols + 1 {
        if dec.len() < rows {
            return Err(Error::Shape(format!(
                "{n_segments} segments need {} eigenvectors, decomposition has {}",
                cols + 1,
                dec.len()
            )));
        }
        cols = dec.len() - 1;
    }
    if n_segments == 1 || cols == 0 {
        return Ok(SegmentationMask::constant(n_w, n_h, 0));
    }
    let points: Vec<Vec<f64>> = (0..rows)
        .map(|r| (1..=cols).map(|c| dec.eigenvectors[(r, c)]).collect())
        .collect();
    let params = KMeansParams {
        n_init: restarts.max(1),
        ..KMeansParams::default()
    };
    let result = kmeans(&points, n_segments, seed, &params);
    let labels = result.labels.iter().map(|&l| l as u32).collect();
    SegmentationMask::new(n_w, n_h, labels)
}

/// Number of non-trivial eigenvectors embedded for `n_segments` clusters.
pub fn embedding_columns(n_segments: usize) -> usize {
    n_segments
}

/// Eigenpairs needed by [`oversegment`] for `n_segments` clusters.
pub fn eigenpairs_needed(n_segments: usize) -> usize {
    embedding_columns(n_segments) + 1
}

/// Affinity to grid mask: Laplacian, decomposition, oversegmentation.
pub fn segment_affinity(
    w: &AffinityMatrix,
    n_segments: usize,
    grid: (usize, usize),
    solver: Solver,
    seed: u64,
    restarts: usize,
) -> Result<(SpectralDecomposition, SegmentationMask)> {
    let l = normalized_laplacian(w)?;
    let n = eigenpairs_needed(n_segments).min(w.n());
    let dec = eigendecompose(&l, n, solver)?;
    let mask = oversegment(&dec, n_segments, grid, seed, restarts)?;
    Ok((dec, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn aff(n: usize, v: &[f64]) -> AffinityMatrix {
        AffinityMatrix::new(DMatrix::from_row_slice(n, n, v)).unwrap()
    }

    #[test]
    fn all_ones_two_nodes() {
        let l = normalized_laplacian(&aff(2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert!((l.clone() - want).norm() < 1e-15);
        let dec = eigendecompose(&l, 2, Solver::Dense).unwrap();
        assert!(dec.eigenvalues[0].abs() < 1e-12);
        assert!((dec.eigenvalues[1] - 1.0).abs() < 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((dec.eigenvectors[(0, 0)] - s).abs() < 1e-12);
        assert!((dec.eigenvectors[(1, 0)] - s).abs() < 1e-12);
    }

    #[test]
    fn identity_affinity_gives_zero_laplacian() {
        let w = AffinityMatrix::new(DMatrix::identity(4, 4)).unwrap();
        assert_eq!(normalized_laplacian(&w).unwrap(), DMatrix::zeros(4, 4));
    }

    #[test]
    fn isolated_node_is_named() {
        let w = aff(3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            normalized_laplacian(&w),
            Err(Error::DegenerateGraph { node: 2 })
        ));
    }

    #[test]
    fn signs_fixed_positive() {
        let l = normalized_laplacian(&aff(3, &[1.0, 0.5, 0.1, 0.5, 1.0, 0.5, 0.1, 0.5, 1.0])).unwrap();
        let dec = eigendecompose(&l, 3, Solver::Dense).unwrap();
        for col in dec.eigenvectors.column_iter() {
            let max = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(max > 0.0);
        }
    }

    #[test]
    fn single_segment() {
        let l = normalized_laplacian(&aff(2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        let dec = eigendecompose(&l, 2, Solver::Dense).unwrap();
        let m = oversegment(&dec, 1, (1, 2), 0, 1).unwrap();
        assert_eq!(m.labels(), &[0, 0]);
    }

    #[test]
    fn lanczos_agrees_with_dense_on_path_graph() {
        let n = 40;
        let w = AffinityMatrix::new(DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else if i.abs_diff(j) == 1 {
                0.8
            } else {
                0.01
            }
        }))
        .unwrap();
        let l = normalized_laplacian(&w).unwrap();
        let a = eigendecompose(&l, 5, Solver::Dense).unwrap();
        let b = eigendecompose(&l, 5, Solver::Lanczos).unwrap();
        for i in 0..5 {
            assert!((a.eigenvalues[i] - b.eigenvalues[i]).abs() < 1e-9);
            let dot = a.eigenvectors.column(i).dot(&b.eigenvectors.column(i));
            assert!((dot.abs() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn positive_mask_thresholds_at_zero() {
        let dec = SpectralDecomposition {
            eigenvalues: vec![0.0],
            eigenvectors: DMatrix::from_column_slice(4, 1, &[0.5, -0.1, 0.0, 0.2]),
        };
        let e = Eigensegments::from_decomposition(&dec, 2, 2).unwrap();
        assert_eq!(e.positive_mask(0).labels(), &[1, 0, 0, 1]);
    }
}

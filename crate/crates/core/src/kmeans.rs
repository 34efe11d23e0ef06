//! Seeded k-means (k-means++ init, Lloyd iterations) shared by step-I
//! oversegmentation and dataset-level semantic clustering.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Converged once no center moves farther than this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest inertia wins.
    pub n_init: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            max_iters: 300,
            tol: 1e-6,
            n_init: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster per point; ids ordered by descending cluster size.
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centers.len()
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center, ties to the lowest index.
fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            // guard against rounding landing on an existing center
            if d2[chosen] == 0.0 {
                d2.iter()
                    .enumerate()
                    .fold((0, -1.0), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                    .0
            } else {
                chosen
            }
        } else {
            break;
        };
        centers.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, p: &KMeansParams) -> KMeansResult {
    let dim = points[0].len();
    let k = centers.len();
    let mut labels = vec![0usize; points.len()];
    let mut iterations = 0;
    for _ in 0..p.max_iters {
        iterations += 1;
        for (l, pt) in labels.iter_mut().zip(points) {
            *l = nearest(pt, &centers).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, pt) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(pt) {
                *s += v;
            }
        }
        let mut moved: f64 = 0.0;
        for c in 0..k {
            let new = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // empty cluster: take the point farthest from its own center
                let far = points
                    .iter()
                    .zip(&labels)
                    .map(|(pt, &l)| sq_dist(pt, &centers[l]))
                    .enumerate()
                    .fold((0, -1.0), |b, (i, d)| if d > b.1 { (i, d) } else { b })
                    .0;
                labels[far] = c;
                points[far].clone()
            };
            moved = moved.max(sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if moved <= p.tol {
            break;
        }
    }
    let mut inertia = 0.0;
    for (l, pt) in labels.iter_mut().zip(points) {
        let (c, d) = nearest(pt, &centers);
        *l = c;
        inertia += d;
    }
    KMeansResult {
        labels,
        centers,
        inertia,
        iterations,
    }
}

/// Reorders cluster ids by descending size, ties by first member index.
/// Clusters left empty are dropped.
fn canonicalize(mut r: KMeansResult) -> KMeansResult {
    let k = r.centers.len();
    let mut size = vec![0usize; k];
    let mut first = vec![usize::MAX; k];
    for (i, &l) in r.labels.iter().enumerate() {
        size[l] += 1;
        first[l] = first[l].min(i);
    }
    let mut order: Vec<usize> = (0..k).filter(|&c| size[c] > 0).collect();
    order.sort_by(|&a, &b| size[b].cmp(&size[a]).then(first[a].cmp(&first[b])));
    let mut lut = vec![usize::MAX; k];
    for (new, &old) in order.iter().enumerate() {
        lut[old] = new;
    }
    r.labels.iter_mut().for_each(|l| *l = lut[*l]);
    r.centers = order.iter().map(|&c| r.centers[c].clone()).collect();
    r
}

/// Clusters `points` into `k` groups. When there are fewer distinct points
/// than `k`, `k` shrinks to that count with a warning.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, params: &KMeansParams) -> KMeansResult {
    assert!(!points.is_empty(), "kmeans needs at least one point");
    assert!(k >= 1, "kmeans needs k >= 1");
    let distinct = count_distinct(points);
    let k = if distinct < k {
        warn!("only {distinct} distinct points for {k} clusters; reducing k");
        distinct
    } else {
        k
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..params.n_init.max(1) {
        let init = plus_plus_init(points, k, &mut rng);
        let r = lloyd(points, init, params);
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    canonicalize(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Vec<Vec<f64>> {
        let centers = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)];
        let mut pts = Vec::new();
        for (i, &(cx, cy)) in centers.iter().enumerate() {
            for j in 0..(10 + 5 * i) {
                let t = j as f64 * 0.7;
                pts.push(vec![cx + 0.3 * t.sin(), cy + 0.3 * t.cos()]);
            }
        }
        pts
    }

    #[test]
    fn separated_blobs_recovered_and_sorted_by_size() {
        let pts = blobs();
        let r = kmeans(&pts, 3, 7, &KMeansParams::default());
        assert_eq!(r.k(), 3);
        // blob sizes 10, 15, 20 -> ids 2, 1, 0
        assert!(r.labels[..10].iter().all(|&l| l == 2));
        assert!(r.labels[10..25].iter().all(|&l| l == 1));
        assert!(r.labels[25..].iter().all(|&l| l == 0));
    }

    #[test]
    fn single_cluster() {
        let r = kmeans(&blobs(), 1, 0, &KMeansParams::default());
        assert!(r.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn reduced_k_for_duplicates() {
        let pts = vec![vec![1.0], vec![1.0], vec![2.0], vec![2.0]];
        let r = kmeans(&pts, 4, 0, &KMeansParams::default());
        assert_eq!(r.k(), 2);
        assert_eq!(r.labels[0], r.labels[1]);
        assert_ne!(r.labels[0], r.labels[2]);
    }

    #[test]
    fn seeded_runs_are_bitwise_identical() {
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![((i * 37) % 101) as f64 / 7.0, ((i * 53) % 89) as f64 / 3.0])
            .collect();
        let a = kmeans(&pts, 6, 42, &KMeansParams::default());
        let b = kmeans(&pts, 6, 42, &KMeansParams::default());
        assert_eq!(a, b);
    }
}

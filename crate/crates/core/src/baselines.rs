//! SLIC superpixels and Felzenszwalb graph segmentation on grayscale images.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use crate::config::{FzParams, SlicParams};
use crate::error::{Error, Result};
use crate::gray::GrayImage;
use crate::mask::SegmentationMask;
use crate::preprocess::gaussian_blur;
use crate::semantic::connected_components;

fn check_slic(p: &SlicParams, n_pix: usize) -> Result<()> {
    if p.n_superpixels == 0 || p.n_superpixels > n_pix {
        return Err(Error::Config(format!(
            "slic needs 1 <= n_superpixels <= {n_pix}, got {}",
            p.n_superpixels
        )));
    }
    if !(p.compactness.is_finite() && p.compactness > 0.0) {
        return Err(Error::Config("slic compactness must be > 0".into()));
    }
    Ok(())
}

/// Seed grid of roughly `n` cells matching the image aspect ratio.
fn seed_grid(w: usize, h: usize, n: usize) -> (usize, usize) {
    let nx = ((n as f64 * w as f64 / h as f64).sqrt().round() as usize).clamp(1, w);
    let ny = ((n as f64 / nx as f64).round() as usize).clamp(1, h);
    (nx, ny)
}

/// Localized k-means in (intensity * 100 / m, x / S, y / S) space, started
/// from a square seed grid nudged to the lowest local gradient, followed by
/// a pass that makes every superpixel 4-connected. Labels are numbered in
/// raster order.
pub fn slic(img: &GrayImage, p: &SlicParams) -> Result<SegmentationMask> {
    let (w, h) = img.dims();
    check_slic(p, w * h)?;
    if p.n_superpixels == 1 {
        return Ok(SegmentationMask::constant(w, h, 0));
    }
    let data = img.data();
    let at = |x: usize, y: usize| data[y * w + x] as f64;
    let s = ((w * h) as f64 / p.n_superpixels as f64).sqrt();
    let ci = 100.0 / p.compactness;

    let grad = |x: usize, y: usize| {
        if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
            return f64::INFINITY;
        }
        (at(x + 1, y) - at(x - 1, y)).powi(2) + (at(x, y + 1) - at(x, y - 1)).powi(2)
    };
    let (nx, ny) = seed_grid(w, h, p.n_superpixels);
    // (intensity, x, y)
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            // cell center in pixel-index coordinates
            let fx = (i as f64 + 0.5) * w as f64 / nx as f64 - 0.5;
            let fy = (j as f64 + 0.5) * h as f64 / ny as f64 - 0.5;
            let cx = (fx.round() as usize).min(w - 1);
            let cy = (fy.round() as usize).min(h - 1);
            let mut best = (grad(cx, cy), fx, fy);
            for yy in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for xx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    let g = grad(xx, yy);
                    if g < best.0 {
                        best = (g, xx as f64, yy as f64);
                    }
                }
            }
            let (bx, by) = (best.1, best.2);
            centers.push([at(bx.round() as usize, by.round() as usize), bx, by]);
        }
    }

    let mut labels = vec![0u32; w * h];
    let mut dist = vec![f64::INFINITY; w * h];
    let reach = (2.0 * s).ceil() as isize;
    for _ in 0..p.max_iters.max(1) {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cx, cy) = (c[1].round() as isize, c[2].round() as isize);
            let y0 = (cy - reach).max(0) as usize;
            let y1 = ((cy + reach) as usize).min(h - 1);
            let x0 = (cx - reach).max(0) as usize;
            let x1 = ((cx + reach) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let di = (at(x, y) - c[0]) * ci;
                    let dx = (x as f64 - c[1]) / s;
                    let dy = (y as f64 - c[2]) / s;
                    let d = di * di + dx * dx + dy * dy;
                    let i = y * w + x;
                    if d < dist[i] {
                        dist[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 4]; centers.len()];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if dist[i].is_finite() {
                    let a = &mut sums[labels[i] as usize];
                    a[0] += at(x, y);
                    a[1] += x as f64;
                    a[2] += y as f64;
                    a[3] += 1.0;
                }
            }
        }
        for (c, a) in centers.iter_mut().zip(&sums) {
            if a[3] > 0.0 {
                *c = [a[0] / a[3], a[1] / a[3], a[2] / a[3]];
            }
        }
    }
    // a pixel out of every window keeps the nearest center in the plain metric
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if dist[i].is_finite() {
                continue;
            }
            let mut best = (f64::INFINITY, 0u32);
            for (k, c) in centers.iter().enumerate() {
                let di = (at(x, y) - c[0]) * ci;
                let d = di * di + ((x as f64 - c[1]).powi(2) + (y as f64 - c[2]).powi(2)) / (s * s);
                if d < best.0 {
                    best = (d, k as u32);
                }
            }
            labels[i] = best.1;
        }
    }
    let raw = SegmentationMask::new(w, h, labels)?;
    // fragments under a quarter cell always merge; under half a cell they
    // merge while the count exceeds the request
    let cell = s * s;
    let min_size = (cell / 4.0).round().max(1.0) as usize;
    let soft = ((cell / 2.0).round() as usize, p.n_superpixels);
    Ok(enforce_connectivity(&raw, img, min_size, Some(soft)))
}

/// Splits labels into 4-connected components and merges components smaller
/// than `min_size` into the adjacent component of closest mean intensity,
/// smallest first. With `soft = Some((size, count))`, components below `size`
/// keep merging while more than `count` remain.
pub fn enforce_connectivity(
    mask: &SegmentationMask,
    img: &GrayImage,
    min_size: usize,
    soft: Option<(usize, usize)>,
) -> SegmentationMask {
    let (w, h) = mask.dims();
    let comp = connected_components(mask);
    let n = comp.distinct().len();
    let mut size = vec![0usize; n];
    let mut sum = vec![0.0f64; n];
    let mut adj = vec![BTreeSet::new(); n];
    for y in 0..h {
        for x in 0..w {
            let c = comp.get(x, y) as usize;
            size[c] += 1;
            sum[c] += img.get(x, y) as f64;
            if x + 1 < w {
                let d = comp.get(x + 1, y) as usize;
                if d != c {
                    adj[c].insert(d);
                    adj[d].insert(c);
                }
            }
            if y + 1 < h {
                let d = comp.get(x, y + 1) as usize;
                if d != c {
                    adj[c].insert(d);
                    adj[d].insert(c);
                }
            }
        }
    }
    let mut parent: Vec<usize> = (0..n).collect();
    let mut alive = n;
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..n).map(|c| Reverse((size[c], c))).collect();
    while let Some(Reverse((sz, c))) = heap.pop() {
        if parent[c] != c || size[c] != sz {
            continue;
        }
        let wanted = sz < min_size || soft.is_some_and(|(s, count)| sz < s && alive > count);
        if !wanted {
            // everything left is at least as large
            break;
        }
        let mean = sum[c] / size[c] as f64;
        let target = adj[c].iter().copied().min_by(|&a, &b| {
            let da = (sum[a] / size[a] as f64 - mean).abs();
            let db = (sum[b] / size[b] as f64 - mean).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        });
        let Some(t) = target else { continue };
        parent[c] = t;
        size[t] += size[c];
        sum[t] += sum[c];
        alive -= 1;
        let neighbors = std::mem::take(&mut adj[c]);
        for nb in neighbors {
            adj[nb].remove(&c);
            if nb != t {
                adj[nb].insert(t);
                adj[t].insert(nb);
            }
        }
        heap.push(Reverse((size[t], t)));
    }
    let root = |mut c: usize| {
        while parent[c] != c {
            c = parent[c];
        }
        c
    };
    contiguous(w, h, comp.labels().iter().map(|&c| root(c as usize)))
}

/// Renumbers arbitrary ids to `0..n` in raster order of first appearance.
fn contiguous(w: usize, h: usize, ids: impl Iterator<Item = usize>) -> SegmentationMask {
    let mut map = std::collections::HashMap::new();
    let labels: Vec<u32> = ids
        .map(|id| {
            let next = map.len() as u32;
            *map.entry(id).or_insert(next)
        })
        .collect();
    SegmentationMask::new(w, h, labels).expect("same dims")
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Joins two roots; the larger (then lower-index) root survives.
    fn union(&mut self, a: usize, b: usize, weight: f64) {
        let (big, small) = if (self.size[a], b) > (self.size[b], a) {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = weight.max(self.internal[a]).max(self.internal[b]);
    }
}

/// Graph-based segmentation on the 8-connected pixel graph with edge weight
/// `|I(p) - I(q)|` after a Gaussian pre-blur. Edges are processed by weight,
/// then by pixel indices, and merge when the weight is at most
/// `min(Int(C) + scale / |C|)` of both sides. Components below `min_size` are
/// then merged along the cheapest remaining edges.
pub fn felzenszwalb(img: &GrayImage, p: &FzParams) -> Result<SegmentationMask> {
    if p.scale.is_nan() || p.scale <= 0.0 {
        return Err(Error::Config("fz scale must be > 0".into()));
    }
    if p.min_size == 0 {
        return Err(Error::Config("fz min_size must be >= 1".into()));
    }
    let (w, h) = img.dims();
    let smooth = gaussian_blur(img, p.sigma);
    let v = smooth.data();
    let mut edges: Vec<(f32, usize, usize)> = Vec::with_capacity(4 * w * h);
    for y in 0..h {
        for x in 0..w {
            let a = y * w + x;
            let mut push = |b: usize| edges.push(((v[a] - v[b]).abs(), a.min(b), a.max(b)));
            if x + 1 < w {
                push(a + 1);
            }
            if y + 1 < h {
                push(a + w);
                if x + 1 < w {
                    push(a + w + 1);
                }
                if x > 0 {
                    push(a + w - 1);
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut ds = DisjointSet::new(w * h);
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra == rb {
            continue;
        }
        let wt = wt as f64;
        let ta = ds.internal[ra] + p.scale / ds.size[ra] as f64;
        let tb = ds.internal[rb] + p.scale / ds.size[rb] as f64;
        if wt <= ta.min(tb) {
            ds.union(ra, rb, wt);
        }
    }
    for &(wt, a, b) in &edges {
        let (ra, rb) = (ds.find(a), ds.find(b));
        if ra != rb && (ds.size[ra] < p.min_size || ds.size[rb] < p.min_size) {
            ds.union(ra, rb, wt as f64);
        }
    }
    let roots: Vec<usize> = (0..w * h).map(|i| ds.find(i)).collect();
    Ok(contiguous(w, h, roots.into_iter()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tone(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, _| if x < w / 2 { 0.2 } else { 0.8 })
    }

    fn fz(scale: f64, sigma: f64, min_size: usize) -> FzParams {
        FzParams {
            scale,
            sigma,
            min_size,
        }
    }

    #[test]
    fn fz_constant_is_one_segment() {
        let img = GrayImage::constant(20, 15, 0.4);
        assert_eq!(felzenszwalb(&img, &FzParams::default()).unwrap().distinct(), vec![0]);
    }

    #[test]
    fn fz_two_regions() {
        let img = two_tone(24, 16);
        let m = felzenszwalb(&img, &fz(1.0, 0.0, 1)).unwrap();
        assert_eq!(m.distinct(), vec![0, 1]);
        for y in 0..16 {
            for x in 0..24 {
                assert_eq!(m.get(x, y), (x >= 12) as u32);
            }
        }
        // the blurred edge columns are absorbed once they fall below min_size
        let m = felzenszwalb(&img, &fz(1.0, 0.8, 40)).unwrap();
        assert_eq!(m.distinct().len(), 2);
    }

    #[test]
    fn fz_huge_scale_is_one_segment() {
        let img = GrayImage::from_fn(16, 16, |x, y| ((x * 7 + y * 13) % 10) as f32 / 10.0);
        let m = felzenszwalb(&img, &fz(1e9, 0.8, 1)).unwrap();
        assert_eq!(m.distinct().len(), 1);
    }

    #[test]
    fn fz_rejects_bad_params() {
        let img = GrayImage::constant(4, 4, 0.0);
        assert!(felzenszwalb(&img, &fz(0.0, 0.8, 1)).is_err());
        assert!(felzenszwalb(&img, &fz(1.0, 0.8, 0)).is_err());
    }

    #[test]
    fn slic_single() {
        let img = two_tone(10, 10);
        let p = SlicParams {
            n_superpixels: 1,
            ..SlicParams::default()
        };
        assert_eq!(slic(&img, &p).unwrap().distinct(), vec![0]);
    }

    #[test]
    fn slic_rejects_too_many() {
        let img = GrayImage::constant(3, 3, 0.0);
        let p = SlicParams {
            n_superpixels: 10,
            ..SlicParams::default()
        };
        assert!(slic(&img, &p).is_err());
    }

    #[test]
    fn slic_constant_is_regular() {
        let img = GrayImage::constant(60, 60, 0.5);
        let p = SlicParams {
            n_superpixels: 36,
            ..SlicParams::default()
        };
        let m = slic(&img, &p).unwrap();
        assert_eq!(m.distinct().len(), 36);
        for c in m.counts().values() {
            assert_eq!(*c, 100);
        }
    }

    #[test]
    fn slic_labels_are_connected() {
        let img = GrayImage::from_fn(40, 30, |x, y| ((x * x + 3 * y) % 17) as f32 / 17.0);
        let m = slic(&img, &SlicParams::default()).unwrap();
        assert_eq!(connected_components(&m).distinct().len(), m.distinct().len());
    }
}

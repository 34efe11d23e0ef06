//! Evaluation: DICE, pseudo-label to ground-truth matching (Hungarian or
//! majority vote), label consistency, undersegmentation error and boundary
//! recall.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::SegmentationMask;

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "dice of masks with {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

fn same_dims(a: &SegmentationMask, b: &SegmentationMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "masks are {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Pixel co-occurrence of pseudo labels and ground-truth classes.
#[derive(Debug, Clone)]
pub struct Overlap {
    pub pseudo: Vec<u32>,
    pub gt: Vec<u32>,
    pub pseudo_size: Vec<usize>,
    pub gt_size: Vec<usize>,
    /// `counts[p][g]`, indices into `pseudo` and `gt`.
    pub counts: Vec<Vec<usize>>,
}

impl Overlap {
    pub fn new(pseudo: &SegmentationMask, gt: &SegmentationMask) -> Result<Self> {
        same_dims(pseudo, gt)?;
        let p_ids = pseudo.distinct();
        let g_ids = gt.distinct();
        let p_index: BTreeMap<u32, usize> = p_ids.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let g_index: BTreeMap<u32, usize> = g_ids.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let mut counts = vec![vec![0usize; g_ids.len()]; p_ids.len()];
        let mut pseudo_size = vec![0; p_ids.len()];
        let mut gt_size = vec![0; g_ids.len()];
        for (&p, &g) in pseudo.labels().iter().zip(gt.labels()) {
            let (pi, gi) = (p_index[&p], g_index[&g]);
            counts[pi][gi] += 1;
            pseudo_size[pi] += 1;
            gt_size[gi] += 1;
        }
        Ok(Overlap {
            pseudo: p_ids,
            gt: g_ids,
            pseudo_size,
            gt_size,
            counts,
        })
    }

    pub fn dice(&self, p: usize, g: usize) -> f64 {
        2.0 * self.counts[p][g] as f64 / (self.pseudo_size[p] + self.gt_size[g]) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMethod {
    Hungarian,
    Majority,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub method: MatchMethod,
    /// pseudo label -> ground-truth class
    pub mapping: BTreeMap<u32, u32>,
    /// Sum of per-class DICE over matched classes.
    pub objective: f64,
    pub unmatched_pseudo: Vec<u32>,
    /// Ground-truth classes present in the image.
    pub gt_classes: Vec<u32>,
    /// DICE for every ground-truth class in the image; classes left
    /// without a pseudo label score 0.
    pub class_dice: BTreeMap<u32, f64>,
    /// Pseudo label representing each matched class (largest overlap when
    /// several map to it).
    pub representative: BTreeMap<u32, u32>,
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`). Returns the column chosen for each row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "assignment needs rows <= cols");
    // potentials formulation, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Injective pseudo-to-class assignment maximizing the summed DICE.
pub fn hungarian_match(pseudo: &SegmentationMask, gt: &SegmentationMask) -> Result<MatchResult> {
    let ov = Overlap::new(pseudo, gt)?;
    let (np, ng) = (ov.pseudo.len(), ov.gt.len());
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    if ng <= np {
        let cost: Vec<Vec<f64>> = (0..ng)
            .map(|g| (0..np).map(|p| -ov.dice(p, g)).collect())
            .collect();
        for (g, p) in min_cost_assignment(&cost).into_iter().enumerate() {
            pairs.push((p, g));
        }
    } else {
        let cost: Vec<Vec<f64>> = (0..np)
            .map(|p| (0..ng).map(|g| -ov.dice(p, g)).collect())
            .collect();
        for (p, g) in min_cost_assignment(&cost).into_iter().enumerate() {
            pairs.push((p, g));
        }
    }
    let mut mapping = BTreeMap::new();
    let mut class_dice = BTreeMap::new();
    let mut representative = BTreeMap::new();
    let mut objective = 0.0;
    for (p, g) in pairs {
        let d = ov.dice(p, g);
        mapping.insert(ov.pseudo[p], ov.gt[g]);
        class_dice.insert(ov.gt[g], d);
        representative.insert(ov.gt[g], ov.pseudo[p]);
        objective += d;
    }
    for &g in &ov.gt {
        class_dice.entry(g).or_insert(0.0);
    }
    let unmatched_pseudo = ov
        .pseudo
        .iter()
        .filter(|l| !mapping.contains_key(l))
        .copied()
        .collect();
    Ok(MatchResult {
        method: MatchMethod::Hungarian,
        mapping,
        objective,
        unmatched_pseudo,
        gt_classes: ov.gt.clone(),
        class_dice,
        representative,
    })
}

/// Each pseudo label goes to the class holding most of its pixels; ties go to
/// the lower class id. Several pseudo labels may share a class, whose DICE is
/// then computed on their union.
pub fn majority_match(pseudo: &SegmentationMask, gt: &SegmentationMask) -> Result<MatchResult> {
    let ov = Overlap::new(pseudo, gt)?;
    let mut mapping = BTreeMap::new();
    let mut union_inter: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut representative: BTreeMap<u32, (usize, u32)> = BTreeMap::new();
    for (p, row) in ov.counts.iter().enumerate() {
        let mut best = 0;
        for g in 1..row.len() {
            if row[g] > row[best] {
                best = g;
            }
        }
        mapping.insert(ov.pseudo[p], ov.gt[best]);
        let e = union_inter.entry(best).or_insert((0, 0));
        e.0 += row[best];
        e.1 += ov.pseudo_size[p];
        let r = representative.entry(ov.gt[best]).or_insert((0, ov.pseudo[p]));
        if row[best] > r.0 {
            *r = (row[best], ov.pseudo[p]);
        }
    }
    let mut class_dice = BTreeMap::new();
    let mut objective = 0.0;
    for (&g, &(inter, size)) in &union_inter {
        let d = 2.0 * inter as f64 / (size + ov.gt_size[g]) as f64;
        class_dice.insert(ov.gt[g], d);
        objective += d;
    }
    for &g in &ov.gt {
        class_dice.entry(g).or_insert(0.0);
    }
    Ok(MatchResult {
        method: MatchMethod::Majority,
        mapping,
        objective,
        unmatched_pseudo: Vec::new(),
        gt_classes: ov.gt.clone(),
        class_dice,
        representative: representative.into_iter().map(|(g, (_, p))| (g, p)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelConsistency {
    /// LC in percent per ground-truth class.
    pub per_class: BTreeMap<u32, f64>,
    /// Dataset-wide most prevalent pseudo label per class.
    pub prevalent: BTreeMap<u32, u32>,
    /// Mean over the scored classes.
    pub overall: f64,
    /// Standard deviation over the scored classes.
    pub std: f64,
    /// Agreement pooled over every (image, class) occurrence.
    pub pooled: f64,
}

/// For each class, the share of images containing it whose representative
/// pseudo label equals the class's dataset-wide most prevalent one. Classes in
/// `skip` still get a per-class entry but are left out of `overall`, `std`
/// and `pooled`.
pub fn label_consistency(per_image: &[MatchResult], skip: Option<u32>) -> Result<LabelConsistency> {
    if per_image.is_empty() {
        return Err(Error::Data("label consistency needs at least one image".into()));
    }
    let classes: BTreeSet<u32> = per_image.iter().flat_map(|m| m.gt_classes.iter().copied()).collect();
    let mut per_class = BTreeMap::new();
    let mut prevalent = BTreeMap::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for &g in &classes {
        let appearances: Vec<Option<u32>> = per_image
            .iter()
            .filter(|m| m.gt_classes.contains(&g))
            .map(|m| m.representative.get(&g).copied())
            .collect();
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for p in appearances.iter().flatten() {
            *votes.entry(*p).or_insert(0) += 1;
        }
        let Some((&mode, &count)) = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        else {
            warn!("class {g} was never matched; left out of label consistency");
            continue;
        };
        prevalent.insert(g, mode);
        per_class.insert(g, 100.0 * count as f64 / appearances.len() as f64);
        if Some(g) != skip {
            hits += count;
            total += appearances.len();
        }
    }
    let scored: Vec<f64> = per_class
        .iter()
        .filter(|(g, _)| Some(**g) != skip)
        .map(|(_, v)| *v)
        .collect();
    let (overall, std) = mean_std(&scored);
    Ok(LabelConsistency {
        per_class,
        prevalent,
        overall,
        std,
        pooled: if total > 0 {
            100.0 * hits as f64 / total as f64
        } else {
            0.0
        },
    })
}

/// `(1/N) * sum over superpixels s of (|s| - max_g |s ∩ g|)`.
pub fn undersegmentation_error(sp: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    let ov = Overlap::new(sp, gt)?;
    let leak: usize = ov
        .counts
        .iter()
        .zip(&ov.pseudo_size)
        .map(|(row, &size)| size - row.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(leak as f64 / sp.len() as f64)
}

/// Pixels with a 4-neighbor of a different label.
pub fn boundary_map(m: &SegmentationMask) -> Vec<bool> {
    let (w, h) = m.dims();
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let l = m.get(x, y);
            out[y * w + x] = (x > 0 && m.get(x - 1, y) != l)
                || (x + 1 < w && m.get(x + 1, y) != l)
                || (y > 0 && m.get(x, y - 1) != l)
                || (y + 1 < h && m.get(x, y + 1) != l);
        }
    }
    out
}

/// Chebyshev dilation by `d` as two separable running-max passes.
fn dilate(b: &[bool], w: usize, h: usize, d: usize) -> Vec<bool> {
    let mut tmp = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(d);
            let hi = (x + d).min(w - 1);
            tmp[y * w + x] = b[y * w + lo..=y * w + hi].iter().any(|&v| v);
        }
    }
    let mut out = vec![false; w * h];
    for x in 0..w {
        for y in 0..h {
            let lo = y.saturating_sub(d);
            let hi = (y + d).min(h - 1);
            out[y * w + x] = (lo..=hi).any(|yy| tmp[yy * w + x]);
        }
    }
    out
}

/// Fraction of ground-truth boundary pixels with a predicted boundary pixel
/// within Chebyshev distance `d`. No ground-truth boundary scores 1.
pub fn boundary_recall(pred: &SegmentationMask, gt: &SegmentationMask, d: usize) -> Result<f64> {
    same_dims(pred, gt)?;
    let (w, h) = gt.dims();
    let gb = boundary_map(gt);
    let n_gt = gb.iter().filter(|&&b| b).count();
    if n_gt == 0 {
        warn!("ground truth has no boundary; boundary recall defined as 1");
        return Ok(1.0);
    }
    let near = dilate(&boundary_map(pred), w, h, d);
    let hit = gb.iter().zip(&near).filter(|(&g, &n)| g && n).count();
    Ok(hit as f64 / n_gt as f64)
}

/// Mean and population standard deviation; `(0, 0)` for no values.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, l: &[u32]) -> SegmentationMask {
        SegmentationMask::new(w, h, l.to_vec()).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = [true, true, false, false];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(dice(&a, &[true]).is_err());
    }

    #[test]
    fn shifted_square_dice_is_half() {
        // 2x2 square vs the same square one column to the right
        let a = mask(4, 2, &[1, 1, 0, 0, 1, 1, 0, 0]);
        let b = mask(4, 2, &[0, 1, 1, 0, 0, 1, 1, 0]);
        assert_eq!(dice(&a.binary(1), &b.binary(1)).unwrap(), 0.5);
    }

    #[test]
    fn hungarian_on_permuted_labels() {
        let gt = mask(3, 2, &[0, 0, 1, 1, 2, 2]);
        let pseudo = gt.map_labels(|l| [7, 3, 5][l as usize]);
        let r = hungarian_match(&pseudo, &gt).unwrap();
        assert_eq!(r.mapping, BTreeMap::from([(7, 0), (3, 1), (5, 2)]));
        assert!((r.objective - 3.0).abs() < 1e-12);
    }

    #[test]
    fn more_pseudo_than_gt() {
        let gt = mask(4, 1, &[0, 0, 1, 1]);
        let pseudo = mask(4, 1, &[0, 1, 2, 3]);
        let r = hungarian_match(&pseudo, &gt).unwrap();
        assert_eq!(r.mapping.len(), 2);
        assert_eq!(r.unmatched_pseudo.len(), 2);
    }

    #[test]
    fn unmatched_class_scores_zero() {
        let gt = mask(4, 1, &[0, 0, 1, 1]);
        let pseudo = mask(4, 1, &[5; 4]);
        let r = hungarian_match(&pseudo, &gt).unwrap();
        assert_eq!(r.class_dice.len(), 2);
        assert_eq!(r.class_dice.values().filter(|&&d| d == 0.0).count(), 1);
        let m = majority_match(&pseudo, &gt).unwrap();
        assert_eq!(m.class_dice[&1], 0.0);
    }

    #[test]
    fn majority_sixty_forty() {
        let gt = mask(10, 1, &[0, 0, 0, 0, 0, 0, 1, 1, 1, 1]);
        let pseudo = mask(10, 1, &[4; 10]);
        assert_eq!(majority_match(&pseudo, &gt).unwrap().mapping[&4], 0);
    }

    #[test]
    fn majority_tie_goes_low() {
        let gt = mask(4, 1, &[2, 2, 5, 5]);
        let pseudo = mask(4, 1, &[1; 4]);
        assert_eq!(majority_match(&pseudo, &gt).unwrap().mapping[&1], 2);
    }

    #[test]
    fn ue_examples() {
        let gt = mask(4, 1, &[0, 0, 1, 1]);
        assert_eq!(undersegmentation_error(&mask(4, 1, &[0, 1, 2, 2]), &gt).unwrap(), 0.0);
        assert_eq!(undersegmentation_error(&mask(4, 1, &[0; 4]), &gt).unwrap(), 0.5);
    }

    #[test]
    fn br_examples() {
        let gt = mask(4, 1, &[0, 0, 1, 1]);
        assert_eq!(boundary_recall(&gt, &gt, 0).unwrap(), 1.0);
        assert_eq!(boundary_recall(&mask(4, 1, &[3; 4]), &gt, 3).unwrap(), 0.0);
        assert_eq!(boundary_recall(&gt, &mask(4, 1, &[1; 4]), 3).unwrap(), 1.0);
    }

    #[test]
    fn lc_three_of_four() {
        let gt = mask(2, 1, &[0, 1]);
        let same = mask(2, 1, &[4, 9]);
        let other = mask(2, 1, &[4, 2]);
        let ms: Vec<MatchResult> = [&same, &same, &other, &same]
            .iter()
            .map(|p| hungarian_match(p, &gt).unwrap())
            .collect();
        let lc = label_consistency(&ms, Some(0)).unwrap();
        assert_eq!(lc.per_class[&1], 75.0);
        assert_eq!(lc.per_class[&0], 100.0);
        assert_eq!(lc.overall, 75.0);
        let one = label_consistency(&ms[2..3], None).unwrap();
        assert_eq!(one.overall, 100.0);
    }
}

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use proptest::prelude::*;

use specseg::affinity::{combine, patchwise_distance, AffinityMatrix, Coefficients, PatchGrid, PatchMetric};
use specseg::config::{CrfParams, Solver};
use specseg::metrics::{boundary_recall, dice, hungarian_match, majority_match, undersegmentation_error, Overlap};
use specseg::postprocess::{crf_marginals, crf_refine};
use specseg::preprocess::gaussian_blur;
use specseg::spectral::{eigendecompose, normalized_laplacian};
use specseg::tensor::Tensor;
use specseg::{GrayImage, SegmentationMask};

fn mask_strategy(max_labels: u32) -> impl Strategy<Value = (SegmentationMask, SegmentationMask)> {
    (2usize..12, 2usize..12).prop_flat_map(move |(w, h)| {
        (
            proptest::collection::vec(0..max_labels, w * h),
            proptest::collection::vec(0..max_labels, w * h),
        )
            .prop_map(move |(a, b)| {
                (
                    SegmentationMask::new(w, h, a).unwrap(),
                    SegmentationMask::new(w, h, b).unwrap(),
                )
            })
    })
}

fn image_strategy() -> impl Strategy<Value = GrayImage> {
    (1usize..20, 1usize..20).prop_flat_map(|(w, h)| {
        proptest::collection::vec(0.0f32..1.0, w * h).prop_map(move |d| GrayImage::new(w, h, d).unwrap())
    })
}

fn affinity_strategy() -> impl Strategy<Value = DMatrix<f64>> {
    (2usize..24).prop_flat_map(|n| {
        proptest::collection::vec(0.0f64..1.0, n * n).prop_map(move |v| {
            let m = DMatrix::from_row_slice(n, n, &v);
            // strictly positive degrees
            (&m + m.transpose()) * 0.5 + DMatrix::identity(n, n) * 0.01
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_round_trip(dims in proptest::collection::vec(1usize..6, 1..4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect();
        let t = Tensor::new(dims, data).unwrap();
        let bytes = t.encode().unwrap();
        prop_assert_eq!(Tensor::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn blur_is_a_convex_combination(img in image_strategy(), sigma in 0.0f64..4.0) {
        let b = gaussian_blur(&img, sigma);
        prop_assert_eq!(b.dims(), img.dims());
        let (lo, hi) = img.data().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for &v in b.data() {
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
        }
        let c = GrayImage::constant(img.width(), img.height(), 0.3);
        prop_assert!((gaussian_blur(&c, sigma).mean() - 0.3).abs() < 1e-6);
    }

    #[test]
    fn dice_is_symmetric(a in proptest::collection::vec(any::<bool>(), 1..200), seed in any::<u64>()) {
        let b: Vec<bool> = a.iter().enumerate().map(|(i, &v)| v ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn boundary_recall_monotone_in_d((pred, gt) in mask_strategy(3)) {
        let mut prev = 0.0;
        for d in 0..6 {
            let br = boundary_recall(&pred, &gt, d).unwrap();
            prop_assert!(br >= prev && br <= 1.0);
            prev = br;
        }
    }

    #[test]
    fn undersegmentation_error_range((sp, gt) in mask_strategy(4)) {
        let ue = undersegmentation_error(&sp, &gt).unwrap();
        prop_assert!((0.0..1.0).contains(&ue));
        let nested = sp.distinct().iter().all(|&s| {
            let mut classes = sp.labels().iter().zip(gt.labels()).filter(|(&p, _)| p == s).map(|(_, &g)| g);
            let first = classes.next();
            classes.all(|g| Some(g) == first)
        });
        prop_assert_eq!(ue == 0.0, nested);
    }

    #[test]
    fn laplacian_is_psd(m in affinity_strategy()) {
        let w = AffinityMatrix::new(m).unwrap();
        let l = normalized_laplacian(&w).unwrap();
        let dec = eigendecompose(&l, l.nrows(), Solver::Dense).unwrap();
        prop_assert!(dec.eigenvalues[0] > -1e-10);
        prop_assert!(dec.eigenvalues[0].abs() < 1e-8);
        prop_assert!(dec.eigenvalues.windows(2).all(|p| p[0] <= p[1] + 1e-12));
    }

    #[test]
    fn hungarian_dominates_injective_majority((pseudo, gt) in mask_strategy(5)) {
        let h = hungarian_match(&pseudo, &gt).unwrap();
        let m = majority_match(&pseudo, &gt).unwrap();
        let ov = Overlap::new(&pseudo, &gt).unwrap();
        let pi: BTreeMap<u32, usize> = ov.pseudo.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let gi: BTreeMap<u32, usize> = ov.gt.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        // best single pseudo label per class among those majority sends there
        let mut best: BTreeMap<u32, f64> = BTreeMap::new();
        for (&p, &g) in &m.mapping {
            let d = ov.dice(pi[&p], gi[&g]);
            let e = best.entry(g).or_insert(0.0);
            *e = e.max(d);
        }
        let restricted: f64 = best.values().sum();
        prop_assert!(h.objective >= restricted - 1e-12);
        prop_assert_eq!(h.mapping.len(), ov.pseudo.len().min(ov.gt.len()));
    }

    #[test]
    fn crf_keeps_label_set(img in image_strategy(), seed in any::<u64>(), n in 1u32..4) {
        let (w, h) = img.dims();
        let labels: Vec<u32> = (0..w * h).map(|i| ((seed >> (i % 61)) as u32 + i as u32 / 7) % n).collect();
        let mask = SegmentationMask::new(w, h, labels).unwrap();
        let p = CrfParams { n_iters: 2, bilateral_sigma_xy: 4.0, ..CrfParams::default() };
        let out = crf_refine(&mask, &img, &p).unwrap();
        let input = mask.distinct();
        prop_assert!(out.distinct().iter().all(|l| input.contains(l)));
    }

    #[test]
    fn crf_marginals_sum_to_one(img in image_strategy(), seed in any::<u64>(), n in 2u32..5, iters in 0usize..4) {
        let (w, h) = img.dims();
        let labels: Vec<u32> = (0..w * h).map(|i| ((seed >> (i % 61)) as u32 + i as u32 / 5) % n).collect();
        let mask = SegmentationMask::new(w, h, labels).unwrap();
        let p = CrfParams { n_iters: iters, bilateral_sigma_xy: 4.0, ..CrfParams::default() };
        let m = crf_marginals(&mask, &img, &p).unwrap();
        let k = m.labels.len();
        prop_assert_eq!(m.q.len(), w * h * k);
        for row in m.q.chunks_exact(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn combine_is_linear_then_clamped(m in affinity_strategy(), c in 0.0f64..3.0) {
        let a = AffinityMatrix::new(m.clone()).unwrap();
        let coef = Coefficients { ssd: c, mi: 0.0, pos: 0.0 };
        let out = combine(None, Some(&a), None, None, coef);
        if c == 0.0 {
            prop_assert!(out.is_err());
        } else {
            let out = out.unwrap();
            prop_assert!((out.matrix() - m * c).abs().max() < 1e-12);
        }
    }

    #[test]
    fn ssd_distance_symmetric_zero_diagonal(seed in any::<u64>()) {
        let img = GrayImage::from_fn(16, 24, |x, y| (((x * 31 + y * 17) as u64 ^ seed) % 97) as f32 / 97.0);
        let g = PatchGrid::from_image(&img, 8).unwrap();
        let d = patchwise_distance(&g, PatchMetric::Ssd, 32).unwrap();
        for i in 0..g.len() {
            prop_assert_eq!(d[(i, i)], 0.0);
            for j in 0..g.len() {
                prop_assert_eq!(d[(i, j)], d[(j, i)]);
            }
        }
    }
}

mod common;

use adaptive_depth::baselines::{fixed_mask_forward, random_mask, scanline_mask, FixedMaskParams};
use adaptive_depth::data::dataset::{crop_frame, crop_origin};
use adaptive_depth::data::{kitti_decode_depth, kitti_encode_depth, synth_generate};
use adaptive_depth::depth::{apply_mask, denormalize_depth, depth_histogram, mae, normalize_depth, rmse};
use adaptive_depth::mask::{
    harden_topk, logistic, mask_cardinality, sample_loss, sample_loss_grad, soft_argmax, sparse_budget_select,
};
use adaptive_depth::pipeline::{total_loss, LossWeights};
use adaptive_depth::priors::{make_prior, PriorMode, PriorStack, ReconstructionStore};
use adaptive_depth::{DepthMap, ProbabilityMap, SampleMask, SamplingBudget, SequenceFrame, Temperature};
use proptest::prelude::*;

fn depth_map(h: usize, w: usize) -> impl Strategy<Value = DepthMap> {
    prop::collection::vec((0.5f32..90.0, any::<bool>()), h * w).prop_map(move |px| {
        let values = px.iter().map(|p| if p.1 { p.0 } else { 0.0 }).collect();
        let valid = px.iter().map(|p| p.1).collect();
        DepthMap::from_parts(h, w, values, valid).unwrap()
    })
}

fn dense_map(h: usize, w: usize) -> impl Strategy<Value = DepthMap> {
    prop::collection::vec(0.5f32..90.0, h * w).prop_map(move |v| DepthMap::dense(h, w, v).unwrap())
}

fn soft_mask(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..1.0, n)
}

proptest! {
    #[test]
    fn rmse_dominates_mae((gt, pred) in (depth_map(4, 5), dense_map(4, 5))) {
        prop_assume!(gt.valid_count() > 0);
        let r = rmse(&pred, &gt).unwrap();
        let a = mae(&pred, &gt).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!(r >= a - 1e-12);
    }

    #[test]
    fn metrics_ignore_invalid_gt_pixels(
        (gt, pred, noise) in (depth_map(4, 4), dense_map(4, 4), prop::collection::vec(-5.0f32..5.0, 16))
    ) {
        prop_assume!(gt.valid_count() > 0);
        let moved: Vec<f32> = pred
            .values()
            .iter()
            .zip(gt.valid())
            .zip(&noise)
            .map(|((&p, &ok), &n)| if ok { p } else { (p + n).max(0.0) })
            .collect();
        let moved = DepthMap::dense(4, 4, moved).unwrap();
        prop_assert_eq!(rmse(&pred, &gt).unwrap(), rmse(&moved, &gt).unwrap());
        prop_assert_eq!(mae(&pred, &gt).unwrap(), mae(&moved, &gt).unwrap());
    }

    #[test]
    fn apply_mask_idempotent_for_hard_masks((d, idx) in (depth_map(4, 6), prop::collection::btree_set(0usize..24, 0..24))) {
        let idx: Vec<usize> = idx.into_iter().collect();
        let m = SampleMask::from_indices(4, 6, idx.iter().copied(), idx.len()).unwrap();
        let once = apply_mask(&d, &m).unwrap();
        prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
    }

    #[test]
    fn histogram_sums_to_one(samples in prop::collection::vec(-10.0f64..150.0, 1..200)) {
        let edges: Vec<f64> = (0..=20).map(|i| i as f64 * 5.0).collect();
        let f = depth_histogram(&samples, &edges).unwrap();
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_then_denormalize_is_identity(d in dense_map(3, 7)) {
        let n = normalize_depth(&d, 100.0).unwrap();
        let back = denormalize_depth(&n, 3, 7, 100.0).unwrap();
        for (a, b) in d.values().iter().zip(back.values()) {
            prop_assert!(((a - b) / a).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn soft_argmax_is_logistic_and_monotone(
        skip in prop::collection::vec(-8.0f32..8.0, 12),
        sample in prop::collection::vec(-8.0f32..8.0, 12),
        beta in 0.1f64..5.0,
    ) {
        let p = ProbabilityMap::from_channels(3, 4, &skip, &sample).unwrap();
        let m = soft_argmax(&p, Temperature::new(beta).unwrap()).unwrap();
        let mut pairs = Vec::new();
        for i in 0..12 {
            let d = sample[i] as f64 - skip[i] as f64;
            let oracle = (beta * d).exp() / (1.0 + (beta * d).exp());
            prop_assert!((m.values()[i] as f64 - oracle).abs() < 1e-6);
            pairs.push((d, m.values()[i]));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            if w[1].0 - w[0].0 > 1e-3 {
                prop_assert!(w[1].1 >= w[0].1);
            }
        }
    }

    #[test]
    fn sample_loss_is_zero_only_at_budget(values in soft_mask(16), k in 1usize..16) {
        let m = SampleMask::soft(4, 4, values, k).unwrap();
        let b = SamplingBudget::new(k).unwrap();
        let l = sample_loss(&m, b);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, mask_cardinality(&m) == k as f64);
    }

    #[test]
    fn sample_loss_gradient_matches_differences(values in prop::collection::vec(0.05f32..0.95, 16), k in 1usize..16, i in 0usize..16) {
        let m = SampleMask::soft(4, 4, values.clone(), k).unwrap();
        let b = SamplingBudget::new(k).unwrap();
        prop_assume!((mask_cardinality(&m) - k as f64).abs() > 0.05);
        let h = 1e-2f32;
        let at = |delta: f32| {
            let mut v = values.clone();
            v[i] += delta;
            sample_loss(&SampleMask::soft(4, 4, v, k).unwrap(), b)
        };
        let fd = (at(h) - at(-h)) / (2.0 * h as f64);
        let g = sample_loss_grad(&m, b)[i];
        prop_assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-12), "{fd} vs {g}");
    }

    #[test]
    fn harden_topk_exact_and_idempotent(values in soft_mask(20), k in 0usize..30) {
        let m = SampleMask::soft(4, 5, values, k.max(1)).unwrap();
        let hard = harden_topk(&m, k);
        prop_assert_eq!(hard.count_ones(), k.min(20));
        prop_assert_eq!(harden_topk(&hard, k), hard);
    }

    #[test]
    fn sparse_select_only_valid((d, values) in (depth_map(4, 5), soft_mask(20)), k in 0usize..25) {
        let m = SampleMask::soft(4, 5, values, k.max(1)).unwrap();
        let sel = sparse_budget_select(&d, &m, k).unwrap();
        prop_assert_eq!(sel.count_ones(), k.min(d.valid_count()));
        for i in sel.selected() {
            prop_assert!(d.valid()[i]);
        }
    }

    #[test]
    fn agnostic_masks_meet_budget(h in 1usize..9, w in 1usize..9, k in 1usize..80, seed in any::<u64>()) {
        prop_assume!(k <= h * w);
        let b = SamplingBudget::new(k).unwrap();
        let r = random_mask(h, w, b, seed).unwrap();
        prop_assert_eq!(r.count_ones(), k);
        prop_assert_eq!(random_mask(h, w, b, seed).unwrap(), r);
        prop_assert_eq!(scanline_mask(h, w, b).unwrap().count_ones(), k);
    }

    #[test]
    fn total_loss_decomposes(t in 0.0f64..10.0, s in 0.0f64..10.0, a in 0.0f64..100.0) {
        let w = LossWeights { alpha: a };
        let diff = total_loss(t, s, w) - total_loss(t, 0.0, w);
        prop_assert!((diff - a * s).abs() <= 4.0 * f64::EPSILON * (t + a * s));
    }

    // exact when every term is representable without rounding
    #[test]
    fn total_loss_decomposes_exactly_on_dyadic_values(t in 0u32..1024, s in 0u32..1024, a in 0u32..1024) {
        let (t, s, a) = (t as f64 / 64.0, s as f64 / 64.0, a as f64 / 8.0);
        let w = LossWeights { alpha: a };
        prop_assert_eq!(total_loss(t, s, w) - total_loss(t, 0.0, w), a * s);
    }

    #[test]
    fn prior_stack_evicts_oldest_first(pushes in 1usize..12, cap in 1usize..5) {
        let mut stack = PriorStack::new(cap).unwrap();
        for i in 0..pushes {
            stack = stack.push(DepthMap::dense(1, 1, vec![i as f32 + 1.0]).unwrap()).unwrap();
            prop_assert!(stack.len() <= cap);
        }
        let kept: Vec<f32> = stack.maps().map(|m| m.values()[0]).collect();
        let expect: Vec<f32> = (0..pushes).rev().take(cap).map(|i| i as f32 + 1.0).collect();
        prop_assert_eq!(kept, expect);
    }

    #[test]
    fn lower_bound_prior_is_gt_and_stack_untouched(gt in depth_map(3, 3)) {
        let stack = PriorStack::new(2).unwrap().push(DepthMap::dense(3, 3, vec![1.0; 9]).unwrap()).unwrap();
        let before = stack.clone();
        let p = make_prior(PriorMode::LowerBound, &stack, None, Some(&gt), 100.0).unwrap();
        prop_assert_eq!(&p.maps[0], &gt);
        prop_assert_eq!(stack, before);
    }

    #[test]
    fn codec_round_trip(d in depth_map(5, 6)) {
        let bytes = kitti_encode_depth(&d).unwrap();
        let back = kitti_decode_depth(&bytes).unwrap();
        prop_assert_eq!(back.valid(), d.valid());
        for (a, b) in d.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() <= 1.0 / 512.0 + 1e-6);
        }
        prop_assert_eq!(kitti_encode_depth(&back).unwrap(), bytes);
    }

    #[test]
    fn crop_commutes_with_mask((d, idx) in (depth_map(6, 8), prop::collection::btree_set(0usize..48, 0..48))) {
        let idx: Vec<usize> = idx.into_iter().collect();
        let m = SampleMask::from_indices(6, 8, idx.iter().copied(), idx.len().max(1)).unwrap();
        let frame = SequenceFrame::new(adaptive_depth::RgbImage::filled(6, 8, 0.5).unwrap(), d.clone(), 0).unwrap();
        let (r0, c0) = crop_origin(6, 8, 4, 4).unwrap();
        let window: Vec<f32> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r + r0) * 8 + c + c0))
            .map(|i| m.values()[i])
            .collect();
        let ones = window.iter().filter(|&&v| v > 0.0).count();
        let m_crop = SampleMask::hardened(4, 4, window, ones.max(1)).unwrap();
        let left = apply_mask(&crop_frame(&frame, 4, 4).unwrap().depth, &m_crop).unwrap();
        let right = apply_mask(&d, &m).unwrap().window(r0, c0, 4, 4).unwrap();
        prop_assert_eq!(left, right);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fixed_mask_ignores_the_frame(seed in any::<u64>()) {
        let params = FixedMaskParams::kaiming(4, 4, seed).unwrap();
        let t = Temperature::default();
        prop_assert_eq!(fixed_mask_forward(&params, t).unwrap(), fixed_mask_forward(&params.clone(), t).unwrap());
    }

    #[test]
    fn synthetic_depth_in_range_and_dense(seed in any::<u64>()) {
        let seq = synth_generate(&common::scene(seed), 3).unwrap();
        for f in seq.frames() {
            prop_assert!(f.depth.is_fully_valid());
            prop_assert!(f.depth.values().iter().all(|&v| v > 0.0 && v <= 100.0));
        }
    }

    #[test]
    fn ground_approaches_with_static_objects(seed in any::<u64>(), speed in 0.2f64..2.0) {
        let cfg = adaptive_depth::data::SyntheticSceneConfig {
            num_boxes: 0,
            object_speed_range: [0.0, 0.0],
            ego_speed: speed,
            ..common::scene(seed)
        };
        let seq = synth_generate(&cfg, 5).unwrap();
        for r in cfg.horizon_row + 1..cfg.height {
            for c in 0..cfg.width {
                let ds: Vec<f32> = seq.frames().iter().map(|f| f.depth.get(r, c)).collect();
                prop_assert!(ds.windows(2).all(|w| w[1] <= w[0]), "row {r} col {c}: {ds:?}");
            }
        }
    }

    #[test]
    fn store_round_trip_is_exact(d in dense_map(4, 4)) {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ReconstructionStore::new();
        s.insert("seq", 0, &d).unwrap();
        s.save(dir.path()).unwrap();
        prop_assert_eq!(ReconstructionStore::load(dir.path()).unwrap(), s);
    }
}

#[test]
fn logistic_is_stable_at_extremes() {
    assert_eq!(logistic(1000.0), 1.0);
    assert_eq!(logistic(-1000.0), 0.0);
}

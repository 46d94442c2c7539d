//! Property tests over randomly generated inputs.

mod common;

use std::path::Path;

use adkd::backbone::{build_backbone, BackboneConfig, FeaturePyramid};
use adkd::config::TrainConfig;
use adkd::data::{decode_pnm, encode_pnm, Raster};
use adkd::inference::anomaly_map;
use adkd::losses::{cd_channel, cd_spatial, kld_channel, kld_spatial, mse_stfpm};
use adkd::metrics::{auroc, pro, Mask};
use adkd::params::ParamStore;
use adkd::weights;
use adkd::Tensor;
use proptest::prelude::*;

fn level_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..=4, 1usize..=6, 1usize..=6).prop_flat_map(|(c, h, w)| {
        let n = c * h * w;
        (
            Just(c),
            Just(h),
            Just(w),
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
        )
    })
}

fn single(c: usize, h: usize, w: usize, v: Vec<f64>) -> FeaturePyramid<f64> {
    FeaturePyramid::from_tensors(vec![Tensor::new(&[c, h, w], v).unwrap()])
}

fn labeled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=32).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..8, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(any::<bool>(), n).prop_map(|mut l| {
                l[0] = true;
                l[1] = false;
                l
            }),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_vanish_at_equality((c, h, w, t, _) in level_strategy()) {
        let p = single(c, h, w, t);
        prop_assert_eq!(cd_channel(&p, &p).unwrap().abs() < 1e-15, true);
        prop_assert_eq!(cd_spatial(&p, &p).unwrap().abs() < 1e-15, true);
        prop_assert_eq!(kld_channel(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(kld_spatial(&p, &p).unwrap(), 0.0);
        prop_assert_eq!(mse_stfpm(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn losses_match_oracles((c, h, w, t, s) in level_strategy()) {
        let tl = common::map_level(&vec![vec![vec![0.0; w]; h]; c], |ci, y, x, _| t[(ci * h + y) * w + x]);
        let sl = common::map_level(&tl, |ci, y, x, _| s[(ci * h + y) * w + x]);
        let (tp, sp) = (single(c, h, w, t.clone()), single(c, h, w, s.clone()));
        prop_assert!((cd_channel(&tp, &sp).unwrap() - common::oracle_cd_channel(&[tl.clone()], &[sl.clone()])).abs() < 1e-12);
        prop_assert!((kld_channel(&tp, &sp).unwrap() - common::oracle_kld_channel(&[tl.clone()], &[sl.clone()])).abs() < 1e-12);
        prop_assert!((mse_stfpm(&tp, &sp).unwrap() - common::oracle_mse(&[tl], &[sl])).abs() < 1e-12);
    }

    #[test]
    fn cd_ignores_positive_scaling((c, h, w, t, _) in level_strategy(), alpha in 0.01f64..100.0) {
        let s: Vec<f64> = t.iter().map(|v| v * alpha).collect();
        let (tp, sp) = (single(c, h, w, t), single(c, h, w, s));
        prop_assert!(cd_channel(&tp, &sp).unwrap().abs() < 1e-12);
        prop_assert!(cd_spatial(&tp, &sp).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kld_is_nonnegative((c, h, w, t, s) in level_strategy()) {
        let (tp, sp) = (single(c, h, w, t), single(c, h, w, s));
        prop_assert!(kld_channel(&tp, &sp).unwrap() >= 0.0);
        prop_assert!(kld_spatial(&tp, &sp).unwrap() >= 0.0);
    }

    #[test]
    fn auroc_is_rank_invariant((scores, labels) in labeled_scores()) {
        let a = auroc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() - 3.0).collect();
        prop_assert_eq!(a, auroc(&transformed, &labels).unwrap());
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((a + auroc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn pro_is_rank_invariant(
        bits in prop::collection::vec(any::<bool>(), 36),
        scores in prop::collection::vec(0u8..10, 36),
    ) {
        prop_assume!(bits.iter().any(|&b| b));
        let mask = Mask::new(6, 6, bits).unwrap();
        let map: Vec<f64> = scores.iter().map(|&s| f64::from(s)).collect();
        let moved: Vec<f64> = map.iter().map(|s| s.powi(3) + 1.0).collect();
        let a = pro(&[&map], std::slice::from_ref(&mask), 0.3).unwrap();
        prop_assert_eq!(a, pro(&[&moved], std::slice::from_ref(&mask), 0.3).unwrap());
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        let oracle = common::oracle_pro(&[map], std::slice::from_ref(&mask), 0.3);
        prop_assert!((a - oracle).abs() < 1e-9);
    }

    #[test]
    fn omega_monotone_in_level_distance((c, h, w, t, s) in level_strategy(), px in 0usize..36) {
        let tp = single(c, h, w, t.clone());
        let base = anomaly_map(&tp, &single(c, h, w, s.clone()), 12, 12).unwrap();
        prop_assert!(base.scores.data().iter().all(|&v| v >= 0.0 && v <= 2.0));
        // pushing one pixel's student vector to the negated teacher vector maximizes its distance
        let p = px % (h * w);
        let mut s2 = s;
        for ci in 0..c {
            s2[ci * h * w + p] = -t[ci * h * w + p];
        }
        let pushed = anomaly_map(&tp, &single(c, h, w, s2), 12, 12).unwrap();
        prop_assert!(pushed.scores.data().iter().zip(base.scores.data()).all(|(a, b)| *a >= b - 1e-12));
    }

    #[test]
    fn pnm_round_trip(w in 1usize..9, h in 1usize..9, gray in any::<bool>(), seed in any::<u64>()) {
        let channels = if gray { 1 } else { 3 };
        let mut rng = adkd::rng::Rng::new(seed);
        let r = Raster { width: w, height: h, channels, pixels: (0..w * h * channels).map(|_| rng.below(256) as u8).collect() };
        prop_assert_eq!(decode_pnm(&encode_pnm(&r), Path::new("mem")).unwrap(), r);
    }

    #[test]
    fn weights_round_trip(values in prop::collection::vec(-1e6f32..1e6, 1..40), echo in "[a-z =\n]{0,40}") {
        let mut store = ParamStore::new();
        store.insert("a.weight", Tensor::new(&[values.len()], values.clone()).unwrap());
        store.insert("b", Tensor::scalar(values[0]));
        let bytes = weights::encode(&store, Some(&echo)).unwrap();
        let (back, e) = weights::decode::<f32>(&bytes).unwrap();
        prop_assert_eq!(back, store);
        prop_assert_eq!(e.as_deref(), Some(echo.as_str()));
    }

    #[test]
    fn config_render_round_trip(epochs in 1usize..500, batch in 1usize..64, lr in 0.0f64..1.0, seed in any::<u64>()) {
        let mut c = TrainConfig::desk();
        c.epochs = epochs;
        c.batch_size = batch;
        c.lr = lr;
        c.seed = seed;
        let back = TrainConfig::default().apply_text(&c.render(), Path::new("cfg")).unwrap();
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pyramid_shape_law(
        widths in prop::array::uniform3(1usize..6),
        blocks in 1usize..3,
        size in 1usize..5,
        seed in any::<u64>(),
    ) {
        let cfg = BackboneConfig {
            stem_channels: widths[0],
            stage_channels: widths,
            blocks_per_stage: blocks,
            use_batchnorm: false,
            input_size: (16 * size, 16 * size),
        };
        let net = build_backbone::<f32>(&cfg, seed, true).unwrap();
        let img = Tensor::full(&[3, 16 * size, 16 * size], 0.5f32);
        let p = net.forward_pyramid(&img).unwrap();
        let shapes: Vec<Vec<usize>> = p.tensors().map(|t| t.shape().to_vec()).collect();
        prop_assert_eq!(shapes, vec![
            vec![widths[0], 4 * size, 4 * size],
            vec![widths[1], 2 * size, 2 * size],
            vec![widths[2], size, size],
        ]);
    }
}

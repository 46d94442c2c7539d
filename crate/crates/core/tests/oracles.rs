//! Library results against independent scalar oracles.

mod common;

use adkd::backbone::FeaturePyramid;
use adkd::data::preprocess;
use adkd::dcam::{channel_attention, channel_names, refine, spatial_attention, spatial_names, AttentionMode};
use adkd::inference::{anomaly_map, image_score, level_loss_map, AnomalyMap};
use adkd::losses::{cd_channel, kld_spatial, total_loss, LossSpec};
use adkd::metrics::{auroc, connected_components, pro, weighted_mean_latency, Mask};
use adkd::ops;
use adkd::params::ParamStore;
use adkd::rng::Rng;
use adkd::Tensor;
use common::*;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

fn at(t: &Tensor<f64>, idx: &[usize]) -> f64 {
    let mut flat = 0;
    for (i, &d) in idx.iter().zip(t.shape()) {
        flat = flat * d + i;
    }
    t.data()[flat]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = Rng::new(11);
    for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = random(&mut rng, &[2, 4, 4]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let b = random(&mut rng, &[3]);
        let y = ops::conv2d(&x, &w, Some(&b), stride, padding).unwrap();
        let oh = (4 + 2 * padding - 3) / stride + 1;
        assert_eq!(y.shape(), &[3, oh, oh]);
        for co in 0..3 {
            for oy in 0..oh {
                for ox in 0..oh {
                    let mut acc = at(&b, &[co]);
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as i64 - padding as i64;
                                let ix = (ox * stride + kx) as i64 - padding as i64;
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    acc += at(&w, &[co, ci, ky, kx]) * at(&x, &[ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    assert!((at(&y, &[co, oy, ox]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn batched_conv_equals_per_item_conv() {
    let mut rng = Rng::new(12);
    let x = random(&mut rng, &[3, 4, 9, 7]);
    let w = random(&mut rng, &[5, 4, 3, 3]);
    let y = ops::conv2d(&x, &w, None, 2, 1).unwrap();
    for n in 0..3 {
        let single = ops::conv2d(&x.index_outer(n), &w, None, 2, 1).unwrap();
        assert!(y.index_outer(n).max_abs_diff(&single) < 1e-12);
    }
}

#[test]
fn pools_match_loops() {
    let mut rng = Rng::new(13);
    let t = random(&mut rng, &[3, 5, 4]);
    let (gmax, _) = ops::global_maxpool(&t);
    let gavg = ops::global_avgpool(&t);
    let (cmax, _) = ops::channel_maxpool(&t);
    let cavg = ops::channel_avgpool(&t);
    for c in 0..3 {
        let vals: Vec<f64> = (0..20).map(|p| at(&t, &[c, p / 4, p % 4])).collect();
        assert_eq!(gmax.data()[c], vals.iter().cloned().fold(f64::MIN, f64::max));
        assert!((gavg.data()[c] - vals.iter().sum::<f64>() / 20.0).abs() < 1e-12);
    }
    for y in 0..5 {
        for x in 0..4 {
            let vals: Vec<f64> = (0..3).map(|c| at(&t, &[c, y, x])).collect();
            assert_eq!(at(&cmax, &[0, y, x]), vals.iter().cloned().fold(f64::MIN, f64::max));
            assert!((at(&cavg, &[0, y, x]) - vals.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        }
    }
}

#[test]
fn upsample_matches_coordinate_formula() {
    let t = Tensor::<f64>::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let up = ops::bilinear_upsample(&t, 4, 4).unwrap();
    let want = oracle_bilinear(&[vec![0.0, 1.0], vec![2.0, 3.0]], 4, 4);
    for (a, b) in up.data().iter().zip(want.iter().flatten()) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(up.data()[0], 0.0);
    assert_eq!(up.data()[1], 0.25);
    let mut rng = Rng::new(14);
    let grid: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
    let t = Tensor::new(&[1, 3, 5], grid.iter().flatten().copied().collect()).unwrap();
    let up = ops::bilinear_upsample(&t, 7, 11).unwrap();
    let want = oracle_bilinear(&grid, 7, 11);
    for (a, b) in up.data().iter().zip(want.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn preprocess_resize_uses_the_upsample_kernel() {
    let mut rng = Rng::new(15);
    let img = Tensor::from_fn(&[3, 8, 8], |_| rng.next_f64() as f32);
    let out = preprocess(&img, (16, 16), [0.0; 3], [1.0; 3]).unwrap();
    let up = ops::bilinear_upsample(&img, 16, 16).unwrap();
    assert_eq!(out.data(), up.data());
}

fn attention_params(rng: &mut Rng, k: usize, c: usize, hidden: usize) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    let (w0, w1) = channel_names(k);
    p.insert(w0, random(rng, &[hidden, c]));
    p.insert(w1, random(rng, &[c, hidden]));
    let (sw, sb) = spatial_names(k);
    p.insert(sw, random(rng, &[1, 2, 7, 7]));
    p.insert(sb, random(rng, &[1]));
    p
}

fn oracle_channel_gate(f: &Tensor<f64>, p: &ParamStore<f64>, k: usize) -> Vec<f64> {
    let (n0, n1) = channel_names(k);
    let (w0, w1) = (p.get(&n0).unwrap(), p.get(&n1).unwrap());
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let hidden = w0.shape()[0];
    let mlp = |v: &[f64]| -> Vec<f64> {
        let z: Vec<f64> = (0..hidden)
            .map(|j| (0..c).map(|i| at(w0, &[j, i]) * v[i]).sum::<f64>().max(0.0))
            .collect();
        (0..c).map(|i| (0..hidden).map(|j| at(w1, &[i, j]) * z[j]).sum()).collect()
    };
    let avg: Vec<f64> = (0..c)
        .map(|ch| (0..h * w).map(|q| at(f, &[ch, q / w, q % w])).sum::<f64>() / (h * w) as f64)
        .collect();
    let max: Vec<f64> = (0..c)
        .map(|ch| (0..h * w).map(|q| at(f, &[ch, q / w, q % w])).fold(f64::MIN, f64::max))
        .collect();
    mlp(&avg).iter().zip(mlp(&max)).map(|(a, b)| sigmoid(a + b)).collect()
}

fn oracle_spatial_gate(f: &Tensor<f64>, p: &ParamStore<f64>, k: usize) -> Vec<f64> {
    let (nw, nb) = spatial_names(k);
    let (kw, kb) = (p.get(&nw).unwrap(), p.get(&nb).unwrap());
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let pooled = |y: usize, x: usize, which: usize| {
        let vals = (0..c).map(|ch| at(f, &[ch, y, x]));
        if which == 0 {
            vals.sum::<f64>() / c as f64
        } else {
            vals.fold(f64::MIN, f64::max)
        }
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut acc = kb.data()[0];
            for m in 0..2 {
                for ky in 0..7 {
                    for kx in 0..7 {
                        let (iy, ix) = (y as i64 + ky as i64 - 3, x as i64 + kx as i64 - 3);
                        if (0..h as i64).contains(&iy) && (0..w as i64).contains(&ix) {
                            acc += at(kw, &[0, m, ky, kx]) * pooled(iy as usize, ix as usize, m);
                        }
                    }
                }
            }
            out.push(sigmoid(acc));
        }
    }
    out
}

#[test]
fn attention_maps_match_formulas() {
    let mut rng = Rng::new(16);
    for _ in 0..20 {
        let c = 8 * rng.range(1, 2);
        let (h, w) = (rng.range(1, 6), rng.range(1, 6));
        let f = random(&mut rng, &[c, h, w]);
        let p = attention_params(&mut rng, 3, c, c / 8);
        let mc = channel_attention(&f, &p, 3).unwrap();
        assert_eq!(mc.shape(), &[c, 1, 1]);
        for (a, b) in mc.data().iter().zip(oracle_channel_gate(&f, &p, 3)) {
            assert!((a - b).abs() < 1e-12);
        }
        let ms = spatial_attention(&f, &p, 3).unwrap();
        assert_eq!(ms.shape(), &[1, h, w]);
        for (a, b) in ms.data().iter().zip(oracle_spatial_gate(&f, &p, 3)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn combined_refine_composes_channel_then_spatial() {
    let mut rng = Rng::new(17);
    let f = random(&mut rng, &[16, 5, 4]);
    let p = attention_params(&mut rng, 2, 16, 2);
    let combined = refine(&f, AttentionMode::Combined, &p, 2).unwrap();
    let channel = refine(&f, AttentionMode::Channel, &p, 2).unwrap();
    let both = refine(&channel, AttentionMode::Spatial, &p, 2).unwrap();
    assert!(combined.max_abs_diff(&both) < 1e-12);

    let gate = oracle_channel_gate(&f, &p, 2);
    let hw = 20;
    for (i, v) in channel.data().iter().enumerate() {
        assert!((v - gate[i / hw] * f.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn level_maps_and_omega_match_oracles() {
    let mut rng = Rng::new(18);
    for _ in 0..20 {
        let shape: Vec<(usize, usize, usize)> = [(4, 6, 6), (3, 3, 3), (2, 2, 2)]
            .iter()
            .map(|&(c, h, w)| (rng.range(1, c), rng.range(1, h), rng.range(1, w)))
            .collect();
        let t = random_pyramid(&mut rng, &shape);
        let s = random_pyramid(&mut rng, &shape);
        for (lt, ls) in t.iter().zip(&s) {
            let m = level_loss_map(&to_tensor(lt), &to_tensor(ls)).unwrap();
            for (a, b) in m.data().iter().zip(oracle_level_map(lt, ls).iter().flatten()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let omega = anomaly_map(&to_pyramid(&t), &to_pyramid(&s), 12, 12).unwrap();
        for (a, b) in omega.scores.data().iter().zip(oracle_anomaly_map(&t, &s, 12, 12)) {
            assert!((a - b).abs() < 1e-12);
        }
        let loop_max = omega.scores.data().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(image_score(&omega), loop_max);
    }
}

#[test]
fn image_score_is_loop_max() {
    let mut rng = Rng::new(19);
    let scores = random(&mut rng, &[7, 9]).map(f64::abs);
    let max = scores.data().iter().cloned().fold(0.0, f64::max);
    assert_eq!(image_score(&AnomalyMap { scores }), max);
}

#[test]
fn headline_loss_is_linear_combination() {
    let mut rng = Rng::new(20);
    for _ in 0..20 {
        let shape = random_pyramid_shape(&mut rng);
        let t = random_pyramid(&mut rng, &shape);
        let s = random_pyramid(&mut rng, &shape);
        let (tp, sp) = (to_pyramid(&t), to_pyramid(&s));
        let got = total_loss(&tp, &sp, &LossSpec::headline()).unwrap();
        let want = oracle_cd_channel(&t, &s) + 0.5 * oracle_kld_spatial(&t, &s);
        assert!((got - want).abs() < 1e-12);
        let parts = cd_channel(&tp, &sp).unwrap() + 0.5 * kld_spatial(&tp, &sp).unwrap();
        assert!((got - parts).abs() < 1e-12);
    }
}

#[test]
fn batched_loss_is_mean_of_items() {
    let mut rng = Rng::new(21);
    let t = random(&mut rng, &[3, 4, 5, 5]);
    let s = random(&mut rng, &[3, 4, 5, 5]);
    let batched = total_loss(
        &FeaturePyramid::from_tensors(vec![t.clone()]),
        &FeaturePyramid::from_tensors(vec![s.clone()]),
        &LossSpec::headline(),
    )
    .unwrap();
    let mean: f64 = (0..3)
        .map(|n| {
            total_loss(
                &FeaturePyramid::from_tensors(vec![t.index_outer(n)]),
                &FeaturePyramid::from_tensors(vec![s.index_outer(n)]),
                &LossSpec::headline(),
            )
            .unwrap()
        })
        .sum::<f64>()
        / 3.0;
    assert!((batched - mean).abs() < 1e-12);
}

#[test]
fn auroc_matches_pair_counting() {
    let mut rng = Rng::new(22);
    for _ in 0..200 {
        let n = rng.range(2, 32);
        let scores = tied_scores(&mut rng, n);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.4).collect();
        labels[0] = true;
        labels[1] = false;
        let got = auroc(&scores, &labels).unwrap();
        assert!((got - oracle_auroc(&scores, &labels)).abs() < 1e-12);
    }
}

#[test]
fn components_match_flood_fill() {
    let mut rng = Rng::new(23);
    for _ in 0..200 {
        let m = random_mask(&mut rng, 8, 8, 0.35);
        let got: Vec<Vec<usize>> = connected_components(&m)
            .regions
            .into_iter()
            .map(|mut r| {
                r.sort_unstable();
                r
            })
            .collect();
        assert_eq!(got, oracle_components(&m));
    }
}

#[test]
fn two_region_pro_matches_exhaustive_thresholds() {
    let mut data = vec![false; 36];
    for p in [7, 8, 13, 14] {
        data[p] = true;
    }
    for p in [28, 29, 34] {
        data[p] = true;
    }
    let mask = Mask::new(6, 6, data).unwrap();
    assert_eq!(connected_components(&mask).regions.len(), 2);
    let mut rng = Rng::new(24);
    for _ in 0..50 {
        let map: Vec<f64> = (0..36)
            .map(|p| rng.next_f64() + if mask.data[p] { 0.3 } else { 0.0 })
            .collect();
        let got = pro(&[&map], std::slice::from_ref(&mask), 0.3).unwrap();
        let want = oracle_pro(&[map.clone()], std::slice::from_ref(&mask), 0.3);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn reference_latency_table_weighted_mean() {
    // per-class seconds/image and MVTec test-image counts
    let rows = [
        (0.3208, 83),
        (0.3122, 150),
        (0.3109, 132),
        (0.3466, 117),
        (0.3106, 78),
        (0.3334, 110),
        (0.3111, 124),
        (0.3123, 115),
        (0.3129, 167),
        (0.3139, 160),
        (0.3145, 117),
        (0.3127, 42),
        (0.3118, 100),
        (0.3159, 79),
        (0.3148, 151),
    ];
    assert_eq!(rows.iter().map(|r| r.1).sum::<usize>(), 1725);
    let m = weighted_mean_latency(&rows).unwrap();
    assert!((m - 0.3169).abs() < 1e-4, "{m}");
}

mod common;

use common::{rng, uniform_vec};
use proptest::prelude::*;
use rand::Rng;
use tssc_core::denoiser::{attention_forward, predict_eps, ConditionPair, DenoiserConfig, DenoiserParams};
use tssc_core::tensor::ParamSet;

fn small() -> DenoiserConfig {
    DenoiserConfig {
        frame_size: [8, 8],
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        depth: 2,
        n_intermediate: 2,
        ..DenoiserConfig::default()
    }
}

#[test]
fn single_token_attention_returns_its_value() {
    let q = [0.3, -1.0, 2.0, 0.5];
    let k = [1.0, 1.0, -0.5, 0.25];
    let v = [4.0, -2.0, 0.5, 7.0];
    let (out, probs) = attention_forward(&q, &k, &v, 1, 4, 2);
    assert_eq!(out, v.to_vec());
    assert_eq!(probs, vec![1.0, 1.0]);
}

#[test]
fn three_token_attention_matches_hand_softmax() {
    // one head of width 2
    let q = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let k = [1.0, 0.0, 0.0, 2.0, -1.0, 1.0];
    let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let (out, probs) = attention_forward(&q, &k, &v, 3, 2, 1);
    let scale = 1.0 / 2f64.sqrt();
    for i in 0..3 {
        let s: Vec<f64> = (0..3).map(|j| (q[2 * i] * k[2 * j] + q[2 * i + 1] * k[2 * j + 1]) * scale).collect();
        let z: f64 = s.iter().map(|x| x.exp()).sum();
        let p: Vec<f64> = s.iter().map(|x| x.exp() / z).collect();
        for j in 0..3 {
            assert!((probs[i * 3 + j] - p[j]).abs() < 1e-15);
        }
        for c in 0..2 {
            let want: f64 = (0..3).map(|j| p[j] * v[2 * j + c]).sum();
            assert!((out[2 * i + c] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn fresh_denoiser_predicts_exact_zero() {
    let cfg = DenoiserConfig::default();
    let p = DenoiserParams::<f32>::init(&cfg, &mut rng(80)).unwrap();
    let mut r = rng(81);
    let fl = cfg.frame_len();
    let to32 = |v: Vec<f64>| -> Vec<f32> { v.into_iter().map(|x| x as f32).collect() };
    let x = to32(uniform_vec(cfg.n_intermediate * fl, -3.0, 3.0, &mut r));
    let a = to32(uniform_vec(fl, -1.0, 1.0, &mut r));
    let b = to32(uniform_vec(fl, -1.0, 1.0, &mut r));
    for t in [1, 37, 1000] {
        let eps = predict_eps(&p, &cfg, &x, t, &ConditionPair { first: &a, last: &b }).unwrap();
        assert!(eps.iter().all(|&e| e == 0.0));
    }
}

/// Swaps the top-left and bottom-right 4x4 patches of every 8x8 frame.
fn swap_patches(frames: &[f64]) -> Vec<f64> {
    let mut out = frames.to_vec();
    for f in 0..frames.len() / 64 {
        for y in 0..4 {
            for x in 0..4 {
                let a = f * 64 + y * 8 + x;
                let b = f * 64 + (y + 4) * 8 + x + 4;
                out.swap(a, b);
            }
        }
    }
    out
}

#[test]
fn spatial_patch_permutation_commutes_without_position_table() {
    let cfg = small();
    let mut p = DenoiserParams::<f64>::init(&cfg, &mut rng(82)).unwrap();
    let mut r = rng(83);
    for t in p.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += r.random_range(-0.2..0.2));
    }
    p.pos_spatial.fill(0.0);
    let x = uniform_vec(128, -1.0, 1.0, &mut r);
    let a = uniform_vec(64, -1.0, 1.0, &mut r);
    let b = uniform_vec(64, -1.0, 1.0, &mut r);
    let y = predict_eps(&p, &cfg, &x, 250, &ConditionPair { first: &a, last: &b }).unwrap();
    let (xs, as_, bs) = (swap_patches(&x), swap_patches(&a), swap_patches(&b));
    let ys = predict_eps(&p, &cfg, &xs, 250, &ConditionPair { first: &as_, last: &bs }).unwrap();
    for (u, v) in swap_patches(&y).iter().zip(&ys) {
        assert!((u - v).abs() < 1e-12);
    }
    // with the position table back, the map is no longer equivariant
    let mut q = p.clone();
    q.pos_spatial.data.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    let y = predict_eps(&q, &cfg, &x, 250, &ConditionPair { first: &a, last: &b }).unwrap();
    let ys = predict_eps(&q, &cfg, &xs, 250, &ConditionPair { first: &as_, last: &bs }).unwrap();
    assert!(swap_patches(&y).iter().zip(&ys).any(|(u, v)| (u - v).abs() > 1e-6));
}

#[test]
fn boundary_frames_condition_the_prediction() {
    let cfg = small();
    let mut p = DenoiserParams::<f64>::init(&cfg, &mut rng(84)).unwrap();
    let mut r = rng(85);
    p.out_w.data.iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
    let x = uniform_vec(128, -1.0, 1.0, &mut r);
    let a = uniform_vec(64, -1.0, 1.0, &mut r);
    let b = uniform_vec(64, -1.0, 1.0, &mut r);
    let c = uniform_vec(64, -1.0, 1.0, &mut r);
    let y1 = predict_eps(&p, &cfg, &x, 10, &ConditionPair { first: &a, last: &b }).unwrap();
    let y2 = predict_eps(&p, &cfg, &x, 10, &ConditionPair { first: &c, last: &b }).unwrap();
    let y3 = predict_eps(&p, &cfg, &x, 11, &ConditionPair { first: &a, last: &b }).unwrap();
    assert!(y1.iter().zip(&y2).any(|(u, v)| (u - v).abs() > 1e-6));
    assert!(y1.iter().zip(&y3).any(|(u, v)| (u - v).abs() > 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_distributions(l in 1usize..9, heads in 1usize..3, seed in any::<u64>()) {
        let d = 2 * heads;
        let mut r = rng(seed);
        let q = uniform_vec(l * d, -3.0, 3.0, &mut r);
        let k = uniform_vec(l * d, -3.0, 3.0, &mut r);
        let v = uniform_vec(l * d, -1.0, 1.0, &mut r);
        let (out, probs) = attention_forward(&q, &k, &v, l, d, heads);
        for row in probs.chunks(l) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        // outputs are convex combinations of values
        for c in 0..d {
            let lo = (0..l).map(|j| v[j * d + c]).fold(f64::INFINITY, f64::min);
            let hi = (0..l).map(|j| v[j * d + c]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..l {
                prop_assert!(out[i * d + c] >= lo - 1e-12 && out[i * d + c] <= hi + 1e-12);
            }
        }
    }
}

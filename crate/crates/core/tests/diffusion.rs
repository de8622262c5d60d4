mod common;

use common::rng;
use tssc_core::denoiser::{DenoiserConfig, DenoiserParams};
use tssc_core::engine::{sample_sequence, sample_sequence_unclamped};
use tssc_core::rng::normal_vec;
use tssc_core::schedule::{DdimPlan, NoiseSchedule, SigmaRule};

fn paper() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-6, 1e-2, SigmaRule::Posterior).unwrap()
}

/// Error-free product of f64 values as an unevaluated (hi, lo) pair.
fn dd_product(values: impl Iterator<Item = f64>) -> f64 {
    let (mut hi, mut lo) = (1.0f64, 0.0f64);
    for v in values {
        let p = hi * v;
        let e = hi.mul_add(v, -p);
        let l = lo * v + e;
        hi = p + l;
        lo = l - (hi - p);
    }
    hi + lo
}

#[test]
fn alpha_bar_matches_compensated_product() {
    let s = paper();
    let betas: Vec<f64> = (0..1000).map(|i| 1e-6 + (i as f64) * (1e-2 - 1e-6) / 999.0).collect();
    let want = dd_product(betas.iter().map(|b| 1.0 - b));
    assert_eq!(s.beta(1), 1e-6);
    assert_eq!(s.beta(1000), 1e-2);
    assert!(((s.alpha_bar(1000) - want) / want).abs() < 1e-12);
    for t in [1, 10, 500, 999] {
        let w = dd_product(betas[..t].iter().map(|b| 1.0 - b));
        assert!(((s.alpha_bar(t) - w) / w).abs() < 1e-12);
    }
}

#[test]
fn x0_recovery_from_exact_noise() {
    let s = paper();
    let mut r = rng(50);
    for t in [1, 500, 1000] {
        let x0: Vec<f32> = normal_vec(64, &mut r);
        let eps: Vec<f32> = normal_vec(64, &mut r);
        let xt = s.q_sample(&x0, t, &eps).unwrap();
        let back = s.predict_x0_from_eps(&xt, t, &eps).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "t={t}: {a} vs {b}");
        }
    }
}

#[test]
fn ddpm_chain_with_exact_noise_recovers_clean_frame() {
    let s = paper();
    let mut r = rng(51);
    let x0: Vec<f32> = (0..64).map(|i| ((i as f32) * 0.3).sin()).collect();
    let mut x: Vec<f32> = x0.clone();
    for t in 1..=1000 {
        let n: Vec<f32> = normal_vec(64, &mut r);
        x = s.q_step(&x, t, &n).unwrap();
    }
    for t in (1..=1000).rev() {
        let ab = s.alpha_bar(t);
        let eps: Vec<f32> = x
            .iter()
            .zip(&x0)
            .map(|(&xt, &c)| ((xt as f64 - ab.sqrt() * c as f64) / (1.0 - ab).sqrt()) as f32)
            .collect();
        let z: Vec<f32> = normal_vec(64, &mut r);
        x = s.ddpm_reverse_step(&x, t, &eps, &z).unwrap();
    }
    let rms = (x.iter().zip(&x0).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / 64.0).sqrt();
    assert!(rms < 1e-3, "rms {rms}");
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn forward_chain_matches_closed_form_marginal() {
    let s = paper();
    let mut r = rng(52);
    let t = 300;
    let x0 = 0.7f64;
    let runs = 4000;
    let mut chain = Vec::with_capacity(runs);
    for _ in 0..runs {
        let mut x = vec![x0];
        for k in 1..=t {
            let n: Vec<f64> = normal_vec(1, &mut r);
            x = s.q_step(&x, k, &n).unwrap();
        }
        chain.push(x[0]);
    }
    let (m, v) = mean_var(&chain);
    let ab = s.alpha_bar(t);
    let (m0, v0) = (ab.sqrt() * x0, 1.0 - ab);
    let n = runs as f64;
    assert!((m - m0).abs() < 3.0 * (v0 / n).sqrt(), "mean {m} vs {m0}");
    assert!((v - v0).abs() < 3.0 * v0 * (2.0 / (n - 1.0)).sqrt(), "var {v} vs {v0}");
}

#[test]
fn ddim_full_plan_eta_one_matches_ancestral_sampling() {
    let s = paper();
    let plan = DdimPlan::uniform(1000, 1000, 1.0).unwrap();
    let runs = 1000;
    let mut r = rng(53);
    let mut ddim = Vec::with_capacity(runs);
    let mut ddpm = Vec::with_capacity(runs);
    let zero = [0.0f64];
    for _ in 0..runs {
        let mut x: Vec<f64> = normal_vec(1, &mut r);
        for (t, tp) in plan.transitions() {
            let z: Vec<f64> = normal_vec(1, &mut r);
            x = s.ddim_step(&x, t, tp, &zero, 1.0, &z).unwrap();
        }
        ddim.push(x[0]);
        let mut y: Vec<f64> = normal_vec(1, &mut r);
        for t in (1..=1000).rev() {
            let z: Vec<f64> = normal_vec(1, &mut r);
            y = s.ddpm_reverse_step(&y, t, &zero, &z).unwrap();
        }
        ddpm.push(y[0]);
    }
    let (m1, v1) = mean_var(&ddim);
    let (m2, v2) = mean_var(&ddpm);
    let n = runs as f64;
    let se_m = (v1 / n + v2 / n).sqrt();
    assert!((m1 - m2).abs() < 3.0 * se_m, "means {m1} vs {m2}");
    let se_v = ((v1 * v1 + v2 * v2) * 2.0 / (n - 1.0)).sqrt();
    assert!((v1 - v2).abs() < 3.0 * se_v, "variances {v1} vs {v2}");
}

fn tiny_denoiser() -> (DenoiserConfig, DenoiserParams<f32>) {
    let cfg = DenoiserConfig {
        frame_size: [8, 8],
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        depth: 1,
        n_intermediate: 3,
        ..DenoiserConfig::default()
    };
    let p = DenoiserParams::init(&cfg, &mut rng(54)).unwrap();
    (cfg, p)
}

#[test]
fn zero_noise_prediction_follows_the_analytic_path() {
    let s = paper();
    let plan = DdimPlan::uniform(1000, 50, 0.0).unwrap();
    let (cfg, p) = tiny_denoiser();
    let first = vec![0.25f32; 64];
    let last = vec![-0.5f32; 64];
    let out = sample_sequence_unclamped(&p, &cfg, &s, &plan, &first, &last, &mut rng(55)).unwrap();
    let x_t: Vec<f32> = normal_vec(3 * 64, &mut rng(55));
    let k = 1.0 / s.alpha_bar(1000).sqrt();
    for (a, b) in out.iter().zip(&x_t) {
        let want = *b as f64 * k;
        assert!((*a as f64 - want).abs() <= 1e-5 * want.abs().max(1.0), "{a} vs {want}");
    }
    let clamped = sample_sequence(&p, &cfg, &s, &plan, &first, &last, &mut rng(55)).unwrap();
    assert_eq!(clamped.len(), 3 * 64);
    assert!(clamped.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn eta_zero_sampling_is_bit_reproducible() {
    let s = paper();
    let plan = DdimPlan::uniform(1000, 20, 0.0).unwrap();
    let (cfg, mut p) = tiny_denoiser();
    p.out_w.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i as f32) * 0.13).sin() * 0.05);
    let first: Vec<f32> = (0..64).map(|i| (i as f32 / 32.0) - 1.0).collect();
    let last: Vec<f32> = first.iter().map(|v| -v).collect();
    let a = sample_sequence(&p, &cfg, &s, &plan, &first, &last, &mut rng(56)).unwrap();
    let b = sample_sequence(&p, &cfg, &s, &plan, &first, &last, &mut rng(56)).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Runs without the libtest harness so the
//! lines are always shown.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use tssc::checkpoint::sha256_hex;
use tssc_core::denoiser::{self, ConditionPair, DenoiserConfig, DenoiserParams};
use tssc_core::engine::{sample_sequence, EngineConfig};
use tssc_core::losses::{
    composite_sc_loss, composite_sc_loss_grad, eps_loss, eps_loss_grad, haar_dwt3, haar_idwt3, mse_loss,
    mse_loss_grad, tv_loss, tv_loss_grad, wavelet_loss, wavelet_loss_grad, LossWeights,
};
use tssc_core::metrics::{aggregate, psnr_from_mse, ssim, CaseMetrics};
use tssc_core::rng::{normal_vec, stream_rng, SeededRng};
use tssc_core::scan::{ssm_scan_parallel, ScanKernel, SsmSteps};
use tssc_core::schedule::{DdimPlan, NoiseSchedule, SigmaRule};
use tssc_core::tensor::ParamSet;
use tssc_core::tridir::{
    enhance_volume, inverse_scan_order, net_backward, net_forward, scan_order_transform, ScanOrder, TriDirConfig,
    TriDirNetParams,
};
use tssc_core::volume::{Volume3, Volume4D};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

fn rng(stream: u64) -> SeededRng {
    stream_rng(0xacce, stream)
}

fn uniform(n: usize, lo: f64, hi: f64, r: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

// --- 1. schedule ------------------------------------------------------------

/// Product with error-free transformations, carried as a (hi, lo) pair.
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

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-6, 1e-2, SigmaRule::Posterior).unwrap()
}

fn criterion_1() -> Outcome {
    let s = schedule();
    ensure!(s.beta(1) == 1e-6 && s.beta(1000) == 1e-2, "beta endpoints {} {}", s.beta(1), s.beta(1000));
    let betas = (0..1000).map(|i| 1e-6 + i as f64 * (1e-2 - 1e-6) / 999.0);
    let want = dd_product(betas.map(|b| 1.0 - b));
    let rel = ((s.alpha_bar(1000) - want) / want).abs();
    ensure!(rel < 1e-12, "alpha_bar_T relative error {rel:e}");
    Ok(format!("alpha_bar_T = {:.6e}, rel err {rel:.1e}", s.alpha_bar(1000)))
}

// --- 2. diffusion algebra ------------------------------------------------------

fn criterion_2() -> Outcome {
    let s = schedule();
    let mut r = rng(2);
    let mut worst64: f64 = 0.0;
    let mut worst32: f64 = 0.0;
    for t in [1, 500, 1000] {
        let x0: Vec<f64> = uniform(64, -1.0, 1.0, &mut r);
        let eps: Vec<f64> = normal_vec(64, &mut r);
        let back = s.predict_x0_from_eps(&s.q_sample(&x0, t, &eps).unwrap(), t, &eps).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            worst64 = worst64.max((a - b).abs() / b.abs());
        }
        let x0f: Vec<f32> = x0.iter().map(|&v| v as f32).collect();
        let epsf: Vec<f32> = eps.iter().map(|&v| v as f32).collect();
        let backf = s.predict_x0_from_eps(&s.q_sample(&x0f, t, &epsf).unwrap(), t, &epsf).unwrap();
        let num: f64 = backf.iter().zip(&x0f).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        let den: f64 = x0f.iter().map(|b| (*b as f64).powi(2)).sum();
        worst32 = worst32.max((num / den).sqrt());
    }
    ensure!(worst64 < 1e-5, "f64 x0 recovery relative error {worst64:e}");
    ensure!(worst32 < 1e-5, "f32 x0 recovery normwise relative error {worst32:e}");

    let cfg = DenoiserConfig {
        frame_size: [8, 8],
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        depth: 1,
        n_intermediate: 3,
        ..DenoiserConfig::default()
    };
    let mut p = DenoiserParams::<f32>::init(&cfg, &mut rng(20)).unwrap();
    p.out_w.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 * 0.37).sin() * 0.05);
    let plan = DdimPlan::uniform(1000, 50, 0.0).unwrap();
    let first: Vec<f32> = (0..64).map(|i| i as f32 / 32.0 - 1.0).collect();
    let last: Vec<f32> = first.iter().map(|v| -v).collect();
    let a = sample_sequence(&p, &cfg, &s, &plan, &first, &last, &mut rng(21)).unwrap();
    let b = sample_sequence(&p, &cfg, &s, &plan, &first, &last, &mut rng(21)).unwrap();
    ensure!(bits(&a) == bits(&b), "DDIM eta=0 runs differ");

    let x0: Vec<f32> = (0..64).map(|i| (i as f32 * 0.3).sin()).collect();
    let mut x = x0.clone();
    for t in 1..=1000 {
        x = s.q_step(&x, t, &normal_vec::<f32, _>(64, &mut r)).unwrap();
    }
    for t in (1..=1000).rev() {
        let ab = s.alpha_bar(t);
        let eps: Vec<f32> = x
            .iter()
            .zip(&x0)
            .map(|(&xt, &c)| ((xt as f64 - ab.sqrt() * c as f64) / (1.0 - ab).sqrt()) as f32)
            .collect();
        x = s.ddpm_reverse_step(&x, t, &eps, &normal_vec::<f32, _>(64, &mut r)).unwrap();
    }
    let rms = (x.iter().zip(&x0).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / 64.0).sqrt();
    ensure!(rms < 1e-3, "DDPM exact-noise chain rms {rms:e}");
    Ok(format!("x0 rel err f64 {worst64:.1e} f32 {worst32:.1e}; DDIM bit-exact; DDPM rms {rms:.1e}"))
}

// --- 3. scan ---------------------------------------------------------------------

fn scan_oracle(a: &[f64], b: &[f64], c: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n];
    x.iter()
        .enumerate()
        .map(|(t, &xt)| {
            let mut y = 0.0;
            for k in 0..n {
                h[k] = a[t * n + k] * h[k] + b[t * n + k] * xt;
                y += c[t * n + k] * h[k];
            }
            y
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut non_pow2 = 0;
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let mut r = rng(3000 + case);
        let l = r.random_range(1..=300usize);
        let n = r.random_range(1..=16usize);
        let mut draw = |len: usize, lo: f32, hi: f32| -> Vec<f32> { (0..len).map(|_| r.random_range(lo..hi)).collect() };
        let (a, b, c, x) = (draw(l * n, 0.0, 1.0), draw(l * n, -1.0, 1.0), draw(l * n, -1.0, 1.0), draw(l, -1.0, 1.0));
        non_pow2 += usize::from(!l.is_power_of_two());
        let steps = SsmSteps {
            a_bar: &a,
            b_bar: &b,
            c_bar: &c,
            state_dim: n,
        };
        let got = ssm_scan_parallel(&steps, &x).unwrap();
        let w = |v: &[f32]| v.iter().map(|&q| q as f64).collect::<Vec<_>>();
        let want = scan_oracle(&w(&a), &w(&b), &w(&c), &w(&x), n);
        for (t, (&g, &o)) in got.iter().zip(&want).enumerate() {
            let e = (g as f64 - o).abs() / o.abs().max(1.0);
            worst = worst.max(e);
            ensure!(e <= 1e-5, "case {case} (L={l}, n={n}) t={t}: {g} vs {o}");
        }
    }
    ensure!(non_pow2 > 0, "no non-power-of-two lengths drawn");
    Ok(format!("200 cases ({non_pow2} non-power-of-two L), worst error {worst:.1e}"))
}

// --- 4. layout -------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    for case in 0..50 {
        let dims = [r.random_range(1..=7usize), r.random_range(1..=7usize), r.random_range(1..=7usize)];
        let ch = r.random_range(1..=3usize);
        let n = dims.iter().product::<usize>() * ch;
        let v: Vec<f32> = (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect();
        for order in ScanOrder::ALL {
            let (tok, inv) = scan_order_transform(&v, dims, ch, order).unwrap();
            let back = inverse_scan_order(&tok, &inv, ch).unwrap();
            ensure!(bits(&back) == bits(&v), "case {case} {dims:?} {}: round trip differs", order.as_str());
        }
    }
    let v: Vec<f32> = (0..8).map(|i| i as f32).collect();
    let (tok, _) = scan_order_transform(&v, [2, 2, 2], 1, ScanOrder::Yzx).unwrap();
    // x outermost, then z, y fastest: voxel (z, y, x) sits at 4z + 2y + x
    let want: Vec<f32> = [0, 2, 4, 6, 1, 3, 5, 7].iter().map(|&i| i as f32).collect();
    ensure!(tok == want, "yzx 2x2x2 order {tok:?}");
    Ok("150 round trips bit-exact; yzx 2x2x2 = [0,2,4,6,1,3,5,7]".into())
}

// --- 5. identity at init ------------------------------------------------------------

fn criterion_5() -> Outcome {
    let cfg = TriDirConfig::default();
    let net = TriDirNetParams::<f32>::init(&cfg, &mut rng(5)).unwrap();
    let mut r = rng(50);
    for dims in [[8, 16, 16], [3, 5, 7], [1, 1, 1], [2, 9, 4]] {
        let n = dims.iter().product();
        let v = Volume3::new(dims, (0..n).map(|_| r.random_range(-1.0f32..=1.0)).collect()).unwrap();
        let out = enhance_volume(&net, &cfg, &v).unwrap();
        ensure!(bits(&out.data) == bits(&v.data), "enhance changed a {dims:?} volume");
    }
    let dcfg = DenoiserConfig::default();
    let den = DenoiserParams::<f32>::init(&dcfg, &mut rng(51)).unwrap();
    let fl = dcfg.frame_len();
    let x: Vec<f32> = normal_vec(dcfg.n_intermediate * fl, &mut r);
    let i0: Vec<f32> = (0..fl).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let i1: Vec<f32> = (0..fl).map(|_| r.random_range(-1.0f32..1.0)).collect();
    for t in [1, 500, 1000] {
        let eps = denoiser::predict_eps(&den, &dcfg, &x, t, &ConditionPair { first: &i0, last: &i1 }).unwrap();
        ensure!(eps.iter().all(|&e| e.to_bits() == 0), "fresh denoiser predicts nonzero noise at t={t}");
    }
    Ok("tri-dir net bit-exact identity on 4 shapes; fresh denoiser predicts +0.0 everywhere".into())
}

// --- 6. gradients ----------------------------------------------------------------------

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn fd_vec(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> f64 {
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + H;
        let fp = f(&xp);
        xp[i] = x[i] - H;
        let fm = f(&xp);
        xp[i] = x[i];
        worst = worst.max(rel_err(grad[i], (fp - fm) / (2.0 * H)));
    }
    worst
}

fn fd_params<P: ParamSet<f64> + Clone>(f: &dyn Fn(&P) -> f64, params: &P, grads: &P) -> f64 {
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.data.clone()).collect();
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for (ti, g) in analytic.iter().enumerate() {
        for (i, &gi) in g.iter().enumerate() {
            let orig = p.tensors_mut()[ti].data[i];
            p.tensors_mut()[ti].data[i] = orig + H;
            let fp = f(&p);
            p.tensors_mut()[ti].data[i] = orig - H;
            let fm = f(&p);
            p.tensors_mut()[ti].data[i] = orig;
            worst = worst.max(rel_err(gi, (fp - fm) / (2.0 * H)));
        }
    }
    worst
}

fn jitter<P: ParamSet<f64>>(p: &mut P, amount: f64, stream: u64) {
    let mut r = rng(stream);
    for t in p.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += r.random_range(-amount..amount));
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn criterion_6() -> Outcome {
    let mut report = Vec::new();
    let mut r = rng(6);

    let cfg = DenoiserConfig {
        frame_size: [8, 8],
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        depth: 2,
        n_intermediate: 2,
        ..DenoiserConfig::default()
    };
    let mut den = DenoiserParams::<f64>::init(&cfg, &mut rng(60)).unwrap();
    jitter(&mut den, 0.2, 61);
    let fl = cfg.frame_len();
    let (x, i0, i1, w) = (
        uniform(2 * fl, -1.0, 1.0, &mut r),
        uniform(fl, -1.0, 1.0, &mut r),
        uniform(fl, -1.0, 1.0, &mut r),
        uniform(2 * fl, -1.0, 1.0, &mut r),
    );
    let cond = ConditionPair { first: &i0, last: &i1 };
    let (_, cache) = denoiser::forward(&den, &cfg, &x, 321, &cond).unwrap();
    let (g, dx) = denoiser::backward(&den, &cfg, &cache, &w).unwrap();
    let ep = fd_params(&|p: &DenoiserParams<f64>| dot(&denoiser::predict_eps(p, &cfg, &x, 321, &cond).unwrap(), &w), &den, &g);
    let ex = fd_vec(&|xs| dot(&denoiser::predict_eps(&den, &cfg, xs, 321, &cond).unwrap(), &w), &x, &dx);
    report.push(("denoiser", ep.max(ex)));

    for (name, scan, blocks) in [
        ("tridir/seq", ScanKernel::Sequential, 1),
        ("tridir/par", ScanKernel::Parallel, 1),
        ("tridir/2blk", ScanKernel::Sequential, 2),
    ] {
        let tc = TriDirConfig {
            channels: 2,
            state_dim: 2,
            blocks,
            scan,
        };
        let mut net = TriDirNetParams::<f64>::init(&tc, &mut rng(62)).unwrap();
        jitter(&mut net, 0.3, 63);
        let dims = [4, 2, 3];
        let (x, w) = (uniform(24, -1.0, 1.0, &mut r), uniform(24, -1.0, 1.0, &mut r));
        let (_, cache) = net_forward(&net, &tc, dims, &x).unwrap();
        let (g, dx) = net_backward(&net, &tc, &cache, &w).unwrap();
        let ep = fd_params(&|p: &TriDirNetParams<f64>| dot(&net_forward(p, &tc, dims, &x).unwrap().0, &w), &net, &g);
        let ex = fd_vec(&|xs| dot(&net_forward(&net, &tc, dims, xs).unwrap().0, &w), &x, &dx);
        report.push((name, ep.max(ex)));
    }

    let dims = [4, 4, 4];
    let (a, b) = (uniform(64, -1.0, 1.0, &mut r), uniform(64, -1.0, 1.0, &mut r));
    let (_, g) = mse_loss_grad(&a, &b).unwrap();
    report.push(("mse", fd_vec(&|x| mse_loss(x, &b).unwrap(), &a, &g)));
    let (_, g) = eps_loss_grad(&a, &b).unwrap();
    report.push(("eps", fd_vec(&|x| eps_loss(x, &b).unwrap(), &a, &g)));
    for levels in [1, 2] {
        let (_, g) = wavelet_loss_grad(&a, &b, dims, levels).unwrap();
        report.push(("wavelet", fd_vec(&|x| wavelet_loss(x, &b, dims, levels).unwrap(), &a, &g)));
    }
    let (_, g) = tv_loss_grad(&a, dims).unwrap();
    report.push(("tv", fd_vec(&|x| tv_loss(x, dims).unwrap(), &a, &g)));
    let lw = LossWeights { mse: 0.7, wavelet: 1.3, tv: 0.4 };
    let (_, g) = composite_sc_loss_grad(&a, &b, dims, &lw, 2).unwrap();
    report.push(("composite", fd_vec(&|x| composite_sc_loss(x, &b, dims, &lw, 2).unwrap().total, &a, &g)));

    let worst = report.iter().cloned().fold(("", 0.0f64), |m, e| if e.1 > m.1 { e } else { m });
    ensure!(worst.1 < 1e-4, "{} max relative error {:e}", worst.0, worst.1);
    Ok(format!("{} checks, worst {:.1e} ({})", report.len(), worst.1, worst.0))
}

// --- 7. loss oracles -----------------------------------------------------------------------

/// One level of the orthonormal Haar analysis applied with explicit matrices.
fn haar_oracle(v: &[f64], dims: [usize; 3], levels: usize) -> Vec<f64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let analysis = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|row| {
                let mut m = vec![0.0; n];
                let k = row % (n / 2);
                m[2 * k] = s;
                m[2 * k + 1] = if row < n / 2 { s } else { -s };
                m
            })
            .collect()
    };
    let [nz, ny, nx] = dims;
    let at = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
    let mut out = v.to_vec();
    for l in 0..levels {
        let (rz, ry, rx) = (nz >> l, ny >> l, nx >> l);
        let (mz, my, mx) = (analysis(rz), analysis(ry), analysis(rx));
        let mut block = vec![0.0; rz * ry * rx];
        for z in 0..rz {
            for y in 0..ry {
                for x in 0..rx {
                    let mut acc = 0.0;
                    for i in 0..rz {
                        for j in 0..ry {
                            for k in 0..rx {
                                acc += mz[z][i] * my[y][j] * mx[x][k] * out[at(i, j, k)];
                            }
                        }
                    }
                    block[(z * ry + y) * rx + x] = acc;
                }
            }
        }
        for z in 0..rz {
            for y in 0..ry {
                for x in 0..rx {
                    out[at(z, y, x)] = block[(z * ry + y) * rx + x];
                }
            }
        }
    }
    out
}

fn tv_oracle(v: &[f64], [nz, ny, nx]: [usize; 3]) -> f64 {
    let at = |z: usize, y: usize, x: usize| v[(z * ny + y) * nx + x];
    let (mut sum, mut count) = (0.0, 0usize);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                for (ok, (a, b, c)) in [(z + 1 < nz, (z + 1, y, x)), (y + 1 < ny, (z, y + 1, x)), (x + 1 < nx, (z, y, x + 1))] {
                    if ok {
                        sum += (at(a, b, c) - at(z, y, x)).abs();
                        count += 1;
                    }
                }
            }
        }
    }
    sum / count as f64
}

fn criterion_7() -> Outcome {
    let mut r = rng(7);
    let mut worst_parseval: f64 = 0.0;
    let mut worst_inverse: f64 = 0.0;
    for (dims, levels) in [([4, 4, 4], 2), ([8, 16, 16], 2), ([2, 4, 8], 1), ([8, 8, 8], 3)] {
        let n: usize = dims.iter().product();
        let v = uniform(n, -1.0, 1.0, &mut r);
        let p = haar_dwt3(&v, dims, levels).unwrap();
        let e_in: f64 = v.iter().map(|x| x * x).sum();
        let e_out: f64 = p.coeffs.iter().map(|x| x * x).sum();
        worst_parseval = worst_parseval.max((e_in - e_out).abs() / e_in);
        let back = haar_idwt3(&p).unwrap();
        worst_inverse = back.iter().zip(&v).fold(worst_inverse, |m, (a, b)| m.max((a - b).abs()));
    }
    ensure!(worst_parseval < 1e-6, "Parseval relative error {worst_parseval:e}");
    ensure!(worst_inverse < 1e-6, "inverse round trip error {worst_inverse:e}");

    let checker: Vec<f64> = (0..64).map(|i| ((i / 16 + (i / 4) % 4 + i % 4) % 2) as f64).collect();
    let tv = tv_loss(&checker, [4, 4, 4]).unwrap();
    ensure!(tv == 1.0, "checkerboard TV {tv}");

    let dims = [4, 4, 4];
    let (a, b) = (uniform(64, -1.0, 1.0, &mut r), uniform(64, -1.0, 1.0, &mut r));
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 64.0;
    let (ha, hb) = (haar_oracle(&a, dims, 2), haar_oracle(&b, dims, 2));
    let wav = ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 64.0;
    let want = mse + wav + tv_oracle(&a, dims);
    let got = composite_sc_loss(&a, &b, dims, &LossWeights { mse: 1.0, wavelet: 1.0, tv: 1.0 }, 2).unwrap();
    let diff = (got.total - want).abs();
    ensure!(diff < 1e-8, "composite {} vs oracle sum {want}", got.total);
    Ok(format!("Parseval {worst_parseval:.1e}, inverse {worst_inverse:.1e}, checkerboard TV 1, composite diff {diff:.1e}"))
}

// --- 8. metrics ------------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let mut r = rng(8);
    let a: Vec<f32> = (0..4 * 16 * 16).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let s = ssim(&a, &a, [4, 16, 16], 2.0).unwrap();
    ensure!((s - 1.0).abs() < 1e-12, "ssim(a, a) = {s}");
    let p = psnr_from_mse(0.01, 1.0).unwrap();
    ensure!((p - 20.0).abs() < 1e-9, "psnr(0.01, 1) = {p}");
    let cases = [10.0, 20.0]
        .iter()
        .enumerate()
        .map(|(i, &v)| CaseMetrics {
            case: format!("c{i}"),
            mae: v,
            psnr: v,
            ssim: v,
        })
        .collect();
    let agg = aggregate(cases).unwrap().psnr.to_string();
    ensure!(agg == "15.000±5.000", "aggregate {agg}");
    Ok(format!("ssim(a,a) = {s}, psnr = {p} dB, aggregate {agg}"))
}

// --- 9 / 10. end to end through the command line ------------------------------------------

const ARTIFACTS: [&str; 9] = [
    "ck/stage1.log.csv",
    "ck/stage1.bin",
    "ck/stage2.log.csv",
    "ck/stage2.val.csv",
    "ck/stage2.bin",
    "out/pred.raw",
    "out/pred.meta.json",
    "out/pred.pgm",
    "out/metrics.csv",
];

fn tssc(dir: &Path, args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["tssc".to_string(), "--config".into(), dir.join("config.json").display().to_string()];
    argv.extend(args.iter().map(|a| a.replace("@", &dir.display().to_string())));
    let code = tssc::cli::run(&argv);
    if code == 0 {
        Ok(())
    } else {
        Err(format!("`{}` exited with {code}", argv[3..].join(" ")))
    }
}

fn read_column(path: &Path, col: usize) -> Vec<f64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Run {
    dir: tempfile::TempDir,
    summary: String,
}

/// make-synthetic, train-tsr, train-sc, then pipeline on the first and last
/// frame of the held-out case.
fn end_to_end(jobs: usize) -> Result<Run, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let cfg = EngineConfig::default();
    tssc::config::save_config(&cfg, &root.join("config.json")).map_err(|e| e.to_string())?;
    let jobs = jobs.to_string();
    let common = ["--deterministic", "--jobs", jobs.as_str()];
    let with = |args: &[&str]| -> Vec<String> { args.iter().chain(&common).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| tssc(root, &args.iter().map(String::as_str).collect::<Vec<_>>());

    run(with(&["make-synthetic", "--out", "@/data"]))?;
    run(with(&["train-tsr", "--in", "@/data", "--out", "@/ck/stage1"]))?;
    let losses = read_column(&root.join("ck/stage1.log.csv"), 1);
    ensure!(losses.len() == cfg.stage1.steps as usize, "stage-1 log has {} rows", losses.len());
    let (head, tail) = (mean(&losses[..100]), mean(&losses[losses.len() - 100..]));
    let ratio = tail / head;
    ensure!(ratio < 0.5, "stage-1 loss ratio {ratio:.3} (first 100 {head:.4}, last 100 {tail:.4})");

    let hash = |p: &str| std::fs::read(root.join(p)).map(|b| sha256_hex(&b)).map_err(|e| e.to_string());
    let before = (hash("ck/stage1.bin")?, hash("ck/stage1.json")?);
    run(with(&["train-sc", "--in", "@/data", "--stage1", "@/ck/stage1", "--out", "@/ck/stage2"]))?;
    ensure!((hash("ck/stage1.bin")?, hash("ck/stage1.json")?) == before, "stage-1 checkpoint changed");
    let val = read_column(&root.join("ck/stage2.val.csv"), 1);
    let (v0, vn) = (val[0], *val.last().unwrap());
    ensure!(val.len() == cfg.stage2.epochs as usize + 1, "validation log has {} rows", val.len());
    ensure!(vn <= v0, "stage-2 validation mse {vn} > epoch-0 {v0}");

    // two input frames of the held-out case
    let truth_path = root.join(format!("data/case{:03}.raw", cfg.synthetic.cases - 1));
    let truth = tssc::io::load_volume4d(&truth_path).map_err(|e| e.to_string())?;
    let last = truth.frames() - 1;
    let mut two = Volume4D::from_frames(&[truth.frame(0), truth.frame(last)]).map_err(|e| e.to_string())?;
    two.normalized = truth.normalized;
    two.intensity_range = truth.intensity_range;
    two.spacing = truth.spacing;
    tssc::io::save_volume4d(&two, &root.join("two.raw")).map_err(|e| e.to_string())?;

    let pipeline = ["pipeline", "--in", "@/two.raw", "--stage1", "@/ck/stage1", "--stage2", "@/ck/stage2"];
    run(with(&[&pipeline[..], &["--out", "@/out/pred.raw"]].concat()))?;
    run(with(&[&pipeline[..], &["--out", "@/out/again.raw"]].concat()))?;
    let pred = tssc::io::load_volume4d(&root.join("out/pred.raw")).map_err(|e| e.to_string())?;
    let again = tssc::io::load_volume4d(&root.join("out/again.raw")).map_err(|e| e.to_string())?;
    let [_, z, y, x] = truth.shape;
    ensure!(pred.shape == [12, z, y, x], "pipeline output shape {:?}", pred.shape);
    ensure!(bits(&pred.data) == bits(&again.data), "repeated pipeline runs differ");
    let boundary = [(0, 0), (11, last)]
        .iter()
        .flat_map(|&(p, t)| {
            let (a, b) = (pred.frame(p), truth.frame(t));
            a.data.iter().zip(&b.data).map(|(u, v)| (u - v).abs()).collect::<Vec<_>>()
        })
        .fold(0.0f32, f32::max);

    run(with(&["evaluate", "--in", "@/out/pred.raw", "--target", &truth_path.display().to_string(), "--out", "@/out/metrics.csv"]))?;
    let summary = std::fs::read_to_string(root.join("out/metrics.csv")).unwrap();
    let summary = summary.lines().last().unwrap_or("").to_string();
    Ok(Run {
        summary: format!(
            "stage-1 loss ratio {ratio:.3}; val mse {v0:.4} -> {vn:.4}; stage-1 sha256 {} unchanged; output {:?}, \
             boundary max |diff| {boundary:.3}; held-out case {summary}",
            &before.0[..12],
            pred.shape
        ),
        dir,
    })
}

fn criterion_9(first: &mut Option<Run>) -> Outcome {
    let run = end_to_end(1)?;
    let s = run.summary.clone();
    *first = Some(run);
    Ok(s)
}

fn criterion_10(first: &Option<Run>) -> Outcome {
    let a = first.as_ref().ok_or("criterion 9 did not complete")?;
    let b = end_to_end(2)?;
    for f in ARTIFACTS {
        let (x, y) = (std::fs::read(a.dir.path().join(f)), std::fs::read(b.dir.path().join(f)));
        match (x, y) {
            (Ok(x), Ok(y)) => ensure!(x == y, "{f} differs between runs"),
            _ => return Err(format!("{f} missing")),
        }
    }
    Ok(format!("{} artifacts bit-identical across runs with --jobs 1 and --jobs 2", ARTIFACTS.len()))
}

// --- driver ----------------------------------------------------------------------------------

fn report(id: u32, title: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let res = panic::catch_unwind(AssertUnwindSafe(f));
    let took = start.elapsed();
    let (mut ok, mut detail) = match res {
        Ok(Ok(d)) => (true, d),
        Ok(Err(e)) => (false, e),
        Err(p) => (
            false,
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    if let Some(l) = limit {
        if took > l {
            ok = false;
            detail = format!("runtime {:.1}s over limit {:.0}s; {detail}", took.as_secs_f64(), l.as_secs_f64());
        }
    }
    println!(
        "{} criterion {id:>2} [{title}] ({:.2}s): {detail}",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    ok
}

fn main() {
    // `cargo test -- --list` and friends expect a listing, not a run
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let secs = Duration::from_secs;
    let mut first = None;
    let results = [
        report(1, "schedule", Some(secs(1)), criterion_1),
        report(2, "diffusion algebra", Some(secs(10)), criterion_2),
        report(3, "scan equivalence", Some(secs(10)), criterion_3),
        report(4, "tri-directional layout", None, criterion_4),
        report(5, "identity at init", None, criterion_5),
        report(6, "gradient checks", Some(secs(120)), criterion_6),
        report(7, "loss oracles", None, criterion_7),
        report(8, "metric sanity", None, criterion_8),
        report(9, "end-to-end smoke", Some(secs(30 * 60)), || criterion_9(&mut first)),
        report(10, "freeze and determinism", None, || criterion_10(&first)),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

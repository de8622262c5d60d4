#![allow(dead_code)]

use rand::Rng;
use tssc_core::rng::{stream_rng, SeededRng};
use tssc_core::tensor::ParamSet;

pub fn rng(stream: u64) -> SeededRng {
    stream_rng(0x5eed, stream)
}

pub fn uniform_vec(n: usize, lo: f64, hi: f64, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central differences of `f` at `x`, compared with `grad`. Returns the
/// largest relative error.
pub fn check_vec_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], h: f64, floor: f64) -> f64 {
    assert_eq!(x.len(), grad.len());
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let num = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_err(grad[i], num, floor));
    }
    worst
}

/// Same for every scalar of a parameter set. `f` evaluates the loss at the
/// given parameters. Returns `(worst relative error, tensor name)`.
pub fn check_param_grad<P: ParamSet<f64> + Clone>(
    f: &dyn Fn(&P) -> f64,
    params: &P,
    grads: &P,
    h: f64,
    floor: f64,
) -> (f64, String) {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.data.clone()).collect();
    let mut worst = (0.0, String::new());
    let mut p = params.clone();
    for (ti, name) in names.iter().enumerate() {
        for (i, &a) in analytic[ti].iter().enumerate() {
            let orig = p.tensors_mut()[ti].data[i];
            p.tensors_mut()[ti].data[i] = orig + h;
            let fp = f(&p);
            p.tensors_mut()[ti].data[i] = orig - h;
            let fm = f(&p);
            p.tensors_mut()[ti].data[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let e = rel_err(a, num, floor);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic {} numeric {num}", analytic[ti][i]));
            }
        }
    }
    worst
}

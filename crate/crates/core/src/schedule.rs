//! Noise schedules, the forward noising chain, and reverse-step samplers.
//!
//! Timesteps are 1-based: `t = 1..=T`, with `alpha_bar(0) = 1`. Tables are
//! held in `f64`; images can be any [`Real`].

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::real::Real;
use crate::{Error, Result};

/// Rule for the reverse-step standard deviation `sigma_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SigmaRule {
    /// `sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    #[default]
    Posterior,
    /// `sigma_t^2 = beta_t`.
    Beta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Endpoint-inclusive linear schedule:
    /// `beta_t = beta_start + (t-1)/(T-1) * (beta_end - beta_start)`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, rule: SigmaRule) -> Result<Self> {
        if steps == 0 {
            return Err(Error::range("T", steps, ">= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (i as f64) / ((steps - 1) as f64) * (beta_end - beta_start)
                }
            })
            .collect();
        Self::from_betas(betas, rule)
    }

    pub fn from_betas(betas: Vec<f64>, rule: SigmaRule) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Empty("betas"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::range("beta", b, "(0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..betas.len())
            .map(|i| match rule {
                SigmaRule::Beta => betas[i].sqrt(),
                SigmaRule::Posterior => {
                    let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                    ((1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]).sqrt()
                }
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::range("t", t, format!("1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `abar_t`, with `abar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// One forward step: `sqrt(1 - beta_t) x_prev + sqrt(beta_t) noise`.
    pub fn q_step<F: Real>(&self, x_prev: &[F], t: usize, noise: &[F]) -> Result<Vec<F>> {
        let i = self.check(t)?;
        same_len("q_step", x_prev, noise)?;
        let b = self.betas[i];
        Ok(affine2(x_prev, (1.0 - b).sqrt(), noise, b.sqrt()))
    }

    /// Closed-form marginal: `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
    pub fn q_sample<F: Real>(&self, x0: &[F], t: usize, noise: &[F]) -> Result<Vec<F>> {
        let i = self.check(t)?;
        same_len("q_sample", x0, noise)?;
        let ab = self.alpha_bars[i];
        Ok(affine2(x0, ab.sqrt(), noise, (1.0 - ab).sqrt()))
    }

    /// `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
    pub fn predict_x0_from_eps<F: Real>(&self, x_t: &[F], t: usize, eps: &[F]) -> Result<Vec<F>> {
        let i = self.check(t)?;
        same_len("predict_x0_from_eps", x_t, eps)?;
        let ab = self.alpha_bars[i];
        let inv = 1.0 / ab.sqrt();
        Ok(affine2(x_t, inv, eps, -(1.0 - ab).sqrt() * inv))
    }

    /// Ancestral step `x_t -> x_{t-1}` with posterior mean
    /// `(x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)` plus
    /// `sigma_t noise`. No noise is added on the final step `t = 1`.
    pub fn ddpm_reverse_step<F: Real>(
        &self,
        x_t: &[F],
        t: usize,
        eps_hat: &[F],
        noise: &[F],
    ) -> Result<Vec<F>> {
        let i = self.check(t)?;
        same_len("ddpm_reverse_step", x_t, eps_hat)?;
        same_len("ddpm_reverse_step", x_t, noise)?;
        let (a, b, ab) = (self.alphas[i], self.betas[i], self.alpha_bars[i]);
        let inv = 1.0 / a.sqrt();
        let ce = -b / (1.0 - ab).sqrt() * inv;
        let sigma = if t > 1 { self.sigmas[i] } else { 0.0 };
        let (ci, ce, cs) = (F::from_f64(inv), F::from_f64(ce), F::from_f64(sigma));
        Ok(x_t
            .iter()
            .zip(eps_hat)
            .zip(noise)
            .map(|((&x, &e), &n)| ci * x + ce * e + cs * n)
            .collect())
    }

    /// Standard deviation of the stochastic DDIM term for a `t -> t_prev` jump.
    pub fn ddim_sigma(&self, t: usize, t_prev: usize, eta: f64) -> f64 {
        let (ab, abp) = (self.alpha_bar(t), self.alpha_bar(t_prev));
        eta * ((1.0 - abp) / (1.0 - ab)).sqrt() * (1.0 - ab / abp).sqrt()
    }

    /// DDIM update from `t` to `t_prev < t` (`t_prev = 0` lands on the clean
    /// estimate). Deterministic in `(x_t, eps_hat)` when `eta = 0`.
    pub fn ddim_step<F: Real>(
        &self,
        x_t: &[F],
        t: usize,
        t_prev: usize,
        eps_hat: &[F],
        eta: f64,
        noise: &[F],
    ) -> Result<Vec<F>> {
        self.check(t)?;
        if t_prev >= t {
            return Err(Error::range("t_prev", t_prev, format!("0..{t}")));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::range("eta", eta, "[0, 1]"));
        }
        same_len("ddim_step", x_t, eps_hat)?;
        let (ab, abp) = (self.alpha_bar(t), self.alpha_bar(t_prev));
        let sigma = self.ddim_sigma(t, t_prev, eta);
        let dir = (1.0 - abp - sigma * sigma).max(0.0).sqrt();
        // x_prev = sqrt(abp) * x0_hat + dir * eps_hat + sigma * noise,
        // x0_hat = (x_t - sqrt(1 - ab) eps_hat) / sqrt(ab)
        let cx = (abp / ab).sqrt();
        let ce = dir - (abp * (1.0 - ab) / ab).sqrt();
        let (cx, ce) = (F::from_f64(cx), F::from_f64(ce));
        if sigma == 0.0 {
            return Ok(x_t.iter().zip(eps_hat).map(|(&x, &e)| cx * x + ce * e).collect());
        }
        same_len("ddim_step", x_t, noise)?;
        let cs = F::from_f64(sigma);
        Ok(x_t
            .iter()
            .zip(eps_hat)
            .zip(noise)
            .map(|((&x, &e), &n)| cx * x + ce * e + cs * n)
            .collect())
    }
}

fn same_len<F>(context: &'static str, a: &[F], b: &[F]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(context, a.len(), b.len()));
    }
    Ok(())
}

fn affine2<F: Real>(x: &[F], cx: f64, y: &[F], cy: f64) -> Vec<F> {
    let (cx, cy) = (F::from_f64(cx), F::from_f64(cy));
    x.iter().zip(y).map(|(&a, &b)| cx * a + cy * b).collect()
}

/// Timestep subsequence `tau_1 < ... < tau_S = T` used by DDIM sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct DdimPlan {
    timesteps: Vec<usize>,
    pub eta: f64,
}

impl DdimPlan {
    /// `S` uniformly spaced steps, `tau_i = floor(i * T / S)`.
    pub fn uniform(total: usize, steps: usize, eta: f64) -> Result<Self> {
        if steps == 0 || steps > total {
            return Err(Error::range("DDIM steps", steps, format!("1..={total}")));
        }
        let timesteps = (1..=steps).map(|i| i * total / steps).collect();
        Self::new(timesteps, eta, total)
    }

    pub fn new(timesteps: Vec<usize>, eta: f64, total: usize) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::Empty("DDIM plan"));
        }
        if timesteps[0] == 0 || timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("DDIM timesteps must be strictly increasing in 1..={total}")));
        }
        if *timesteps.last().unwrap() != total {
            return Err(Error::Config(format!("DDIM plan must end at T = {total}")));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::range("eta", eta, "[0, 1]"));
        }
        Ok(Self { timesteps, eta })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// `(t, t_prev)` pairs in sampling order, ending with `(tau_1, 0)`.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        let ts = &self.timesteps;
        (0..ts.len())
            .rev()
            .map(|i| (ts[i], if i == 0 { 0 } else { ts[i - 1] }))
            .collect()
    }
}

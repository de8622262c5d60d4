//! Image quality metrics: MAE, PSNR, SSIM and mean/std aggregation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::{Error, Result};

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Default dynamic range for data normalized to `[-1, 1]`.
pub const DEFAULT_MAX_VAL: f64 = 2.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MetricsConfig {
    /// Dynamic range used by PSNR and the SSIM stabilizers.
    pub max_val: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { max_val: DEFAULT_MAX_VAL }
    }
}

fn check_pair(ctx: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(ctx, a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Empty(ctx));
    }
    Ok(())
}

pub fn mae(a: &[f32], b: &[f32]) -> Result<f64> {
    check_pair("mae", a, b)?;
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(s / a.len() as f64)
}

pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    check_pair("mse", a, b)?;
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// PSNR from a mean squared error; zero error maps to [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::range("max_val", max_val, "> 0"));
    }
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

pub fn psnr(a: &[f32], b: &[f32], max_val: f64) -> Result<f64> {
    psnr_from_mse(mse(a, b)?, max_val)
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

// Valid-mode separable filtering of an h x w image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM of one `h x w` image pair.
pub fn ssim_2d(a: &[f32], b: &[f32], h: usize, w: usize, max_val: f64) -> Result<f64> {
    check_pair("ssim", a, b)?;
    if a.len() != h * w {
        return Err(Error::shape("ssim image", h * w, a.len()));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::range("ssim image size", format!("{h}x{w}"), format!(">= {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    if !(max_val > 0.0) {
        return Err(Error::range("max_val", max_val, "> 0"));
    }
    let taps = gaussian_window();
    let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(&af, h, w, &taps);
    let mu_b = filter_valid(&bf, h, w, &taps);
    let e_aa = filter_valid(&prod(&af, &af), h, w, &taps);
    let e_bb = filter_valid(&prod(&bf, &bf), h, w, &taps);
    let e_ab = filter_valid(&prod(&af, &bf), h, w, &taps);
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM of two `(Z, Y, X)` volumes: slice-wise over `(y, x)`, averaged over z.
pub fn ssim(a: &[f32], b: &[f32], dims: [usize; 3], max_val: f64) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let [nz, ny, nx] = dims;
    if nz * ny * nx != a.len() {
        return Err(Error::shape("ssim volume", dims, a.len()));
    }
    let n = ny * nx;
    let mut total = 0.0;
    for z in 0..nz {
        total += ssim_2d(&a[z * n..(z + 1) * n], &b[z * n..(z + 1) * n], ny, nx, max_val)?;
    }
    Ok(total / nz as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case: String,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl core::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Empty("mean_std"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(MeanStd { mean, std: var.sqrt() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
    pub mae: MeanStd,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
}

pub fn aggregate(cases: Vec<CaseMetrics>) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::Empty("aggregate"));
    }
    let col = |f: fn(&CaseMetrics) -> f64| -> Vec<f64> { cases.iter().map(f).collect() };
    let mae = mean_std(&col(|c| c.mae))?;
    let psnr = mean_std(&col(|c| c.psnr))?;
    let ssim = mean_std(&col(|c| c.ssim))?;
    Ok(MetricReport { cases, mae, psnr, ssim })
}

/// Metrics of one predicted `(.., Z, Y, X)` sample stream against its target.
/// Leading dimensions are folded into z for SSIM.
pub fn evaluate_case(case: &str, pred: &[f32], target: &[f32], dims: [usize; 3], max_val: f64) -> Result<CaseMetrics> {
    Ok(CaseMetrics {
        case: case.into(),
        mae: mae(pred, target)?,
        psnr: psnr(pred, target, max_val)?,
        ssim: ssim(pred, target, dims, max_val)?,
    })
}

//! Training objectives.
//!
//! Stage 1 minimizes the mean squared error between predicted and injected
//! noise. Stage 2 minimizes a weighted sum of voxel MSE, an L1 distance
//! between orthonormal 3D Haar pyramids, and anisotropic total variation of
//! the prediction.
//!
//! Every loss comes with a `*_grad` variant returning the value together with
//! the gradient with respect to its first argument. Volumes are flat `(Z, Y, X)`
//! row-major slices with explicit dims.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossWeights {
    pub mse: f64,
    pub wavelet: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            wavelet: 1.0,
            tv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("mse", self.mse), ("wavelet", self.wavelet), ("tv", self.tv)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::range("loss weight", alloc::format!("{name}={w}"), ">= 0"));
            }
        }
        Ok(())
    }
}

/// Per-term values of the stage-2 loss (unweighted terms, weighted total).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F> {
    pub mse: F,
    pub wavelet: F,
    pub tv: F,
    pub total: F,
}

pub const DEFAULT_WAVELET_LEVELS: usize = 2;

fn same_len<F>(ctx: &'static str, a: &[F], b: &[F]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(ctx, a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::Empty(ctx));
    }
    Ok(())
}

fn check_dims<F>(ctx: &'static str, v: &[F], dims: [usize; 3]) -> Result<()> {
    if dims.iter().product::<usize>() != v.len() || v.is_empty() {
        return Err(Error::shape(ctx, dims, v.len()));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse_loss<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    same_len("mse_loss", a, b)?;
    let s: F = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(s / F::from_usize(a.len()))
}

pub fn mse_loss_grad<F: Real>(a: &[F], b: &[F]) -> Result<(F, Vec<F>)> {
    let loss = mse_loss(a, b)?;
    let k = F::from_f64(2.0) / F::from_usize(a.len());
    Ok((loss, a.iter().zip(b).map(|(&x, &y)| k * (x - y)).collect()))
}

/// Stage-1 objective: MSE between predicted and true noise.
pub fn eps_loss<F: Real>(eps_hat: &[F], eps_true: &[F]) -> Result<F> {
    mse_loss(eps_hat, eps_true)
}

pub fn eps_loss_grad<F: Real>(eps_hat: &[F], eps_true: &[F]) -> Result<(F, Vec<F>)> {
    mse_loss_grad(eps_hat, eps_true)
}

/// Multilevel orthonormal 3D Haar decomposition, stored in place.
///
/// After level `l` (1-based) the leading `dims / 2^(l-1)` block holds eight
/// octants, one per subband; octant bit 2 is the z high-pass, bit 1 y, bit 0 x.
/// Octant 0 of the last level is the approximation. A constant volume with
/// value `c` has approximation `c * 2^(3 * levels / 2)` and zero details.
#[derive(Debug, Clone, PartialEq)]
pub struct HaarPyramid<F> {
    pub dims: [usize; 3],
    pub levels: usize,
    pub coeffs: Vec<F>,
}

impl<F: Real> HaarPyramid<F> {
    fn region(&self, level: usize) -> [usize; 3] {
        self.dims.map(|d| d >> level)
    }

    /// Subband `band` (0..8) of `level` (1..=levels).
    pub fn band(&self, level: usize, band: usize) -> Result<Vec<F>> {
        if level == 0 || level > self.levels || band >= 8 {
            return Err(Error::range("subband", alloc::format!("level {level}, band {band}"), "level 1..=levels, band 0..8"));
        }
        let [hz, hy, hx] = self.region(level);
        let off = [(band >> 2) & 1, (band >> 1) & 1, band & 1];
        let [_, ny, nx] = self.dims;
        let mut out = Vec::with_capacity(hz * hy * hx);
        for z in 0..hz {
            for y in 0..hy {
                for x in 0..hx {
                    let (zz, yy, xx) = (z + off[0] * hz, y + off[1] * hy, x + off[2] * hx);
                    out.push(self.coeffs[(zz * ny + yy) * nx + xx]);
                }
            }
        }
        Ok(out)
    }

    pub fn approximation(&self) -> Vec<F> {
        if self.levels == 0 {
            return self.coeffs.clone();
        }
        self.band(self.levels, 0).expect("valid level")
    }
}

fn check_haar<F>(v: &[F], dims: [usize; 3], levels: usize) -> Result<()> {
    check_dims("haar_dwt3", v, dims)?;
    let m = 1usize.checked_shl(levels as u32).filter(|&m| m > 0);
    match m {
        Some(m) if dims.iter().all(|&d| d % m == 0) => Ok(()),
        _ => Err(Error::shape("haar_dwt3 (dims divisible by 2^levels)", levels, dims)),
    }
}

// One 1D analysis (or synthesis) pass along `axis` within the leading
// `region` block of a volume with full extents `dims`.
fn haar_pass<F: Real>(data: &mut [F], dims: [usize; 3], region: [usize; 3], axis: usize, inverse: bool) {
    let strides = [dims[1] * dims[2], dims[2], 1];
    let n = region[axis];
    let half = n / 2;
    let r = F::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    let mut line = vec![F::zero(); n];
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    for i in 0..region[others[0]] {
        for j in 0..region[others[1]] {
            let base = i * strides[others[0]] + j * strides[others[1]];
            let s = strides[axis];
            for k in 0..n {
                line[k] = data[base + k * s];
            }
            for k in 0..half {
                if inverse {
                    let (lo, hi) = (line[k], line[half + k]);
                    data[base + 2 * k * s] = (lo + hi) * r;
                    data[base + (2 * k + 1) * s] = (lo - hi) * r;
                } else {
                    let (p, q) = (line[2 * k], line[2 * k + 1]);
                    data[base + k * s] = (p + q) * r;
                    data[base + (half + k) * s] = (p - q) * r;
                }
            }
        }
    }
}

/// Forward transform. Each dim must be divisible by `2^levels`.
pub fn haar_dwt3<F: Real>(v: &[F], dims: [usize; 3], levels: usize) -> Result<HaarPyramid<F>> {
    check_haar(v, dims, levels)?;
    let mut coeffs = v.to_vec();
    for l in 0..levels {
        let region = dims.map(|d| d >> l);
        for axis in [2, 1, 0] {
            haar_pass(&mut coeffs, dims, region, axis, false);
        }
    }
    Ok(HaarPyramid { dims, levels, coeffs })
}

/// Inverse of [`haar_dwt3`].
pub fn haar_idwt3<F: Real>(p: &HaarPyramid<F>) -> Result<Vec<F>> {
    check_haar(&p.coeffs, p.dims, p.levels)?;
    let mut data = p.coeffs.clone();
    for l in (0..p.levels).rev() {
        let region = p.dims.map(|d| d >> l);
        for axis in [0, 1, 2] {
            haar_pass(&mut data, p.dims, region, axis, true);
        }
    }
    Ok(data)
}

/// Mean absolute difference of all pyramid coefficients.
pub fn wavelet_loss<F: Real>(a: &[F], b: &[F], dims: [usize; 3], levels: usize) -> Result<F> {
    Ok(wavelet_loss_grad(a, b, dims, levels)?.0)
}

pub fn wavelet_loss_grad<F: Real>(a: &[F], b: &[F], dims: [usize; 3], levels: usize) -> Result<(F, Vec<F>)> {
    same_len("wavelet_loss", a, b)?;
    check_haar(a, dims, levels)?;
    // the transform is linear, so compare the pyramid of the difference
    let diff: Vec<F> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let pyr = haar_dwt3(&diff, dims, levels)?;
    let m = F::from_usize(a.len());
    let loss = pyr.coeffs.iter().map(|c| c.abs()).sum::<F>() / m;
    let sign = HaarPyramid {
        dims,
        levels,
        coeffs: pyr.coeffs.iter().map(|&c| sign(c) / m).collect(),
    };
    // orthonormal: the adjoint is the inverse
    Ok((loss, haar_idwt3(&sign)?))
}

fn sign<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn tv_pairs(dims: [usize; 3]) -> usize {
    let [z, y, x] = dims;
    (z - 1) * y * x + z * (y - 1) * x + z * y * (x - 1)
}

/// Anisotropic total variation: mean of `|forward difference|` over every
/// adjacent voxel pair along z, y and x. Zero when no pair exists.
pub fn tv_loss<F: Real>(v: &[F], dims: [usize; 3]) -> Result<F> {
    Ok(tv_loss_grad(v, dims)?.0)
}

pub fn tv_loss_grad<F: Real>(v: &[F], dims: [usize; 3]) -> Result<(F, Vec<F>)> {
    check_dims("tv_loss", v, dims)?;
    let mut grad = vec![F::zero(); v.len()];
    let pairs = tv_pairs(dims);
    if pairs == 0 {
        return Ok((F::zero(), grad));
    }
    let m = F::from_usize(pairs);
    let [nz, ny, nx] = dims;
    let strides = [ny * nx, nx, 1];
    let mut total = F::zero();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                for (axis, &inside) in [z + 1 < nz, y + 1 < ny, x + 1 < nx].iter().enumerate() {
                    if inside {
                        let j = i + strides[axis];
                        let d = v[j] - v[i];
                        total += d.abs();
                        let s = sign(d) / m;
                        grad[j] += s;
                        grad[i] -= s;
                    }
                }
            }
        }
    }
    Ok((total / m, grad))
}

/// Weighted stage-2 loss of `pred` against `target`.
pub fn composite_sc_loss<F: Real>(
    pred: &[F],
    target: &[F],
    dims: [usize; 3],
    w: &LossWeights,
    levels: usize,
) -> Result<LossBreakdown<F>> {
    Ok(composite_sc_loss_grad(pred, target, dims, w, levels)?.0)
}

pub fn composite_sc_loss_grad<F: Real>(
    pred: &[F],
    target: &[F],
    dims: [usize; 3],
    w: &LossWeights,
    levels: usize,
) -> Result<(LossBreakdown<F>, Vec<F>)> {
    w.validate()?;
    check_dims("composite_sc_loss", pred, dims)?;
    let (mse, gm) = mse_loss_grad(pred, target)?;
    let (wavelet, gw) = wavelet_loss_grad(pred, target, dims, levels)?;
    let (tv, gt) = tv_loss_grad(pred, dims)?;
    let (lm, lw, lt) = (F::from_f64(w.mse), F::from_f64(w.wavelet), F::from_f64(w.tv));
    let total = lm * mse + lw * wavelet + lt * tv;
    let grad = (0..pred.len()).map(|i| lm * gm[i] + lw * gw[i] + lt * gt[i]).collect();
    Ok((LossBreakdown { mse, wavelet, tv, total }, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_loss_of_zero_vs_ones() {
        assert_eq!(eps_loss(&[0.0f64; 5], &[1.0; 5]).unwrap(), 1.0);
        assert_eq!(eps_loss(&[0.3f64; 5], &[0.3; 5]).unwrap(), 0.0);
        assert!(eps_loss(&[0.0f64; 5], &[1.0; 4]).is_err());
    }

    #[test]
    fn single_impulse_haar() {
        let mut v = vec![0.0f64; 8];
        v[0] = 1.0;
        let p = haar_dwt3(&v, [2, 2, 2], 1).unwrap();
        let k = core::f64::consts::FRAC_1_SQRT_2.powi(3);
        assert!(p.coeffs.iter().all(|c| (c.abs() - k).abs() < 1e-15));
    }

    #[test]
    fn constant_volume_pyramid() {
        let v = vec![0.5f64; 4 * 8 * 8];
        let p = haar_dwt3(&v, [4, 8, 8], 2).unwrap();
        for level in 1..=2 {
            for band in 1..8 {
                assert!(p.band(level, band).unwrap().iter().all(|&c| c == 0.0 || c.abs() < 1e-15));
            }
        }
        for a in p.approximation() {
            assert!((a - 0.5 * 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn haar_divisibility() {
        assert!(haar_dwt3(&[0.0f64; 12], [1, 2, 6], 1).is_err());
        assert!(haar_dwt3(&[0.0f64; 16], [2, 2, 4], 1).is_ok());
        assert!(haar_dwt3(&[0.0f64; 16], [2, 2, 4], 2).is_err());
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_loss(&[0.0f64, 1.0], [1, 1, 2]).unwrap(), 1.0);
        assert_eq!(tv_loss(&[3.0f64; 27], [3, 3, 3]).unwrap(), 0.0);
        assert_eq!(tv_loss(&[7.0f64], [1, 1, 1]).unwrap(), 0.0);
        let checker: Vec<f64> = (0..8).map(|i| (((i >> 2) + (i >> 1) + i) & 1) as f64).collect();
        assert_eq!(tv_loss(&checker, [2, 2, 2]).unwrap(), 1.0);
    }

    #[test]
    fn zero_weights_give_zero() {
        let a: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..64).map(|i| (i as f64).cos()).collect();
        let w = LossWeights { mse: 0.0, wavelet: 0.0, tv: 0.0 };
        assert_eq!(composite_sc_loss(&a, &b, [4, 4, 4], &w, 2).unwrap().total, 0.0);
        let neg = LossWeights { mse: -1.0, ..w };
        assert!(composite_sc_loss(&a, &b, [4, 4, 4], &neg, 2).is_err());
    }
}

//! Dense row-major tensors and the handful of layer kernels the networks are
//! built from. Every kernel has a matching backward that accumulates into
//! caller-provided gradient buffers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::{lit, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::from_vec", n, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::from_f64(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Uniform access to the named tensors of a parameter struct.
///
/// The visiting order is fixed per type; optimizers and checkpoints rely on
/// `tensors` and `tensors_mut` enumerating in the same order.
pub trait ParamSet<F: Real> {
    fn tensors(&self) -> Vec<(String, &Tensor<F>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.fill(F::zero());
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src: Vec<&Tensor<F>> = other.tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, &v) in dst.data.iter_mut().zip(&s.data) {
                *d += v;
            }
        }
    }

    fn scale(&mut self, k: F) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= k);
        }
    }
}

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[r] = W x[r] + b` for `rows` row vectors; `W` is `(out, in)`.
pub fn linear<F: Real>(w: &Tensor<F>, b: Option<&Tensor<F>>, x: &[F], rows: usize) -> Vec<F> {
    let (out, inp) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), rows * inp);
    let mut y = vec![F::zero(); rows * out];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let yr = &mut y[r * out..(r + 1) * out];
        for o in 0..out {
            let mut acc = dot(&w.data[o * inp..(o + 1) * inp], xr);
            if let Some(b) = b {
                acc += b.data[o];
            }
            yr[o] = acc;
        }
    }
    y
}

/// Backward of [`linear`]: accumulates `dW`, `db` and returns `dx`.
pub fn linear_backward<F: Real>(
    w: &Tensor<F>,
    x: &[F],
    dy: &[F],
    rows: usize,
    dw: &mut Tensor<F>,
    db: Option<&mut Tensor<F>>,
) -> Vec<F> {
    let (out, inp) = (w.shape[0], w.shape[1]);
    let mut dx = vec![F::zero(); rows * inp];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let dyr = &dy[r * out..(r + 1) * out];
        let dxr = &mut dx[r * inp..(r + 1) * inp];
        for o in 0..out {
            let g = dyr[o];
            if g == F::zero() {
                continue;
            }
            axpy(g, &w.data[o * inp..(o + 1) * inp], dxr);
            axpy(g, xr, &mut dw.data[o * inp..(o + 1) * inp]);
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            for o in 0..out {
                db.data[o] += dy[r * out + o];
            }
        }
    }
    dx
}

pub const RMS_EPS: f64 = 1e-6;

/// Per-row RMS normalization with a learned gain. Returns the output and the
/// per-row reciprocal RMS needed by the backward pass.
pub fn rms_norm<F: Real>(x: &[F], gain: &Tensor<F>, rows: usize) -> (Vec<F>, Vec<F>) {
    let d = gain.len();
    let mut y = vec![F::zero(); rows * d];
    let mut inv = vec![F::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = dot(xr, xr) / F::from_usize(d);
        let ir = F::one() / (ms + lit(RMS_EPS)).sqrt();
        inv[r] = ir;
        for i in 0..d {
            y[r * d + i] = gain.data[i] * xr[i] * ir;
        }
    }
    (y, inv)
}

pub fn rms_norm_backward<F: Real>(
    x: &[F],
    gain: &Tensor<F>,
    inv: &[F],
    dy: &[F],
    rows: usize,
    dgain: &mut Tensor<F>,
) -> Vec<F> {
    let d = gain.len();
    let mut dx = vec![F::zero(); rows * d];
    let nd = F::from_usize(d);
    for r in 0..rows {
        let ir = inv[r];
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        // xhat = x * ir ; y = g * xhat
        let mut proj = F::zero();
        for i in 0..d {
            let xhat = xr[i] * ir;
            let dxhat = dyr[i] * gain.data[i];
            dgain.data[i] += dyr[i] * xhat;
            proj += dxhat * xhat;
        }
        proj /= nd;
        for i in 0..d {
            let xhat = xr[i] * ir;
            let dxhat = dyr[i] * gain.data[i];
            dx[r * d + i] = (dxhat - xhat * proj) * ir;
        }
    }
    dx
}

/// Adds the value and exits early on the exact-zero increment so that signed
/// zeros in `base` survive.
#[inline]
pub fn add_preserving_zero<F: Real>(base: F, delta: F) -> F {
    if delta == F::zero() {
        base
    } else {
        base + delta
    }
}

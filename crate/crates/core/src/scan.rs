//! Linear recurrences of the selective state space model.
//!
//! The per-step update `h_t = A_t h_{t-1} + B_t x_t`, `y_t = C_t . h_t` with a
//! diagonal `A_t` is a composition of affine maps. Maps compose associatively,
//!
//! ```text
//! (A, b) o (A', b') = (A * A', A * b' + b)      // (A', b') applied first
//! ```
//!
//! so the whole prefix can be evaluated with a work-efficient up-sweep /
//! down-sweep tree as well as with the plain left-to-right loop. Both kernels
//! operate on many independent "lanes" (channel x state pairs) at once; the
//! state buffers are laid out `L x lanes`.
//!
//! The gradient of the recurrence runs the same kind of scan in the opposite
//! direction: with `G_t = dL/dh_t`,
//!
//! ```text
//! G_t = C_t * dy_t + A_{t+1} * G_{t+1},   G_{L-1} = C_{L-1} * dy_{L-1}
//! ```
//!
//! see [`lane_scan_reverse`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::{Error, Result};

/// Which lane-scan kernel to use for the forward recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScanKernel {
    #[default]
    Sequential,
    Parallel,
}

impl ScanKernel {
    pub fn run<F: Real>(self, a: &[F], b: &[F], lanes: usize) -> Vec<F> {
        match self {
            ScanKernel::Sequential => lane_scan_sequential(a, b, lanes),
            ScanKernel::Parallel => lane_scan_parallel(a, b, lanes),
        }
    }
}

/// `h[t] = a[t] * h[t-1] + b[t]` per lane with `h[-1] = 0`.
pub fn lane_scan_sequential<F: Real>(a: &[F], b: &[F], lanes: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    let mut h = vec![F::zero(); a.len()];
    if lanes == 0 || a.is_empty() {
        return h;
    }
    h[..lanes].copy_from_slice(&b[..lanes]);
    let steps = a.len() / lanes;
    for t in 1..steps {
        let (prev, cur) = h.split_at_mut(t * lanes);
        let prev = &prev[(t - 1) * lanes..];
        let cur = &mut cur[..lanes];
        let at = &a[t * lanes..(t + 1) * lanes];
        let bt = &b[t * lanes..(t + 1) * lanes];
        for j in 0..lanes {
            cur[j] = at[j] * prev[j] + bt[j];
        }
    }
    h
}

/// Same result as [`lane_scan_sequential`], evaluated with a Blelloch
/// up-sweep / down-sweep over affine maps. Lengths that are not a power of two
/// are padded with identity maps `(1, 0)`.
pub fn lane_scan_parallel<F: Real>(a: &[F], b: &[F], lanes: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    if lanes == 0 || a.is_empty() {
        return vec![F::zero(); a.len()];
    }
    let steps = a.len() / lanes;
    let padded = steps.next_power_of_two();
    let mut ta = vec![F::one(); padded * lanes];
    let mut tb = vec![F::zero(); padded * lanes];
    ta[..a.len()].copy_from_slice(a);
    tb[..b.len()].copy_from_slice(b);

    // up-sweep: node i accumulates its left sibling's subtree, applied first
    let mut stride = 1;
    while stride < padded {
        let mut i = 2 * stride - 1;
        while i < padded {
            let left = i - stride;
            for j in 0..lanes {
                let (al, bl) = (ta[left * lanes + j], tb[left * lanes + j]);
                let (ar, br) = (ta[i * lanes + j], tb[i * lanes + j]);
                ta[i * lanes + j] = ar * al;
                tb[i * lanes + j] = ar * bl + br;
            }
            i += 2 * stride;
        }
        stride *= 2;
    }

    // down-sweep to exclusive prefixes
    for j in 0..lanes {
        ta[(padded - 1) * lanes + j] = F::one();
        tb[(padded - 1) * lanes + j] = F::zero();
    }
    let mut stride = padded / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < padded {
            let left = i - stride;
            for j in 0..lanes {
                let (al, bl) = (ta[left * lanes + j], tb[left * lanes + j]);
                let (ap, bp) = (ta[i * lanes + j], tb[i * lanes + j]);
                ta[left * lanes + j] = ap;
                tb[left * lanes + j] = bp;
                // left subtree applied after the parent prefix
                ta[i * lanes + j] = al * ap;
                tb[i * lanes + j] = al * bp + bl;
            }
            i += 2 * stride;
        }
        stride /= 2;
    }

    // inclusive state: apply element t to the exclusive prefix (h_{-1} = 0)
    let mut h = vec![F::zero(); a.len()];
    for t in 0..steps {
        for j in 0..lanes {
            let k = t * lanes + j;
            h[k] = a[k] * tb[k] + b[k];
        }
    }
    h
}

/// Reverse recurrence `g[t] = a[t + 1] * g[t + 1] + r[t]`, `g[L-1] = r[L-1]`,
/// evaluated by running `kernel` on the time-reversed sequence.
pub fn lane_scan_reverse<F: Real>(kernel: ScanKernel, a: &[F], r: &[F], lanes: usize) -> Vec<F> {
    if lanes == 0 || a.is_empty() {
        return vec![F::zero(); a.len()];
    }
    let steps = a.len() / lanes;
    let mut ra = vec![F::zero(); a.len()];
    let mut rr = vec![F::zero(); a.len()];
    for s in 0..steps {
        let t = steps - 1 - s;
        rr[s * lanes..(s + 1) * lanes].copy_from_slice(&r[t * lanes..(t + 1) * lanes]);
        if t + 1 < steps {
            ra[s * lanes..(s + 1) * lanes].copy_from_slice(&a[(t + 1) * lanes..(t + 2) * lanes]);
        }
    }
    let g_rev = kernel.run(&ra, &rr, lanes);
    let mut g = vec![F::zero(); a.len()];
    for s in 0..steps {
        let t = steps - 1 - s;
        g[t * lanes..(t + 1) * lanes].copy_from_slice(&g_rev[s * lanes..(s + 1) * lanes]);
    }
    g
}

/// Per-step discretized parameters of one input channel with a diagonal
/// state of size `state_dim`; each buffer is `L x state_dim`.
#[derive(Debug, Clone, Copy)]
pub struct SsmSteps<'a, F> {
    pub a_bar: &'a [F],
    pub b_bar: &'a [F],
    pub c_bar: &'a [F],
    pub state_dim: usize,
}

impl<F: Real> SsmSteps<'_, F> {
    fn check(&self, x: &[F]) -> Result<()> {
        let want = x.len() * self.state_dim;
        for (name, buf) in [("a_bar", self.a_bar), ("b_bar", self.b_bar), ("c_bar", self.c_bar)] {
            if buf.len() != want {
                return Err(Error::Shape {
                    context: "ssm scan",
                    expected: format!("{name} of length {want}"),
                    found: format!("{}", buf.len()),
                });
            }
        }
        if self.state_dim == 0 {
            return Err(Error::range("state_dim", 0, ">= 1"));
        }
        Ok(())
    }

    fn drive(&self, x: &[F]) -> Vec<F> {
        let n = self.state_dim;
        let mut bx = vec![F::zero(); self.b_bar.len()];
        for (t, &xt) in x.iter().enumerate() {
            for k in 0..n {
                bx[t * n + k] = self.b_bar[t * n + k] * xt;
            }
        }
        bx
    }

    fn readout(&self, h: &[F], len: usize) -> Vec<F> {
        let n = self.state_dim;
        (0..len)
            .map(|t| {
                let mut acc = F::zero();
                for k in 0..n {
                    acc += self.c_bar[t * n + k] * h[t * n + k];
                }
                acc
            })
            .collect()
    }
}

/// Left-to-right evaluation of `h_t = A_t h_{t-1} + B_t x_t`, `y_t = C_t h_t`.
pub fn ssm_scan_sequential<F: Real>(steps: &SsmSteps<'_, F>, x: &[F]) -> Result<Vec<F>> {
    steps.check(x)?;
    let h = lane_scan_sequential(steps.a_bar, &steps.drive(x), steps.state_dim);
    Ok(steps.readout(&h, x.len()))
}

/// Tree evaluation of the same recurrence as [`ssm_scan_sequential`].
pub fn ssm_scan_parallel<F: Real>(steps: &SsmSteps<'_, F>, x: &[F]) -> Result<Vec<F>> {
    steps.check(x)?;
    let h = lane_scan_parallel(steps.a_bar, &steps.drive(x), steps.state_dim);
    Ok(steps.readout(&h, x.len()))
}

/// `forward_scan(x) + reverse(backward_scan(reverse(x)))`. The backward
/// parameters are indexed in the backward scan's own step order.
pub fn bidirectional_scan<F: Real>(fwd: &SsmSteps<'_, F>, bwd: &SsmSteps<'_, F>, x: &[F]) -> Result<Vec<F>> {
    let yf = ssm_scan_sequential(fwd, x)?;
    let rev: Vec<F> = x.iter().rev().copied().collect();
    let yb = ssm_scan_sequential(bwd, &rev)?;
    Ok(yf.iter().zip(yb.iter().rev()).map(|(&a, &b)| a + b).collect())
}

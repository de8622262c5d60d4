//! Spatial consistency network: residual tri-directional selective-scan
//! blocks over 3D volumes.
//!
//! A block normalizes its `(Z, Y, X, C)` input, then for each of three voxel
//! orders runs a bidirectional selective scan over the flattened volume:
//!
//! * `xyz`: `x` fastest, then `y`, then `z` (plain memory order)
//! * `yzx`: `y` fastest, then `z`, then `x`
//! * `zxy`: `z` fastest, then `x`, then `y`
//!
//! The three directional outputs are fused by a linear map over their
//! concatenated channels and added back to the block input. The network
//! lifts the scalar volume to `C` channels, applies `R` blocks and projects
//! back to one channel through a zero-initialized map, with a global skip
//! connection; a fresh network is therefore the identity.
//!
//! Each direction's scan is selective: the step size `delta_t`, input map
//! `B_t` and readout `C_t` are linear functions of the token, and the decay is
//! `A_t = exp(-softplus(a) * delta_t)` with `delta_t = softplus(.) > 0`, so
//! every `A_t` lies in `(0, 1)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng;

use crate::real::{sigmoid, softplus, Real};
use crate::scan::{lane_scan_reverse, ScanKernel};
use crate::tensor::{add_preserving_zero, linear, linear_backward, rms_norm, rms_norm_backward, ParamSet, Tensor};
use crate::volume::Volume3;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanOrder {
    Xyz,
    Yzx,
    Zxy,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 3] = [ScanOrder::Xyz, ScanOrder::Yzx, ScanOrder::Zxy];

    pub fn as_str(self) -> &'static str {
        match self {
            ScanOrder::Xyz => "xyz",
            ScanOrder::Yzx => "yzx",
            ScanOrder::Zxy => "zxy",
        }
    }

    /// `perm[token] = voxel`, where voxel indices are row-major `(z, y, x)`.
    pub fn permutation(self, dims: [usize; 3]) -> Vec<usize> {
        let [nz, ny, nx] = dims;
        let idx = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
        let mut perm = Vec::with_capacity(nz * ny * nx);
        match self {
            ScanOrder::Xyz => perm.extend(0..nz * ny * nx),
            ScanOrder::Yzx => {
                for x in 0..nx {
                    for z in 0..nz {
                        for y in 0..ny {
                            perm.push(idx(z, y, x));
                        }
                    }
                }
            }
            ScanOrder::Zxy => {
                for y in 0..ny {
                    for x in 0..nx {
                        for z in 0..nz {
                            perm.push(idx(z, y, x));
                        }
                    }
                }
            }
        }
        perm
    }
}

impl FromStr for ScanOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" => Ok(ScanOrder::Xyz),
            "yzx" => Ok(ScanOrder::Yzx),
            "zxy" => Ok(ScanOrder::Zxy),
            other => Err(Error::Config(format!("unknown scan order {other:?}"))),
        }
    }
}

/// Flattens a channels-last `(Z, Y, X, C)` volume into tokens in `order`.
/// Returns the tokens and the inverse map `inverse[voxel] = token`.
pub fn scan_order_transform<T: Copy>(
    volume: &[T],
    dims: [usize; 3],
    channels: usize,
    order: ScanOrder,
) -> Result<(Vec<T>, Vec<usize>)> {
    let n = dims.iter().product::<usize>();
    if volume.len() != n * channels {
        return Err(Error::shape("scan_order_transform", n * channels, volume.len()));
    }
    let perm = order.permutation(dims);
    let mut tokens = Vec::with_capacity(volume.len());
    let mut inverse = vec![0; n];
    for (tok, &vox) in perm.iter().enumerate() {
        tokens.extend_from_slice(&volume[vox * channels..(vox + 1) * channels]);
        inverse[vox] = tok;
    }
    Ok((tokens, inverse))
}

/// Restores the `(Z, Y, X, C)` layout from tokens produced by
/// [`scan_order_transform`].
pub fn inverse_scan_order<T: Copy>(tokens: &[T], inverse: &[usize], channels: usize) -> Result<Vec<T>> {
    if tokens.len() != inverse.len() * channels {
        return Err(Error::shape("inverse_scan_order", inverse.len() * channels, tokens.len()));
    }
    let mut out = Vec::with_capacity(tokens.len());
    for &tok in inverse {
        out.extend_from_slice(&tokens[tok * channels..(tok + 1) * channels]);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TriDirConfig {
    pub channels: usize,
    pub state_dim: usize,
    pub blocks: usize,
    pub scan: ScanKernel,
}

impl Default for TriDirConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            state_dim: 8,
            blocks: 2,
            scan: ScanKernel::Sequential,
        }
    }
}

impl TriDirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.state_dim == 0 {
            return Err(Error::Config("channels and state_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Selective SSM parameters of one scan orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<F> {
    /// `(C, n)`; decay rate is `softplus(a)`.
    pub a: Tensor<F>,
    /// `(C, C)` and `(C)`: `delta = softplus(w_delta u + b_delta)`.
    pub w_delta: Tensor<F>,
    pub b_delta: Tensor<F>,
    /// `(n, C)` input map `B_t = w_b u`.
    pub w_b: Tensor<F>,
    /// `(n, C)` readout `C_t = w_c u`.
    pub w_c: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionParams<F> {
    pub w_in: Tensor<F>,
    pub b_in: Tensor<F>,
    pub fwd: SsmParams<F>,
    pub bwd: SsmParams<F>,
    pub w_out: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriDirBlockParams<F> {
    pub norm: Tensor<F>,
    /// Indexed like [`ScanOrder::ALL`].
    pub dirs: [DirectionParams<F>; 3],
    /// `(C, 3C)`, columns grouped by direction.
    pub fuse_w: Tensor<F>,
    pub fuse_b: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriDirNetParams<F> {
    pub lift_w: Tensor<F>,
    pub lift_b: Tensor<F>,
    pub blocks: Vec<TriDirBlockParams<F>>,
    pub proj_w: Tensor<F>,
    pub proj_b: Tensor<F>,
}

fn inv_softplus(y: f64) -> f64 {
    // log(e^y - 1)
    y + (-(-y).exp()).ln_1p()
}

impl<F: Real> SsmParams<F> {
    fn init<R: Rng + ?Sized>(c: usize, n: usize, rng: &mut R) -> Self {
        let mut a = Tensor::zeros(&[c, n]);
        for ci in 0..c {
            for k in 0..n {
                a.data[ci * n + k] = F::from_f64(inv_softplus((k + 1) as f64));
            }
        }
        let mut b_delta = Tensor::zeros(&[c]);
        for ci in 0..c {
            // step sizes log-uniform in [1e-2, 1e-1]
            let u: f64 = rng.random();
            let dt = (0.01f64.ln() + u * (0.1f64.ln() - 0.01f64.ln())).exp();
            b_delta.data[ci] = F::from_f64(inv_softplus(dt));
        }
        let s = 1.0 / (c as f64).sqrt();
        Self {
            a,
            w_delta: Tensor::randn(&[c, c], 0.1 * s, rng),
            b_delta,
            w_b: Tensor::randn(&[n, c], s, rng),
            w_c: Tensor::randn(&[n, c], s, rng),
        }
    }

    fn cast<G: Real>(&self) -> SsmParams<G> {
        SsmParams {
            a: self.a.cast(),
            w_delta: self.w_delta.cast(),
            b_delta: self.b_delta.cast(),
            w_b: self.w_b.cast(),
            w_c: self.w_c.cast(),
        }
    }

    fn tensors(&self) -> [&Tensor<F>; 5] {
        [&self.a, &self.w_delta, &self.b_delta, &self.w_b, &self.w_c]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 5] {
        [&mut self.a, &mut self.w_delta, &mut self.b_delta, &mut self.w_b, &mut self.w_c]
    }
}

const SSM_NAMES: [&str; 5] = ["a", "w_delta", "b_delta", "w_b", "w_c"];

impl<F: Real> DirectionParams<F> {
    fn init<R: Rng + ?Sized>(c: usize, n: usize, rng: &mut R) -> Self {
        let s = 1.0 / (c as f64).sqrt();
        Self {
            w_in: Tensor::randn(&[c, c], s, rng),
            b_in: Tensor::zeros(&[c]),
            fwd: SsmParams::init(c, n, rng),
            bwd: SsmParams::init(c, n, rng),
            w_out: Tensor::randn(&[c, c], s, rng),
        }
    }
}

impl<F: Real> TriDirNetParams<F> {
    pub fn init<R: Rng + ?Sized>(cfg: &TriDirConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, n) = (cfg.channels, cfg.state_dim);
        let blocks = (0..cfg.blocks)
            .map(|_| TriDirBlockParams {
                norm: Tensor::filled(&[c], F::one()),
                dirs: [
                    DirectionParams::init(c, n, rng),
                    DirectionParams::init(c, n, rng),
                    DirectionParams::init(c, n, rng),
                ],
                fuse_w: Tensor::randn(&[c, 3 * c], 0.5 / ((3 * c) as f64).sqrt(), rng),
                fuse_b: Tensor::zeros(&[c]),
            })
            .collect();
        Ok(Self {
            lift_w: Tensor::randn(&[c], 1.0, rng),
            lift_b: Tensor::randn(&[c], 1.0, rng),
            blocks,
            proj_w: Tensor::zeros(&[c]),
            proj_b: Tensor::zeros(&[1]),
        })
    }

    pub fn cast<G: Real>(&self) -> TriDirNetParams<G> {
        let dir = |d: &DirectionParams<F>| DirectionParams {
            w_in: d.w_in.cast(),
            b_in: d.b_in.cast(),
            fwd: d.fwd.cast(),
            bwd: d.bwd.cast(),
            w_out: d.w_out.cast(),
        };
        TriDirNetParams {
            lift_w: self.lift_w.cast(),
            lift_b: self.lift_b.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| TriDirBlockParams {
                    norm: b.norm.cast(),
                    dirs: [dir(&b.dirs[0]), dir(&b.dirs[1]), dir(&b.dirs[2])],
                    fuse_w: b.fuse_w.cast(),
                    fuse_b: b.fuse_b.cast(),
                })
                .collect(),
            proj_w: self.proj_w.cast(),
            proj_b: self.proj_b.cast(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_grad();
        g
    }

    pub fn expected_shapes(cfg: &TriDirConfig) -> Vec<(String, Vec<usize>)> {
        let (c, n) = (cfg.channels, cfg.state_dim);
        let mut v = vec![("lift.w".into(), vec![c]), ("lift.b".into(), vec![c])];
        for b in 0..cfg.blocks {
            v.push((format!("blocks.{b}.norm"), vec![c]));
            for order in ScanOrder::ALL {
                let o = order.as_str();
                v.push((format!("blocks.{b}.{o}.w_in"), vec![c, c]));
                v.push((format!("blocks.{b}.{o}.b_in"), vec![c]));
                for side in ["fwd", "bwd"] {
                    for (name, shape) in SSM_NAMES.iter().zip([vec![c, n], vec![c, c], vec![c], vec![n, c], vec![n, c]]) {
                        v.push((format!("blocks.{b}.{o}.{side}.{name}"), shape));
                    }
                }
                v.push((format!("blocks.{b}.{o}.w_out"), vec![c, c]));
            }
            v.push((format!("blocks.{b}.fuse.w"), vec![c, 3 * c]));
            v.push((format!("blocks.{b}.fuse.b"), vec![c]));
        }
        v.push(("proj.w".into(), vec![c]));
        v.push(("proj.b".into(), vec![1]));
        v
    }

    pub fn check_shapes(&self, cfg: &TriDirConfig) -> Result<()> {
        let found: Vec<(String, Vec<usize>)> = self.tensors().into_iter().map(|(n, t)| (n, t.shape.clone())).collect();
        if found != Self::expected_shapes(cfg) {
            return Err(Error::Config("tri-directional parameters do not match the configuration".into()));
        }
        Ok(())
    }
}

impl<F: Real> ParamSet<F> for TriDirNetParams<F> {
    fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v: Vec<(String, &Tensor<F>)> = vec![("lift.w".into(), &self.lift_w), ("lift.b".into(), &self.lift_b)];
        for (b, blk) in self.blocks.iter().enumerate() {
            v.push((format!("blocks.{b}.norm"), &blk.norm));
            for (order, dir) in ScanOrder::ALL.iter().zip(&blk.dirs) {
                let o = order.as_str();
                v.push((format!("blocks.{b}.{o}.w_in"), &dir.w_in));
                v.push((format!("blocks.{b}.{o}.b_in"), &dir.b_in));
                for (side, ssm) in [("fwd", &dir.fwd), ("bwd", &dir.bwd)] {
                    for (name, t) in SSM_NAMES.iter().zip(ssm.tensors()) {
                        v.push((format!("blocks.{b}.{o}.{side}.{name}"), t));
                    }
                }
                v.push((format!("blocks.{b}.{o}.w_out"), &dir.w_out));
            }
            v.push((format!("blocks.{b}.fuse.w"), &blk.fuse_w));
            v.push((format!("blocks.{b}.fuse.b"), &blk.fuse_b));
        }
        v.push(("proj.w".into(), &self.proj_w));
        v.push(("proj.b".into(), &self.proj_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut v: Vec<&mut Tensor<F>> = vec![&mut self.lift_w, &mut self.lift_b];
        for blk in self.blocks.iter_mut() {
            v.push(&mut blk.norm);
            for dir in blk.dirs.iter_mut() {
                v.push(&mut dir.w_in);
                v.push(&mut dir.b_in);
                v.extend(dir.fwd.tensors_mut());
                v.extend(dir.bwd.tensors_mut());
                v.push(&mut dir.w_out);
            }
            v.push(&mut blk.fuse_w);
            v.push(&mut blk.fuse_b);
        }
        v.push(&mut self.proj_w);
        v.push(&mut self.proj_b);
        v
    }
}

struct SsmCache<F> {
    u: Vec<F>,
    z: Vec<F>,
    delta: Vec<F>,
    bv: Vec<F>,
    cv: Vec<F>,
    a_bar: Vec<F>,
    h: Vec<F>,
}

/// Selective scan over `l` tokens of width `c` (token order). Returns `l x c`.
fn ssm_forward<F: Real>(p: &SsmParams<F>, kernel: ScanKernel, u: Vec<F>, l: usize) -> (Vec<F>, SsmCache<F>) {
    let (c, n) = (p.a.shape[0], p.a.shape[1]);
    let z = linear(&p.w_delta, Some(&p.b_delta), &u, l);
    let delta: Vec<F> = z.iter().map(|&v| softplus(v)).collect();
    let bv = linear(&p.w_b, None, &u, l);
    let cv = linear(&p.w_c, None, &u, l);
    let rate: Vec<F> = p.a.data.iter().map(|&v| softplus(v)).collect();
    let lanes = c * n;
    let mut a_bar = vec![F::zero(); l * lanes];
    let mut drive = vec![F::zero(); l * lanes];
    for t in 0..l {
        for ci in 0..c {
            let dt = delta[t * c + ci];
            let ut = u[t * c + ci];
            for k in 0..n {
                let j = t * lanes + ci * n + k;
                a_bar[j] = (-rate[ci * n + k] * dt).exp();
                drive[j] = dt * bv[t * n + k] * ut;
            }
        }
    }
    let h = kernel.run(&a_bar, &drive, lanes);
    let mut y = vec![F::zero(); l * c];
    for t in 0..l {
        for ci in 0..c {
            let mut acc = F::zero();
            for k in 0..n {
                acc += cv[t * n + k] * h[t * lanes + ci * n + k];
            }
            y[t * c + ci] = acc;
        }
    }
    (y, SsmCache { u, z, delta, bv, cv, a_bar, h })
}

/// Backward of [`ssm_forward`]; accumulates into `g` and returns `du`.
fn ssm_backward<F: Real>(p: &SsmParams<F>, kernel: ScanKernel, cache: &SsmCache<F>, dy: &[F], l: usize, g: &mut SsmParams<F>) -> Vec<F> {
    let (c, n) = (p.a.shape[0], p.a.shape[1]);
    let lanes = c * n;
    let SsmCache { u, z, delta, bv, cv, a_bar, h } = cache;
    let mut r = vec![F::zero(); l * lanes];
    let mut dcv = vec![F::zero(); l * n];
    for t in 0..l {
        for ci in 0..c {
            let gy = dy[t * c + ci];
            for k in 0..n {
                let j = t * lanes + ci * n + k;
                r[j] = cv[t * n + k] * gy;
                dcv[t * n + k] += gy * h[j];
            }
        }
    }
    // dL/dh_t, itself a scan running right to left
    let gh = lane_scan_reverse(kernel, a_bar, &r, lanes);

    let rate: Vec<F> = p.a.data.iter().map(|&v| softplus(v)).collect();
    let mut drate = vec![F::zero(); lanes];
    let mut ddelta = vec![F::zero(); l * c];
    let mut dbv = vec![F::zero(); l * n];
    let mut du = vec![F::zero(); l * c];
    for t in 0..l {
        for ci in 0..c {
            let dt = delta[t * c + ci];
            let ut = u[t * c + ci];
            let mut dd = F::zero();
            let mut dut = F::zero();
            for k in 0..n {
                let j = t * lanes + ci * n + k;
                let prev = if t == 0 { F::zero() } else { h[j - lanes] };
                // d a_bar
                let da = gh[j] * prev * a_bar[j];
                drate[ci * n + k] -= da * dt;
                dd -= da * rate[ci * n + k];
                // drive = dt * bv * u
                let gd = gh[j];
                dd += gd * bv[t * n + k] * ut;
                dbv[t * n + k] += gd * dt * ut;
                dut += gd * dt * bv[t * n + k];
            }
            ddelta[t * c + ci] = dd;
            du[t * c + ci] = dut;
        }
    }
    for (i, &dr) in drate.iter().enumerate() {
        g.a.data[i] += dr * sigmoid(p.a.data[i]);
    }
    let dz: Vec<F> = ddelta.iter().zip(z).map(|(&d, &zv)| d * sigmoid(zv)).collect();
    let du_delta = linear_backward(&p.w_delta, u, &dz, l, &mut g.w_delta, Some(&mut g.b_delta));
    let du_b = linear_backward(&p.w_b, u, &dbv, l, &mut g.w_b, None);
    let du_c = linear_backward(&p.w_c, u, &dcv, l, &mut g.w_c, None);
    for i in 0..du.len() {
        du[i] += du_delta[i] + du_b[i] + du_c[i];
    }
    du
}

struct DirCache<F> {
    s: Vec<F>,
    fwd: SsmCache<F>,
    bwd: SsmCache<F>,
}

/// Forward cache of one block.
pub struct BlockCache<F> {
    x: Vec<F>,
    nrm: Vec<F>,
    inv: Vec<F>,
    dirs: Vec<DirCache<F>>,
    concat: Vec<F>,
}

impl<F: Real> BlockCache<F> {
    /// Concatenated directional outputs, `L x 3C` in voxel order.
    pub fn directional_outputs(&self) -> &[F] {
        &self.concat
    }
}

fn gather<F: Real>(src: &[F], order: &[usize], c: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(src.len());
    for &v in order {
        out.extend_from_slice(&src[v * c..(v + 1) * c]);
    }
    out
}

fn scatter_add<F: Real>(dst: &mut [F], tokens: &[F], order: &[usize], c: usize) {
    for (tok, &v) in order.iter().enumerate() {
        for j in 0..c {
            dst[v * c + j] += tokens[tok * c + j];
        }
    }
}

/// One residual tri-directional block on a channels-last `(Z, Y, X, C)`
/// volume.
pub fn tridir_block_forward<F: Real>(
    p: &TriDirBlockParams<F>,
    kernel: ScanKernel,
    dims: [usize; 3],
    x: &[F],
) -> Result<(Vec<F>, BlockCache<F>)> {
    let c = p.norm.len();
    let l = dims.iter().product::<usize>();
    if x.len() != l * c {
        return Err(Error::shape("tridir_block_forward", l * c, x.len()));
    }
    let (nrm, inv) = rms_norm(x, &p.norm, l);
    let mut concat = vec![F::zero(); l * 3 * c];
    let mut dirs = Vec::with_capacity(3);
    for (d, (order, dp)) in ScanOrder::ALL.iter().zip(&p.dirs).enumerate() {
        let perm = order.permutation(dims);
        let rev: Vec<usize> = perm.iter().rev().copied().collect();
        let u = linear(&dp.w_in, Some(&dp.b_in), &nrm, l);
        let mut s = vec![F::zero(); l * c];
        let (yf, fwd) = ssm_forward(&dp.fwd, kernel, gather(&u, &perm, c), l);
        scatter_add(&mut s, &yf, &perm, c);
        let (yb, bwd) = ssm_forward(&dp.bwd, kernel, gather(&u, &rev, c), l);
        scatter_add(&mut s, &yb, &rev, c);
        let o = linear(&dp.w_out, None, &s, l);
        for v in 0..l {
            concat[v * 3 * c + d * c..v * 3 * c + (d + 1) * c].copy_from_slice(&o[v * c..(v + 1) * c]);
        }
        dirs.push(DirCache { s, fwd, bwd });
    }
    let fused = linear(&p.fuse_w, Some(&p.fuse_b), &concat, l);
    let out = x.iter().zip(&fused).map(|(&a, &b)| add_preserving_zero(a, b)).collect();
    Ok((
        out,
        BlockCache {
            x: x.to_vec(),
            nrm,
            inv,
            dirs,
            concat,
        },
    ))
}

/// Backward of [`tridir_block_forward`]; accumulates into `g`, returns `dx`.
pub fn tridir_block_backward<F: Real>(
    p: &TriDirBlockParams<F>,
    kernel: ScanKernel,
    dims: [usize; 3],
    cache: &BlockCache<F>,
    dout: &[F],
    g: &mut TriDirBlockParams<F>,
) -> Vec<F> {
    let c = p.norm.len();
    let l = dims.iter().product::<usize>();
    let dconcat = linear_backward(&p.fuse_w, &cache.concat, dout, l, &mut g.fuse_w, Some(&mut g.fuse_b));
    let mut dnrm = vec![F::zero(); l * c];
    for (d, order) in ScanOrder::ALL.iter().enumerate() {
        let dp = &p.dirs[d];
        let dc = &cache.dirs[d];
        let gd = &mut g.dirs[d];
        let mut d_o = vec![F::zero(); l * c];
        for v in 0..l {
            d_o[v * c..(v + 1) * c].copy_from_slice(&dconcat[v * 3 * c + d * c..v * 3 * c + (d + 1) * c]);
        }
        let ds = linear_backward(&dp.w_out, &dc.s, &d_o, l, &mut gd.w_out, None);
        let perm = order.permutation(dims);
        let rev: Vec<usize> = perm.iter().rev().copied().collect();
        let mut du = vec![F::zero(); l * c];
        let duf = ssm_backward(&dp.fwd, kernel, &dc.fwd, &gather(&ds, &perm, c), l, &mut gd.fwd);
        scatter_add(&mut du, &duf, &perm, c);
        let dub = ssm_backward(&dp.bwd, kernel, &dc.bwd, &gather(&ds, &rev, c), l, &mut gd.bwd);
        scatter_add(&mut du, &dub, &rev, c);
        let dn = linear_backward(&dp.w_in, &cache.nrm, &du, l, &mut gd.w_in, Some(&mut gd.b_in));
        for (a, b) in dnrm.iter_mut().zip(dn) {
            *a += b;
        }
    }
    let dx_norm = rms_norm_backward(&cache.x, &p.norm, &cache.inv, &dnrm, l, &mut g.norm);
    dout.iter().zip(dx_norm).map(|(&a, b)| a + b).collect()
}

/// Forward cache of the whole network.
pub struct NetCache<F> {
    dims: [usize; 3],
    x: Vec<F>,
    hidden: Vec<Vec<F>>,
    blocks: Vec<BlockCache<F>>,
}

fn check_dims(dims: [usize; 3], len: usize) -> Result<()> {
    if dims.contains(&0) || dims.iter().product::<usize>() != len {
        return Err(Error::shape("tri-directional network input", dims, len));
    }
    Ok(())
}

/// Network forward on a scalar `(Z, Y, X)` volume.
pub fn net_forward<F: Real>(
    net: &TriDirNetParams<F>,
    cfg: &TriDirConfig,
    dims: [usize; 3],
    x: &[F],
) -> Result<(Vec<F>, NetCache<F>)> {
    check_dims(dims, x.len())?;
    let c = cfg.channels;
    if net.lift_w.len() != c || net.blocks.len() != cfg.blocks {
        return Err(Error::Config("network parameters do not match the configuration".into()));
    }
    let l = x.len();
    let mut h = vec![F::zero(); l * c];
    for v in 0..l {
        for j in 0..c {
            h[v * c + j] = net.lift_w.data[j] * x[v] + net.lift_b.data[j];
        }
    }
    let mut hidden = Vec::with_capacity(cfg.blocks + 1);
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for bp in &net.blocks {
        let (next, cache) = tridir_block_forward(bp, cfg.scan, dims, &h)?;
        hidden.push(h);
        blocks.push(cache);
        h = next;
    }
    let mut out = Vec::with_capacity(l);
    for v in 0..l {
        let mut delta = net.proj_b.data[0];
        for j in 0..c {
            delta += net.proj_w.data[j] * h[v * c + j];
        }
        out.push(add_preserving_zero(x[v], delta));
    }
    hidden.push(h);
    Ok((
        out,
        NetCache {
            dims,
            x: x.to_vec(),
            hidden,
            blocks,
        },
    ))
}

/// Network backward: parameter gradients and the input gradient.
pub fn net_backward<F: Real>(
    net: &TriDirNetParams<F>,
    cfg: &TriDirConfig,
    cache: &NetCache<F>,
    dout: &[F],
) -> Result<(TriDirNetParams<F>, Vec<F>)> {
    let l = cache.x.len();
    if dout.len() != l {
        return Err(Error::shape("tri-directional backward (upstream)", l, dout.len()));
    }
    if cache.blocks.len() != net.blocks.len() {
        return Err(Error::Config("forward cache does not match these parameters".into()));
    }
    let c = cfg.channels;
    let mut g = net.zeros_like();
    let h_last = cache.hidden.last().unwrap();
    let mut dx = dout.to_vec();
    let mut dh = vec![F::zero(); l * c];
    for v in 0..l {
        let gv = dout[v];
        g.proj_b.data[0] += gv;
        for j in 0..c {
            g.proj_w.data[j] += gv * h_last[v * c + j];
            dh[v * c + j] = gv * net.proj_w.data[j];
        }
    }
    for (bi, bp) in net.blocks.iter().enumerate().rev() {
        dh = tridir_block_backward(bp, cfg.scan, cache.dims, &cache.blocks[bi], &dh, &mut g.blocks[bi]);
    }
    for v in 0..l {
        for j in 0..c {
            let d = dh[v * c + j];
            g.lift_w.data[j] += d * cache.x[v];
            g.lift_b.data[j] += d;
            dx[v] += d * net.lift_w.data[j];
        }
    }
    Ok((g, dx))
}

const NORMALIZED_TOLERANCE: f32 = 1e-4;

/// Refines one reassembled `(Z, Y, X)` volume. Input samples must be finite
/// and normalized to `[-1, 1]`.
pub fn enhance_volume<F: Real>(net: &TriDirNetParams<F>, cfg: &TriDirConfig, v: &Volume3) -> Result<Volume3> {
    if let Some(bad) = v.data.iter().find(|x| !x.is_finite() || x.abs() > 1.0 + NORMALIZED_TOLERANCE) {
        return Err(Error::range("voxel", bad, "[-1, 1] (normalized volume expected)"));
    }
    let x: Vec<F> = v.data.iter().map(|&s| F::from_f64(s as f64)).collect();
    let (y, _) = net_forward(net, cfg, v.dims, &x)?;
    let data = y.iter().map(|&o| Real::to_f64(o) as f32).collect();
    Volume3::new(v.dims, data)
}

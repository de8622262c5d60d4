//! Boundary-conditioned noise predictor.
//!
//! Every frame of a sequence `[I0, x_1 .. x_N, I1]` is cut into `p x p`
//! patches. Each patch becomes a token carrying a spatial position embedding
//! (its place in the patch grid), a temporal position embedding (its frame
//! index, `0` and `N + 1` for the clean boundary frames) and the diffusion
//! step embedding. Pre-norm transformer blocks attend jointly over all
//! `(N + 2) * G` tokens, so every intermediate token sees every patch of every
//! frame. Only the `N` intermediate frames are projected back to pixels.
//!
//! The output projection starts at zero, so a fresh model predicts `eps = 0`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng;

use crate::real::{gelu, gelu_grad, lit, silu, silu_grad, Real};
use crate::tensor::{dot, linear, linear_backward, rms_norm, rms_norm_backward, ParamSet, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttentionMode {
    /// One attention over all space-time tokens.
    #[default]
    Joint,
    /// Separate spatial and temporal attention. Reserved; rejected by
    /// [`DenoiserConfig::validate`].
    Factorized,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DenoiserConfig {
    /// `(H, W)`.
    pub frame_size: [usize; 2],
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    /// Frames generated between the two boundary frames.
    pub n_intermediate: usize,
    /// Largest diffusion step the model is conditioned on.
    pub max_t: usize,
    /// Hidden width of the feed-forward layers as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub attention: AttentionMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            frame_size: [16, 16],
            patch_size: 4,
            embed_dim: 32,
            num_heads: 2,
            depth: 2,
            n_intermediate: 10,
            max_t: 1000,
            mlp_ratio: 2,
            attention: AttentionMode::Joint,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.frame_size;
        let p = self.patch_size;
        if p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("patch size {p} must divide frame size {h}x{w}")));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.n_intermediate == 0 {
            return Err(Error::Config("n_intermediate must be >= 1".into()));
        }
        if self.max_t == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("max_t and mlp_ratio must be >= 1".into()));
        }
        if self.attention == AttentionMode::Factorized {
            return Err(Error::Config("factorized attention is not supported".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.frame_size[0] / self.patch_size, self.frame_size[1] / self.patch_size)
    }

    /// Tokens per frame.
    pub fn tokens_per_frame(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn frames_in_sequence(&self) -> usize {
        self.n_intermediate + 2
    }

    pub fn frame_len(&self) -> usize {
        self.frame_size[0] * self.frame_size[1]
    }

    fn hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// The clean boundary frames a sequence is conditioned on.
#[derive(Debug, Clone, Copy)]
pub struct ConditionPair<'a, F> {
    pub first: &'a [F],
    pub last: &'a [F],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub norm1: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub norm2: Tensor<F>,
    pub mlp_w1: Tensor<F>,
    pub mlp_b1: Tensor<F>,
    pub mlp_w2: Tensor<F>,
    pub mlp_b2: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F> {
    pub patch_w: Tensor<F>,
    pub patch_b: Tensor<F>,
    pub pos_spatial: Tensor<F>,
    pub pos_temporal: Tensor<F>,
    pub time_w1: Tensor<F>,
    pub time_b1: Tensor<F>,
    pub time_w2: Tensor<F>,
    pub time_b2: Tensor<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub final_norm: Tensor<F>,
    pub out_w: Tensor<F>,
    pub out_b: Tensor<F>,
}

impl<F: Real> DenoiserParams<F> {
    /// Random initialization with a zero output projection.
    pub fn init<R: Rng + ?Sized>(cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let pp = cfg.patch_size * cfg.patch_size;
        let hid = cfg.hidden();
        let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
        let patch_w = Tensor::randn(&[d, pp], inv_sqrt(pp), rng);
        let pos_spatial = Tensor::randn(&[cfg.tokens_per_frame(), d], 0.02, rng);
        let pos_temporal = Tensor::randn(&[cfg.frames_in_sequence(), d], 0.02, rng);
        let time_w1 = Tensor::randn(&[d, d], inv_sqrt(d), rng);
        let time_w2 = Tensor::randn(&[d, d], inv_sqrt(d), rng);
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                norm1: Tensor::filled(&[d], F::one()),
                wq: Tensor::randn(&[d, d], inv_sqrt(d), rng),
                wk: Tensor::randn(&[d, d], inv_sqrt(d), rng),
                wv: Tensor::randn(&[d, d], inv_sqrt(d), rng),
                wo: Tensor::randn(&[d, d], inv_sqrt(d), rng),
                bo: Tensor::zeros(&[d]),
                norm2: Tensor::filled(&[d], F::one()),
                mlp_w1: Tensor::randn(&[hid, d], inv_sqrt(d), rng),
                mlp_b1: Tensor::zeros(&[hid]),
                mlp_w2: Tensor::randn(&[d, hid], inv_sqrt(hid), rng),
                mlp_b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            pos_spatial,
            pos_temporal,
            time_w1,
            time_b1: Tensor::zeros(&[d]),
            time_w2,
            time_b2: Tensor::zeros(&[d]),
            blocks,
            final_norm: Tensor::filled(&[d], F::one()),
            out_w: Tensor::zeros(&[pp, d]),
            out_b: Tensor::zeros(&[pp]),
        })
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &DenoiserConfig) -> Result<()> {
        let expected = Self::expected_shapes(cfg);
        let found: Vec<(String, Vec<usize>)> = self
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        if expected != found {
            return Err(Error::shape("DenoiserParams", expected.len(), found.len()));
        }
        Ok(())
    }

    pub fn expected_shapes(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.embed_dim;
        let pp = cfg.patch_size * cfg.patch_size;
        let hid = cfg.hidden();
        let mut v = vec![
            ("patch.w".into(), vec![d, pp]),
            ("patch.b".into(), vec![d]),
            ("pos.spatial".into(), vec![cfg.tokens_per_frame(), d]),
            ("pos.temporal".into(), vec![cfg.frames_in_sequence(), d]),
            ("time.w1".into(), vec![d, d]),
            ("time.b1".into(), vec![d]),
            ("time.w2".into(), vec![d, d]),
            ("time.b2".into(), vec![d]),
        ];
        for i in 0..cfg.depth {
            for (n, s) in [
                ("norm1", vec![d]),
                ("attn.q", vec![d, d]),
                ("attn.k", vec![d, d]),
                ("attn.v", vec![d, d]),
                ("attn.o", vec![d, d]),
                ("attn.o_bias", vec![d]),
                ("norm2", vec![d]),
                ("mlp.w1", vec![hid, d]),
                ("mlp.b1", vec![hid]),
                ("mlp.w2", vec![d, hid]),
                ("mlp.b2", vec![d]),
            ] {
                v.push((format!("blocks.{i}.{n}"), s));
            }
        }
        v.push(("final_norm".into(), vec![d]));
        v.push(("out.w".into(), vec![pp, d]));
        v.push(("out.b".into(), vec![pp]));
        v
    }

    /// Zero-valued tensors with this structure, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_grad();
        g
    }

    pub fn cast<G: Real>(&self) -> DenoiserParams<G> {
        DenoiserParams {
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            pos_spatial: self.pos_spatial.cast(),
            pos_temporal: self.pos_temporal.cast(),
            time_w1: self.time_w1.cast(),
            time_b1: self.time_b1.cast(),
            time_w2: self.time_w2.cast(),
            time_b2: self.time_b2.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    norm1: b.norm1.cast(),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    bo: b.bo.cast(),
                    norm2: b.norm2.cast(),
                    mlp_w1: b.mlp_w1.cast(),
                    mlp_b1: b.mlp_b1.cast(),
                    mlp_w2: b.mlp_w2.cast(),
                    mlp_b2: b.mlp_b2.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
        }
    }
}

impl<F: Real> ParamSet<F> for DenoiserParams<F> {
    fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v: Vec<(String, &Tensor<F>)> = vec![
            ("patch.w".into(), &self.patch_w),
            ("patch.b".into(), &self.patch_b),
            ("pos.spatial".into(), &self.pos_spatial),
            ("pos.temporal".into(), &self.pos_temporal),
            ("time.w1".into(), &self.time_w1),
            ("time.b1".into(), &self.time_b1),
            ("time.w2".into(), &self.time_w2),
            ("time.b2".into(), &self.time_b2),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in [
                ("norm1", &b.norm1),
                ("attn.q", &b.wq),
                ("attn.k", &b.wk),
                ("attn.v", &b.wv),
                ("attn.o", &b.wo),
                ("attn.o_bias", &b.bo),
                ("norm2", &b.norm2),
                ("mlp.w1", &b.mlp_w1),
                ("mlp.b1", &b.mlp_b1),
                ("mlp.w2", &b.mlp_w2),
                ("mlp.b2", &b.mlp_b2),
            ] {
                v.push((format!("blocks.{i}.{n}"), t));
            }
        }
        v.push(("final_norm".into(), &self.final_norm));
        v.push(("out.w".into(), &self.out_w));
        v.push(("out.b".into(), &self.out_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut v: Vec<&mut Tensor<F>> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.pos_spatial,
            &mut self.pos_temporal,
            &mut self.time_w1,
            &mut self.time_b1,
            &mut self.time_w2,
            &mut self.time_b2,
        ];
        for b in self.blocks.iter_mut() {
            v.extend([
                &mut b.norm1,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.bo,
                &mut b.norm2,
                &mut b.mlp_w1,
                &mut b.mlp_b1,
                &mut b.mlp_w2,
                &mut b.mlp_b2,
            ]);
        }
        v.push(&mut self.final_norm);
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }
}

/// Splits an `(H, W)` frame into row-major `p x p` patches, each flattened
/// row-major into a vector of length `p^2`.
pub fn patchify<F: Copy>(frame: &[F], height: usize, width: usize, p: usize) -> Result<Vec<F>> {
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::Config(format!("patch size {p} must divide {height}x{width}")));
    }
    if frame.len() != height * width {
        return Err(Error::shape("patchify", height * width, frame.len()));
    }
    let (gh, gw) = (height / p, width / p);
    let mut out = Vec::with_capacity(frame.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let row = (gy * p + py) * width + gx * p;
                out.extend_from_slice(&frame[row..row + p]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Copy + Default>(tokens: &[F], height: usize, width: usize, p: usize) -> Result<Vec<F>> {
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::Config(format!("patch size {p} must divide {height}x{width}")));
    }
    if tokens.len() != height * width {
        return Err(Error::shape("unpatchify", height * width, tokens.len()));
    }
    let (gh, gw) = (height / p, width / p);
    let mut out = vec![F::default(); height * width];
    let mut k = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let row = (gy * p + py) * width + gx * p;
                out[row..row + p].copy_from_slice(&tokens[k..k + p]);
                k += p;
            }
        }
    }
    Ok(out)
}

/// Sinusoidal embedding of diffusion step `t`: `sin(t w_i)` in the first half
/// and `cos(t w_i)` in the second, `w_i = 10000^(-i / half)`. For odd `dim`
/// the last coordinate is zero.
pub fn timestep_embedding<F: Real>(t: usize, dim: usize, max_t: usize) -> Result<Vec<F>> {
    if t == 0 || t > max_t {
        return Err(Error::range("t", t, format!("1..={max_t}")));
    }
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    let ln_base = Float::ln(10000.0f64);
    for i in 0..half {
        let freq = Float::exp(-ln_base * i as f64 / half as f64);
        let arg = t as f64 * freq;
        out[i] = F::from_f64(Float::sin(arg));
        out[i + half] = F::from_f64(Float::cos(arg));
    }
    Ok(out)
}

struct BlockCache<F> {
    x_in: Vec<F>,
    n1: Vec<F>,
    inv1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `heads x L x L` attention probabilities.
    probs: Vec<F>,
    attn: Vec<F>,
    x_mid: Vec<F>,
    n2: Vec<F>,
    inv2: Vec<F>,
    pre_act: Vec<F>,
    act: Vec<F>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache<F> {
    t: usize,
    patches: Vec<F>,
    t_sin: Vec<F>,
    t_pre: Vec<F>,
    t_act: Vec<F>,
    blocks: Vec<BlockCache<F>>,
    x_final: Vec<F>,
    nf: Vec<F>,
    invf: Vec<F>,
}

impl<F: Real> ForwardCache<F> {
    /// Attention probabilities of `block`/`head`, row-major `L x L`.
    pub fn attention(&self, block: usize, head: usize) -> &[F] {
        let b = &self.blocks[block];
        let l = b.inv1.len();
        &b.probs[head * l * l..(head + 1) * l * l]
    }

    pub fn timestep(&self) -> usize {
        self.t
    }
}

fn check_inputs<F: Real>(cfg: &DenoiserConfig, x_noisy: &[F], t: usize, cond: &ConditionPair<'_, F>) -> Result<()> {
    let fl = cfg.frame_len();
    if x_noisy.len() != cfg.n_intermediate * fl {
        return Err(Error::shape("predict_eps (noisy stack)", cfg.n_intermediate * fl, x_noisy.len()));
    }
    if cond.first.len() != fl || cond.last.len() != fl {
        return Err(Error::shape("predict_eps (boundary frames)", fl, (cond.first.len(), cond.last.len())));
    }
    if t == 0 || t > cfg.max_t {
        return Err(Error::range("t", t, format!("1..={}", cfg.max_t)));
    }
    Ok(())
}

/// Predicts the noise in each of the `N` intermediate frames.
pub fn predict_eps<F: Real>(
    params: &DenoiserParams<F>,
    cfg: &DenoiserConfig,
    x_noisy: &[F],
    t: usize,
    cond: &ConditionPair<'_, F>,
) -> Result<Vec<F>> {
    forward(params, cfg, x_noisy, t, cond).map(|(y, _)| y)
}

/// Forward pass returning the prediction and the cache for [`backward`].
pub fn forward<F: Real>(
    params: &DenoiserParams<F>,
    cfg: &DenoiserConfig,
    x_noisy: &[F],
    t: usize,
    cond: &ConditionPair<'_, F>,
) -> Result<(Vec<F>, ForwardCache<F>)> {
    check_inputs(cfg, x_noisy, t, cond)?;
    if params.blocks.len() != cfg.depth {
        return Err(Error::shape("DenoiserParams (depth)", cfg.depth, params.blocks.len()));
    }
    let [h, w] = cfg.frame_size;
    let p = cfg.patch_size;
    let d = cfg.embed_dim;
    let fl = cfg.frame_len();
    let g = cfg.tokens_per_frame();
    let nf = cfg.frames_in_sequence();
    let l = nf * g;
    let pp = p * p;

    let mut patches = Vec::with_capacity(l * pp);
    patches.extend(patchify(cond.first, h, w, p)?);
    for f in 0..cfg.n_intermediate {
        patches.extend(patchify(&x_noisy[f * fl..(f + 1) * fl], h, w, p)?);
    }
    patches.extend(patchify(cond.last, h, w, p)?);

    let t_sin: Vec<F> = timestep_embedding(t, d, cfg.max_t)?;
    let t_pre = linear(&params.time_w1, Some(&params.time_b1), &t_sin, 1);
    let t_act: Vec<F> = t_pre.iter().map(|&v| silu(v)).collect();
    let temb = linear(&params.time_w2, Some(&params.time_b2), &t_act, 1);

    let mut x = linear(&params.patch_w, Some(&params.patch_b), &patches, l);
    for f in 0..nf {
        for gi in 0..g {
            let row = &mut x[(f * g + gi) * d..(f * g + gi + 1) * d];
            let ps = &params.pos_spatial.data[gi * d..(gi + 1) * d];
            let pt = &params.pos_temporal.data[f * d..(f + 1) * d];
            for j in 0..d {
                row[j] += ps[j] + pt[j] + temb[j];
            }
        }
    }

    let mut blocks = Vec::with_capacity(cfg.depth);
    for bp in &params.blocks {
        let (x_next, cache) = block_forward(bp, cfg, x, l);
        blocks.push(cache);
        x = x_next;
    }

    // only the intermediate frames are projected back to pixels
    let rows = cfg.n_intermediate * g;
    let x_int = &x[g * d..(g + rows) * d];
    let (nf_out, invf) = rms_norm(x_int, &params.final_norm, rows);
    let y_tok = linear(&params.out_w, Some(&params.out_b), &nf_out, rows);
    let mut y = Vec::with_capacity(cfg.n_intermediate * fl);
    for f in 0..cfg.n_intermediate {
        y.extend(unpatchify(&y_tok[f * g * pp..(f + 1) * g * pp], h, w, p)?);
    }
    Ok((
        y,
        ForwardCache {
            t,
            patches,
            t_sin,
            t_pre,
            t_act,
            blocks,
            x_final: x,
            nf: nf_out,
            invf,
        },
    ))
}

fn block_forward<F: Real>(bp: &BlockParams<F>, cfg: &DenoiserConfig, x: Vec<F>, l: usize) -> (Vec<F>, BlockCache<F>) {
    let d = cfg.embed_dim;
    let (n1, inv1) = rms_norm(&x, &bp.norm1, l);
    let q = linear(&bp.wq, None, &n1, l);
    let k = linear(&bp.wk, None, &n1, l);
    let v = linear(&bp.wv, None, &n1, l);
    let (attn, probs) = attention_forward(&q, &k, &v, l, d, cfg.num_heads);
    let o = linear(&bp.wo, Some(&bp.bo), &attn, l);
    let x_mid: Vec<F> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
    let (n2, inv2) = rms_norm(&x_mid, &bp.norm2, l);
    let pre_act = linear(&bp.mlp_w1, Some(&bp.mlp_b1), &n2, l);
    let act: Vec<F> = pre_act.iter().map(|&v| gelu(v)).collect();
    let m = linear(&bp.mlp_w2, Some(&bp.mlp_b2), &act, l);
    let x_out: Vec<F> = x_mid.iter().zip(&m).map(|(&a, &b)| a + b).collect();
    (
        x_out,
        BlockCache {
            x_in: x,
            n1,
            inv1,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            n2,
            inv2,
            pre_act,
            act,
        },
    )
}

/// Multi-head scaled dot-product attention over `l` tokens of width `d`.
/// Returns the concatenated head outputs and the `heads x l x l` softmax
/// probabilities.
pub fn attention_forward<F: Real>(q: &[F], k: &[F], v: &[F], l: usize, d: usize, heads: usize) -> (Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).sqrt();
    let mut out = vec![F::zero(); l * d];
    let mut probs = vec![F::zero(); heads * l * l];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..l {
            let qi = &q[i * d + c0..i * d + c0 + dh];
            let row = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
            let mut mx = F::neg_infinity();
            for j in 0..l {
                let s = dot(qi, &k[j * d + c0..j * d + c0 + dh]) * scale;
                row[j] = s;
                if s > mx {
                    mx = s;
                }
            }
            let mut sum = F::zero();
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                sum += *r;
            }
            let inv = F::one() / sum;
            let oi = &mut out[i * d + c0..i * d + c0 + dh];
            for j in 0..l {
                row[j] *= inv;
                let pij = row[j];
                let vj = &v[j * d + c0..j * d + c0 + dh];
                for c in 0..dh {
                    oi[c] += pij * vj[c];
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    d_out: &[F],
    l: usize,
    d: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).sqrt();
    let mut dq = vec![F::zero(); l * d];
    let mut dk = vec![F::zero(); l * d];
    let mut dv = vec![F::zero(); l * d];
    let mut dp = vec![F::zero(); l];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..l {
            let p_row = &probs[(h * l + i) * l..(h * l + i + 1) * l];
            let doi = &d_out[i * d + c0..i * d + c0 + dh];
            let mut acc = F::zero();
            for j in 0..l {
                let vj = &v[j * d + c0..j * d + c0 + dh];
                dp[j] = dot(doi, vj);
                acc += dp[j] * p_row[j];
                let dvj = &mut dv[j * d + c0..j * d + c0 + dh];
                for c in 0..dh {
                    dvj[c] += p_row[j] * doi[c];
                }
            }
            let qi: Vec<F> = q[i * d + c0..i * d + c0 + dh].to_vec();
            for j in 0..l {
                let ds = p_row[j] * (dp[j] - acc) * scale;
                if ds == F::zero() {
                    continue;
                }
                let kj = &k[j * d + c0..j * d + c0 + dh];
                let dqi = &mut dq[i * d + c0..i * d + c0 + dh];
                for c in 0..dh {
                    dqi[c] += ds * kj[c];
                }
                let dkj = &mut dk[j * d + c0..j * d + c0 + dh];
                for c in 0..dh {
                    dkj[c] += ds * qi[c];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Gradients of a scalar loss given its gradient `d_out` with respect to the
/// prediction. Returns parameter gradients and the gradient with respect to
/// the noisy intermediate frames.
pub fn backward<F: Real>(
    params: &DenoiserParams<F>,
    cfg: &DenoiserConfig,
    cache: &ForwardCache<F>,
    d_out: &[F],
) -> Result<(DenoiserParams<F>, Vec<F>)> {
    let [h, w] = cfg.frame_size;
    let p = cfg.patch_size;
    let pp = p * p;
    let d = cfg.embed_dim;
    let fl = cfg.frame_len();
    let g = cfg.tokens_per_frame();
    let nfr = cfg.frames_in_sequence();
    let l = nfr * g;
    let rows = cfg.n_intermediate * g;
    if d_out.len() != cfg.n_intermediate * fl {
        return Err(Error::shape("denoiser backward (upstream)", cfg.n_intermediate * fl, d_out.len()));
    }
    if cache.blocks.len() != params.blocks.len() || cache.x_final.len() != l * d {
        return Err(Error::Config("forward cache does not match these parameters".into()));
    }
    let mut grads = params.zeros_like();

    let mut dy_tok = Vec::with_capacity(rows * pp);
    for f in 0..cfg.n_intermediate {
        dy_tok.extend(patchify(&d_out[f * fl..(f + 1) * fl], h, w, p)?);
    }
    let dnf = linear_backward(&params.out_w, &cache.nf, &dy_tok, rows, &mut grads.out_w, Some(&mut grads.out_b));
    let x_int = &cache.x_final[g * d..(g + rows) * d];
    let dx_int = rms_norm_backward(x_int, &params.final_norm, &cache.invf, &dnf, rows, &mut grads.final_norm);
    let mut dx = vec![F::zero(); l * d];
    dx[g * d..(g + rows) * d].copy_from_slice(&dx_int);

    for (bi, bp) in params.blocks.iter().enumerate().rev() {
        dx = block_backward(bp, cfg, &cache.blocks[bi], &dx, l, &mut grads.blocks[bi]);
    }

    let mut dtemb = vec![F::zero(); d];
    for f in 0..nfr {
        for gi in 0..g {
            let row = &dx[(f * g + gi) * d..(f * g + gi + 1) * d];
            for j in 0..d {
                grads.pos_spatial.data[gi * d + j] += row[j];
                grads.pos_temporal.data[f * d + j] += row[j];
                dtemb[j] += row[j];
            }
        }
    }
    let dpatch = linear_backward(&params.patch_w, &cache.patches, &dx, l, &mut grads.patch_w, Some(&mut grads.patch_b));
    let dt_act = linear_backward(&params.time_w2, &cache.t_act, &dtemb, 1, &mut grads.time_w2, Some(&mut grads.time_b2));
    let dt_pre: Vec<F> = dt_act.iter().zip(&cache.t_pre).map(|(&g, &x)| g * silu_grad(x)).collect();
    linear_backward(&params.time_w1, &cache.t_sin, &dt_pre, 1, &mut grads.time_w1, Some(&mut grads.time_b1));

    let mut dx_noisy = Vec::with_capacity(cfg.n_intermediate * fl);
    for f in 1..=cfg.n_intermediate {
        dx_noisy.extend(unpatchify(&dpatch[f * g * pp..(f + 1) * g * pp], h, w, p)?);
    }
    Ok((grads, dx_noisy))
}

fn block_backward<F: Real>(
    bp: &BlockParams<F>,
    cfg: &DenoiserConfig,
    c: &BlockCache<F>,
    dx_out: &[F],
    l: usize,
    g: &mut BlockParams<F>,
) -> Vec<F> {
    let d = cfg.embed_dim;
    // feed-forward branch
    let dact = linear_backward(&bp.mlp_w2, &c.act, dx_out, l, &mut g.mlp_w2, Some(&mut g.mlp_b2));
    let dpre: Vec<F> = dact.iter().zip(&c.pre_act).map(|(&gv, &x)| gv * gelu_grad(x)).collect();
    let dn2 = linear_backward(&bp.mlp_w1, &c.n2, &dpre, l, &mut g.mlp_w1, Some(&mut g.mlp_b1));
    let dmid_norm = rms_norm_backward(&c.x_mid, &bp.norm2, &c.inv2, &dn2, l, &mut g.norm2);
    let dx_mid: Vec<F> = dx_out.iter().zip(&dmid_norm).map(|(&a, &b)| a + b).collect();
    // attention branch
    let dattn = linear_backward(&bp.wo, &c.attn, &dx_mid, l, &mut g.wo, Some(&mut g.bo));
    let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.probs, &dattn, l, d, cfg.num_heads);
    let mut dn1 = linear_backward(&bp.wq, &c.n1, &dq, l, &mut g.wq, None);
    let dn1k = linear_backward(&bp.wk, &c.n1, &dk, l, &mut g.wk, None);
    let dn1v = linear_backward(&bp.wv, &c.n1, &dv, l, &mut g.wv, None);
    for ((a, &b), &cc) in dn1.iter_mut().zip(&dn1k).zip(&dn1v) {
        *a += b + cc;
    }
    let din_norm = rms_norm_backward(&c.x_in, &bp.norm1, &c.inv1, &dn1, l, &mut g.norm1);
    dx_mid.iter().zip(&din_norm).map(|(&a, &b)| a + b).collect()
}

/// Convenience: squared-error half-norm `0.5 * |y|^2` helper used by tests and
/// gradient checks.
pub fn half_sq_norm<F: Real>(y: &[F]) -> F {
    lit::<F>(0.5) * dot(y, y)
}

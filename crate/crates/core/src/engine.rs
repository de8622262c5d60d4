//! Two-stage training and inference.
//!
//! Stage 1 trains the denoiser on 2D+t slice sequences and samples the
//! intermediate frames of each slice. Stage 2 keeps the denoiser frozen,
//! reassembles its outputs into 3D volumes and trains the tri-directional
//! consistency network against the true volumes.
//!
//! All randomness is drawn from per-step or per-slice ChaCha streams derived
//! from the run seed, so results depend only on the seed and the data.
//! Independent work items (batch examples, slices) go through a
//! [`BatchExecutor`], which may evaluate them in parallel; results are always
//! combined in item order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::denoiser::{self, ConditionPair, DenoiserConfig, DenoiserParams};
use crate::losses::{composite_sc_loss_grad, eps_loss_grad, LossBreakdown, LossWeights, DEFAULT_WAVELET_LEVELS};
use crate::metrics::MetricsConfig;
use crate::optim::{adam_step, lr_schedule, AdamConfig, AdamState, Stage};
use crate::rng::{normal_vec, stream_id, stream_rng};
use crate::schedule::{DdimPlan, NoiseSchedule, SigmaRule};
use crate::synthetic::{inject_misalignment, Misalignment, SyntheticCase, SyntheticSpec};
use crate::tensor::ParamSet;
use crate::tridir::{enhance_volume, net_backward, net_forward, TriDirConfig, TriDirNetParams};
use crate::volume::{assemble_slices, denormalize_volume, normalize_volume, slice_to_2dt, Slice2Dt, Volume3, Volume4D};
use crate::{Error, Result};

const TAG_STAGE1: u8 = 1;
const TAG_SAMPLE: u8 = 2;
const TAG_STAGE2: u8 = 3;
const TAG_INIT: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_rule: SigmaRule,
    pub ddim_steps: usize,
    pub eta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-6,
            beta_end: 1e-2,
            sigma_rule: SigmaRule::Posterior,
            ddim_steps: 50,
            eta: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end, self.sigma_rule)
    }

    pub fn plan(&self) -> Result<DdimPlan> {
        DdimPlan::uniform(self.steps, self.ddim_steps, self.eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LrDecay {
    Constant,
    Linear,
}

impl LrDecay {
    fn stage(self) -> Stage {
        match self {
            LrDecay::Constant => Stage::One,
            LrDecay::Linear => Stage::Two,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Stage1Config {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub decay: LrDecay,
    /// Steps between checkpoints written by the front end; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            adam: AdamConfig::default(),
            decay: LrDecay::Constant,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Stage2Config {
    pub epochs: u64,
    pub adam: AdamConfig,
    pub decay: LrDecay,
    /// Cases held out for validation, taken from the end of the dataset.
    pub validation_cases: usize,
    /// Corruption applied to stage-1 outputs before enhancement.
    pub misalignment: Misalignment,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            adam: AdamConfig::default(),
            decay: LrDecay::Linear,
            validation_cases: 1,
            misalignment: Misalignment { dy: 1, dx: 1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PathsConfig {
    pub data_dir: Option<String>,
    pub stage1_checkpoint: Option<String>,
    pub stage2_checkpoint: Option<String>,
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EngineConfig {
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub tridir: TriDirConfig,
    pub loss: LossWeights,
    pub wavelet_levels: usize,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub synthetic: SyntheticSpec,
    pub metrics: MetricsConfig,
    pub seed: u64,
    pub paths: PathsConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            tridir: TriDirConfig::default(),
            loss: LossWeights::default(),
            wavelet_levels: DEFAULT_WAVELET_LEVELS,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            synthetic: SyntheticSpec {
                dims: [8, 16, 16],
                cases: 6,
                ..SyntheticSpec::default()
            },
            metrics: MetricsConfig::default(),
            seed: 0,
            paths: PathsConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.schedule()?;
        self.schedule.plan()?;
        self.denoiser.validate()?;
        if self.denoiser.max_t < self.schedule.steps {
            return Err(Error::Config(format!(
                "denoiser.max_t = {} is below the schedule length {}",
                self.denoiser.max_t, self.schedule.steps
            )));
        }
        self.tridir.validate()?;
        self.loss.validate()?;
        self.stage1.adam.validate()?;
        self.stage2.adam.validate()?;
        if self.stage1.batch_size == 0 {
            return Err(Error::range("stage1.batch_size", 0, ">= 1"));
        }
        self.synthetic.validate()?;
        if !(self.metrics.max_val > 0.0) {
            return Err(Error::range("metrics.max_val", self.metrics.max_val, "> 0"));
        }
        Ok(())
    }
}

/// Evaluates independent work items, returning results in item order.
pub trait BatchExecutor: Sync {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: &(dyn Fn(&T) -> R + Sync)) -> Vec<R>;

    /// Combines partial results. The default folds strictly left to right.
    fn reduce<G: Send>(&self, items: Vec<G>, add: &(dyn Fn(G, G) -> G + Sync)) -> Option<G> {
        items.into_iter().reduce(add)
    }
}

/// Runs everything on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct SerialExecutor;

impl BatchExecutor for SerialExecutor {
    fn map<T: Sync, R: Send>(&self, items: &[T], f: &(dyn Fn(&T) -> R + Sync)) -> Vec<R> {
        items.iter().map(f).collect()
    }
}

/// Splits every case into its 2D+t slice sequences.
pub fn slice_dataset(cases: &[Volume4D]) -> Result<Vec<Slice2Dt>> {
    let mut out = Vec::new();
    for v in cases {
        for z in 0..v.shape[1] {
            out.push(slice_to_2dt(v, z)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

struct Example {
    seq: usize,
    start: usize,
    t: usize,
    noise: Vec<f32>,
}

/// Stage-1 optimizer loop with resumable state.
pub struct Stage1Trainer<'a> {
    pub cfg: &'a EngineConfig,
    pub schedule: NoiseSchedule,
    pub params: DenoiserParams<f32>,
    pub adam: AdamState<f32>,
    /// Completed optimizer steps.
    pub step: u64,
    data: &'a [Slice2Dt],
}

/// Fresh denoiser parameters for the run seed.
pub fn init_denoiser(cfg: &EngineConfig) -> Result<DenoiserParams<f32>> {
    DenoiserParams::init(&cfg.denoiser, &mut stream_rng(cfg.seed, stream_id(TAG_INIT, 1, 0)))
}

/// Fresh consistency-network parameters for the run seed.
pub fn init_tridir(cfg: &EngineConfig) -> Result<TriDirNetParams<f32>> {
    TriDirNetParams::init(&cfg.tridir, &mut stream_rng(cfg.seed, stream_id(TAG_INIT, 2, 0)))
}

impl<'a> Stage1Trainer<'a> {
    pub fn new(cfg: &'a EngineConfig, data: &'a [Slice2Dt]) -> Result<Self> {
        let params = init_denoiser(cfg)?;
        let adam = AdamState::new(&params);
        Self::resume(cfg, data, params, adam)
    }

    pub fn resume(cfg: &'a EngineConfig, data: &'a [Slice2Dt], params: DenoiserParams<f32>, adam: AdamState<f32>) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg.denoiser)?;
        if !adam.matches(&params) {
            return Err(Error::Config("optimizer state does not match the denoiser".into()));
        }
        if data.is_empty() {
            return Err(Error::Empty("stage-1 dataset"));
        }
        let need = cfg.denoiser.frames_in_sequence();
        for s in data {
            let (h, w) = s.frame_size();
            if [h, w] != cfg.denoiser.frame_size {
                return Err(Error::shape("stage-1 sequence frame size", cfg.denoiser.frame_size, [h, w]));
            }
            if s.frames() < need {
                return Err(Error::range("sequence length", s.frames(), format!(">= {need}")));
            }
        }
        Ok(Self {
            cfg,
            schedule: cfg.schedule.schedule()?,
            step: adam.step,
            params,
            adam,
            data,
        })
    }

    fn draw_batch(&self) -> Vec<Example> {
        let mut rng = stream_rng(self.cfg.seed, stream_id(TAG_STAGE1, self.step, 0));
        let n = self.cfg.denoiser.n_intermediate * self.cfg.denoiser.frame_len();
        let need = self.cfg.denoiser.frames_in_sequence();
        (0..self.cfg.stage1.batch_size)
            .map(|_| {
                let seq = rng.random_range(0..self.data.len());
                let start = rng.random_range(0..=self.data[seq].frames() - need);
                let t = rng.random_range(1..=self.schedule.steps());
                let noise = normal_vec(n, &mut rng);
                Example { seq, start, t, noise }
            })
            .collect()
    }

    fn example_grads(&self, ex: &Example) -> Result<(f64, DenoiserParams<f32>)> {
        let cfg = &self.cfg.denoiser;
        let fl = cfg.frame_len();
        let n = cfg.n_intermediate;
        let seq = &self.data[ex.seq].data;
        let frame = |i: usize| &seq[i * fl..(i + 1) * fl];
        let x0 = &seq[(ex.start + 1) * fl..(ex.start + 1 + n) * fl];
        let cond = ConditionPair {
            first: frame(ex.start),
            last: frame(ex.start + n + 1),
        };
        let x_t = self.schedule.q_sample(x0, ex.t, &ex.noise)?;
        let (eps_hat, cache) = denoiser::forward(&self.params, cfg, &x_t, ex.t, &cond)?;
        let (loss, d) = eps_loss_grad(&eps_hat, &ex.noise)?;
        let (grads, _) = denoiser::backward(&self.params, cfg, &cache, &d)?;
        Ok((loss as f64, grads))
    }

    /// Loss of the next step's batch at the current parameters, without
    /// updating anything.
    pub fn peek_loss<E: BatchExecutor>(&self, exec: &E) -> Result<f64> {
        let batch = self.draw_batch();
        let res = exec.map(&batch, &|ex| self.example_grads(ex).map(|(l, _)| l));
        let mut total = 0.0;
        for r in res {
            total += r?;
        }
        Ok(total / batch.len() as f64)
    }

    pub fn lr(&self) -> Result<f64> {
        let total = self.cfg.stage1.steps.max(self.step + 1);
        lr_schedule(self.cfg.stage1.decay.stage(), self.step, total, self.cfg.stage1.adam.lr)
    }

    pub fn train_step<E: BatchExecutor>(&mut self, exec: &E) -> Result<Stage1LogRow> {
        let lr = self.lr()?;
        let batch = self.draw_batch();
        let results = exec.map(&batch, &|ex| self.example_grads(ex));
        let mut losses = Vec::with_capacity(results.len());
        let mut grads = Vec::with_capacity(results.len());
        for r in results {
            let (l, g) = r?;
            losses.push(l);
            grads.push(g);
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("stage-1 loss at step {}", self.step + 1)));
        }
        let mut g = exec
            .reduce(grads, &|mut a, b| {
                a.accumulate(&b);
                a
            })
            .ok_or(Error::Empty("batch"))?;
        g.scale(1.0 / batch.len() as f32);
        adam_step(&mut self.params, &g, &mut self.adam, &self.cfg.stage1.adam, lr)?;
        self.step += 1;
        Ok(Stage1LogRow { step: self.step, loss, lr })
    }
}

/// Samples the `N` intermediate frames between `first` and `last` with DDIM.
/// Returns `N` frames, row-major, clamped to `[-1, 1]`.
pub fn sample_sequence<R: Rng + ?Sized>(
    params: &DenoiserParams<f32>,
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    plan: &DdimPlan,
    first: &[f32],
    last: &[f32],
    rng: &mut R,
) -> Result<Vec<f32>> {
    let raw = sample_sequence_unclamped(params, cfg, schedule, plan, first, last, rng)?;
    Ok(raw.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

/// [`sample_sequence`] without the final clamp.
pub fn sample_sequence_unclamped<R: Rng + ?Sized>(
    params: &DenoiserParams<f32>,
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    plan: &DdimPlan,
    first: &[f32],
    last: &[f32],
    rng: &mut R,
) -> Result<Vec<f32>> {
    if *plan.timesteps().last().unwrap() != schedule.steps() {
        return Err(Error::Config("DDIM plan does not end at the schedule length".into()));
    }
    let n = cfg.n_intermediate * cfg.frame_len();
    let cond = ConditionPair { first, last };
    let mut x: Vec<f32> = normal_vec(n, rng);
    for (t, t_prev) in plan.transitions() {
        let eps = denoiser::predict_eps(params, cfg, &x, t, &cond)?;
        let noise = if plan.eta > 0.0 { normal_vec(n, rng) } else { Vec::new() };
        x = schedule.ddim_step(&x, t, t_prev, &eps, plan.eta, &noise)?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled frames".into()));
    }
    Ok(x)
}

/// Runs stage 1 on every z-slice of `case` conditioned on its first and last
/// frames. The result has `N + 2` frames; the boundary frames are copied
/// from the input.
pub fn generate_case<E: BatchExecutor>(
    params: &DenoiserParams<f32>,
    cfg: &EngineConfig,
    case: &Volume4D,
    case_index: u64,
    exec: &E,
) -> Result<Volume4D> {
    let dc = &cfg.denoiser;
    let [frames, nz, h, w] = case.shape;
    if frames < 2 {
        return Err(Error::range("input frames", frames, ">= 2"));
    }
    if [h, w] != dc.frame_size {
        return Err(Error::shape("input frame size", dc.frame_size, [h, w]));
    }
    let schedule = cfg.schedule.schedule()?;
    let plan = cfg.schedule.plan()?;
    let fl = h * w;
    let out_frames = dc.frames_in_sequence();
    let zs: Vec<usize> = (0..nz).collect();
    let slices = exec.map(&zs, &|&z| -> Result<Slice2Dt> {
        let first = &case.data[case.index(0, z, 0, 0)..][..fl];
        let last = &case.data[case.index(frames - 1, z, 0, 0)..][..fl];
        let mut rng = stream_rng(cfg.seed, stream_id(TAG_SAMPLE, case_index, z as u64));
        let mid = sample_sequence(params, dc, &schedule, &plan, first, last, &mut rng)?;
        let mut data = Vec::with_capacity(out_frames * fl);
        data.extend_from_slice(first);
        data.extend_from_slice(&mid);
        data.extend_from_slice(last);
        Ok(Slice2Dt {
            data,
            z_index: z,
            parent_shape: [out_frames, nz, h, w],
        })
    });
    let slices = slices.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = assemble_slices(&slices)?;
    out.spacing = case.spacing;
    out.intensity_range = case.intensity_range;
    out.normalized = case.normalized;
    Ok(out)
}

/// Applies the consistency network to every frame of a normalized volume.
pub fn enhance_case<E: BatchExecutor>(net: &TriDirNetParams<f32>, cfg: &TriDirConfig, v: &Volume4D, exec: &E) -> Result<Volume4D> {
    let ts: Vec<usize> = (0..v.frames()).collect();
    let frames = exec.map(&ts, &|&t| enhance_volume(net, cfg, &v.frame(t)));
    let frames = frames.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = Volume4D::from_frames(&frames)?;
    out.spacing = v.spacing;
    out.intensity_range = v.intensity_range;
    out.normalized = v.normalized;
    Ok(out)
}

/// Two input frames (or a longer sequence, of which the first and last frame
/// are used) to an `N + 2` frame sequence: normalize, generate per slice,
/// enhance per frame, denormalize. Input that is already normalized stays
/// normalized.
pub fn run_pipeline<E: BatchExecutor>(
    cfg: &EngineConfig,
    denoiser: &DenoiserParams<f32>,
    net: &TriDirNetParams<f32>,
    input: &Volume4D,
    exec: &E,
) -> Result<Volume4D> {
    cfg.validate()?;
    denoiser.check_shapes(&cfg.denoiser)?;
    net.check_shapes(&cfg.tridir)?;
    let norm = normalize_volume(input)?;
    let generated = generate_case(denoiser, cfg, &norm, 0, exec)?;
    let enhanced = enhance_case(net, &cfg.tridir, &generated, exec)?;
    if input.normalized {
        Ok(enhanced)
    } else {
        Ok(denormalize_volume(&enhanced))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2LogRow {
    /// Update count for training rows, epoch for validation rows.
    pub step: u64,
    pub mse: f64,
    pub wavelet: f64,
    pub tv: f64,
    pub total: f64,
}

impl Stage2LogRow {
    fn from_breakdown(step: u64, b: &LossBreakdown<f32>) -> Self {
        Self {
            step,
            mse: b.mse as f64,
            wavelet: b.wavelet as f64,
            tv: b.tv as f64,
            total: b.total as f64,
        }
    }
}

/// One stage-2 case: the corrupted stage-1 output and the truth, per frame.
#[derive(Debug, Clone)]
pub struct Stage2Case {
    pub name: String,
    pub inputs: Vec<Volume3>,
    pub targets: Vec<Volume3>,
}

/// Generates the frozen stage-1 output of each case and pairs it with the
/// ground truth. Ground-truth cases must have exactly `N + 2` frames.
pub fn prepare_stage2<E: BatchExecutor>(
    denoiser: &DenoiserParams<f32>,
    cfg: &EngineConfig,
    cases: &[SyntheticCase],
    exec: &E,
) -> Result<Vec<Stage2Case>> {
    let need = cfg.denoiser.frames_in_sequence();
    let levels = cfg.wavelet_levels;
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if c.volume.frames() != need {
                return Err(Error::range("ground-truth frames", c.volume.frames(), format!("= {need}")));
            }
            let dims = c.volume.spatial_dims();
            if dims.iter().any(|d| d % (1 << levels) != 0) {
                return Err(Error::shape("stage-2 volume dims (divisible by 2^levels)", levels, dims));
            }
            let truth = normalize_volume(&c.volume)?;
            let generated = generate_case(denoiser, cfg, &truth, i as u64, exec)?;
            let inputs = (0..need)
                .map(|t| inject_misalignment(&generated.frame(t), cfg.stage2.misalignment))
                .collect();
            let targets = (0..need).map(|t| truth.frame(t)).collect();
            Ok(Stage2Case {
                name: c.name.clone(),
                inputs,
                targets,
            })
        })
        .collect()
}

pub struct Stage2Trainer<'a> {
    pub cfg: &'a EngineConfig,
    pub net: TriDirNetParams<f32>,
    pub adam: AdamState<f32>,
    pub epoch: u64,
    pub updates: u64,
    train: &'a [Stage2Case],
    val: &'a [Stage2Case],
}

fn to_f32_volume(v: &Volume3) -> &[f32] {
    &v.data
}

impl<'a> Stage2Trainer<'a> {
    /// Splits `cases` into training and validation sets.
    pub fn new(cfg: &'a EngineConfig, cases: &'a [Stage2Case]) -> Result<Self> {
        cfg.validate()?;
        let nv = cfg.stage2.validation_cases;
        if cases.len() <= nv {
            return Err(Error::range(
                "stage-2 cases",
                cases.len(),
                format!("> validation_cases = {nv}"),
            ));
        }
        let (train, val) = cases.split_at(cases.len() - nv);
        let net = init_tridir(cfg)?;
        let adam = AdamState::new(&net);
        Ok(Self {
            cfg,
            net,
            adam,
            epoch: 0,
            updates: 0,
            train,
            val,
        })
    }

    fn total_updates(&self) -> u64 {
        let per_epoch: usize = self.train.iter().map(|c| c.inputs.len()).sum();
        self.cfg.stage2.epochs * per_epoch as u64
    }

    fn loss_grad(&self, input: &Volume3, target: &Volume3) -> Result<(LossBreakdown<f32>, TriDirNetParams<f32>)> {
        let tc = &self.cfg.tridir;
        let (pred, cache) = net_forward(&self.net, tc, input.dims, to_f32_volume(input))?;
        let (b, d) = composite_sc_loss_grad(&pred, &target.data, input.dims, &self.cfg.loss, self.cfg.wavelet_levels)?;
        if !b.total.is_finite() {
            return Err(Error::NonFinite("stage-2 loss".into()));
        }
        let (g, _) = net_backward(&self.net, tc, &cache, &d)?;
        Ok((b, g))
    }

    /// Mean validation losses of the enhanced volumes.
    pub fn validate<E: BatchExecutor>(&self, exec: &E) -> Result<Stage2LogRow> {
        let pairs: Vec<(&Volume3, &Volume3)> = self.val.iter().flat_map(|c| c.inputs.iter().zip(&c.targets)).collect();
        let tc = &self.cfg.tridir;
        let res = exec.map(&pairs, &|(x, y)| -> Result<LossBreakdown<f32>> {
            let (pred, _) = net_forward(&self.net, tc, x.dims, &x.data)?;
            composite_sc_loss_grad(&pred, &y.data, x.dims, &self.cfg.loss, self.cfg.wavelet_levels).map(|r| r.0)
        });
        let mut acc = [0.0f64; 4];
        for r in res {
            let b = r?;
            for (a, v) in acc.iter_mut().zip([b.mse, b.wavelet, b.tv, b.total]) {
                *a += v as f64;
            }
        }
        let n = pairs.len() as f64;
        Ok(Stage2LogRow {
            step: self.epoch,
            mse: acc[0] / n,
            wavelet: acc[1] / n,
            tv: acc[2] / n,
            total: acc[3] / n,
        })
    }

    /// One pass over the training volumes, one Adam update per volume, in a
    /// per-epoch shuffled order.
    pub fn train_epoch(&mut self) -> Result<Vec<Stage2LogRow>> {
        let mut order: Vec<(usize, usize)> = self
            .train
            .iter()
            .enumerate()
            .flat_map(|(c, case)| (0..case.inputs.len()).map(move |t| (c, t)))
            .collect();
        let mut rng = stream_rng(self.cfg.seed, stream_id(TAG_STAGE2, self.epoch, 0));
        order.shuffle(&mut rng);
        let total = self.total_updates().max(self.updates + order.len() as u64);
        let mut rows = Vec::with_capacity(order.len());
        for (c, t) in order {
            let case = &self.train[c];
            let lr = lr_schedule(self.cfg.stage2.decay.stage(), self.updates, total, self.cfg.stage2.adam.lr)?;
            let (b, g) = self.loss_grad(&case.inputs[t], &case.targets[t])?;
            adam_step(&mut self.net, &g, &mut self.adam, &self.cfg.stage2.adam, lr)?;
            self.updates += 1;
            rows.push(Stage2LogRow::from_breakdown(self.updates, &b));
        }
        self.epoch += 1;
        Ok(rows)
    }
}

/// Result of [`train_stage2`].
pub struct Stage2Outcome {
    pub net: TriDirNetParams<f32>,
    pub adam: AdamState<f32>,
    pub train_log: Vec<Stage2LogRow>,
    /// Row `e` is the validation loss after `e` epochs; row 0 is the
    /// untrained network.
    pub val_log: Vec<Stage2LogRow>,
}

pub fn train_stage2<E: BatchExecutor>(cfg: &EngineConfig, cases: &[Stage2Case], exec: &E) -> Result<Stage2Outcome> {
    let mut tr = Stage2Trainer::new(cfg, cases)?;
    let mut val_log = vec![tr.validate(exec)?];
    let mut train_log = Vec::new();
    for _ in 0..cfg.stage2.epochs {
        train_log.extend(tr.train_epoch()?);
        val_log.push(tr.validate(exec)?);
    }
    Ok(Stage2Outcome {
        net: tr.net,
        adam: tr.adam,
        train_log,
        val_log,
    })
}

/// Ground-truth synthetic cases for the run seed.
pub fn synthetic_cases(cfg: &EngineConfig, spec: &SyntheticSpec) -> Result<Vec<SyntheticCase>> {
    crate::synthetic::make_synthetic(spec, &mut stream_rng(cfg.seed, stream_id(TAG_INIT, 3, 0)))
}

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand};
use log::{debug, info, warn};
use tssc_core::engine::{
    enhance_case, generate_case, prepare_stage2, run_pipeline, slice_dataset, synthetic_cases, EngineConfig,
    Stage1Trainer, Stage2Trainer,
};
use tssc_core::metrics::{aggregate, evaluate_case};
use tssc_core::synthetic::SyntheticCase;
use tssc_core::volume::{assemble_slices, denormalize_volume, normalize_volume, slice_to_2dt, Volume4D};

use crate::checkpoint::{load_denoiser, load_tridir, params_digest, save_denoiser, save_tridir, Checkpoint};
use crate::config::load_config;
use crate::error::{exit, Result, TsscError};
use crate::exec::RayonExecutor;
use crate::io::{case_name, file_pair, list_volumes, load_cases, load_slice, load_volume4d, save_slice, save_volume4d, VolumeMeta};
use crate::logs::{write_metrics, CsvLog, Stage1Row, Stage2Row, ValidationRow};
use crate::preview::write_preview;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  usage or configuration error
  3  I/O or file-format error
  4  numeric failure (non-finite values, shape mismatch, degenerate data)

Volumes are `<name>.raw` (little-endian f32, (t, z, y, x)) plus `<name>.meta.json`.
Checkpoints are `<name>.json` (manifest) plus `<name>.bin` (payload).
TSSC_LOG (e.g. TSSC_LOG=debug) overrides --verbose.";

#[derive(Debug, Parser)]
#[command(name = "tssc", version, about = "Two-stage temporal super-resolution of 4D volumetric sequences", after_help = EXIT_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Input volume, directory or slice directory, depending on the command.
    #[arg(long = "in", global = true, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Output file, directory or checkpoint, depending on the command.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Reduce gradients in a fixed order so results do not depend on --jobs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a 4D volume into per-z 2D+t slice files.
    Slice {
        /// Only this z index.
        #[arg(long)]
        z: Option<usize>,
    },
    /// Train the stage-1 denoiser on every slice of the input volumes.
    TrainTsr {
        /// Continue from this stage-1 checkpoint (parameters and optimizer).
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Generate the intermediate frames of a volume from its first and last frame.
    Sample {
        #[arg(long, value_name = "CKPT")]
        stage1: Option<PathBuf>,
    },
    /// Reassemble a directory of slice files into a 4D volume.
    Reassemble,
    /// Train the stage-2 consistency network with the stage-1 denoiser frozen.
    TrainSc {
        #[arg(long, value_name = "CKPT")]
        stage1: Option<PathBuf>,
    },
    /// Apply the stage-2 network to every frame of a volume.
    Enhance {
        #[arg(long, value_name = "CKPT")]
        stage2: Option<PathBuf>,
    },
    /// MAE, PSNR and SSIM of predictions against targets, as CSV.
    Evaluate {
        /// Target volume or directory (matched to predictions by name).
        #[arg(long, value_name = "PATH")]
        target: PathBuf,
    },
    /// Both stages end to end on a volume (its first and last frame are used).
    Pipeline {
        #[arg(long, value_name = "CKPT")]
        stage1: Option<PathBuf>,
        #[arg(long, value_name = "CKPT")]
        stage2: Option<PathBuf>,
    },
    /// Write synthetic ground-truth cases into a directory.
    MakeSynthetic,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Slice { .. } => "slice",
            Command::TrainTsr { .. } => "train-tsr",
            Command::Sample { .. } => "sample",
            Command::Reassemble => "reassemble",
            Command::TrainSc { .. } => "train-sc",
            Command::Enhance { .. } => "enhance",
            Command::Evaluate { .. } => "evaluate",
            Command::Pipeline { .. } => "pipeline",
            Command::MakeSynthetic => "make-synthetic",
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    init_logging(cli.verbose);
    match dispatch(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("TSSC_LOG")
        .format_timestamp(None)
        .try_init();
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: EngineConfig,
    exec: RayonExecutor,
}

impl Ctx<'_> {
    fn input(&self) -> Result<&Path> {
        self.required(self.cli.input.as_deref(), "--in")
    }

    fn out(&self) -> Result<&Path> {
        self.required(self.cli.out.as_deref(), "--out")
    }

    fn required<'p>(&self, p: Option<&'p Path>, flag: &str) -> Result<&'p Path> {
        p.ok_or_else(|| TsscError::usage(format!("`{}` requires {flag}", self.cli.command.name())))
    }

    fn checkpoint(&self, flag: Option<&Path>, fallback: &Option<String>, name: &str) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| fallback.as_ref().map(PathBuf::from))
            .ok_or_else(|| {
                TsscError::usage(format!(
                    "`{}` requires --{name} (or paths.{name}_checkpoint in the config)",
                    self.cli.command.name()
                ))
            })
    }
}

/// Runs an already parsed command line.
pub fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let exec = RayonExecutor::new(cli.jobs, cli.deterministic)
        .map_err(|e| TsscError::usage(format!("cannot start {} worker threads: {e}", cli.jobs.unwrap_or(0))))?;
    debug!("seed {}, {} worker threads, deterministic {}", cfg.seed, exec.threads(), cli.deterministic);
    let mut ctx = Ctx { cli, cfg, exec };
    match &cli.command {
        Command::Slice { z } => cmd_slice(&ctx, *z),
        Command::TrainTsr { resume } => cmd_train_tsr(&mut ctx, resume.as_deref()),
        Command::Sample { stage1 } => cmd_sample(&mut ctx, stage1.as_deref()),
        Command::Reassemble => cmd_reassemble(&ctx),
        Command::TrainSc { stage1 } => cmd_train_sc(&mut ctx, stage1.as_deref()),
        Command::Enhance { stage2 } => cmd_enhance(&mut ctx, stage2.as_deref()),
        Command::Evaluate { target } => cmd_evaluate(&ctx, target),
        Command::Pipeline { stage1, stage2 } => cmd_pipeline(&mut ctx, stage1.as_deref(), stage2.as_deref()),
        Command::MakeSynthetic => cmd_make_synthetic(&ctx),
    }
}

/// `stem` of a checkpoint or volume path plus `suffix`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let s = path.to_string_lossy();
    let stem = [".meta.json", ".json", ".bin", ".raw"]
        .iter()
        .find_map(|ext| s.strip_suffix(ext))
        .unwrap_or(&s);
    PathBuf::from(format!("{stem}{suffix}"))
}

/// Writes `v` in the normalization state of `original`.
fn restore_scale(v: Volume4D, original: &Volume4D) -> Volume4D {
    if original.normalized {
        v
    } else {
        denormalize_volume(&v)
    }
}

fn cmd_make_synthetic(ctx: &Ctx) -> Result<()> {
    let dir = ctx.out()?;
    let cases = synthetic_cases(&ctx.cfg, &ctx.cfg.synthetic)?;
    for c in &cases {
        save_volume4d(&c.volume, &dir.join(format!("{}.raw", c.name)))?;
    }
    println!("wrote {} cases of shape {:?} to {}", cases.len(), cases[0].volume.shape, dir.display());
    Ok(())
}

fn cmd_slice(ctx: &Ctx, only: Option<usize>) -> Result<()> {
    let input = ctx.input()?;
    let dir = ctx.out()?;
    let v = load_volume4d(input)?;
    let meta = VolumeMeta::of(&v);
    let name = case_name(input);
    let zs: Vec<usize> = match only {
        Some(z) if z >= v.shape[1] => {
            return Err(TsscError::usage(format!("--z {z} is outside 0..{}", v.shape[1])));
        }
        Some(z) => vec![z],
        None => (0..v.shape[1]).collect(),
    };
    for &z in &zs {
        let s = slice_to_2dt(&v, z)?;
        save_slice(&s, &meta, &dir.join(format!("{name}_z{z:03}.raw")))?;
    }
    println!("wrote {} slices to {}", zs.len(), dir.display());
    Ok(())
}

fn cmd_reassemble(ctx: &Ctx) -> Result<()> {
    let dir = ctx.input()?;
    let out = ctx.out()?;
    let files = list_volumes(dir)?;
    if files.is_empty() {
        return Err(TsscError::format(dir, "no slice files in directory"));
    }
    let mut slices = Vec::with_capacity(files.len());
    let mut meta = None;
    for f in &files {
        let (s, m) = load_slice(f)?;
        meta.get_or_insert(m);
        slices.push(s);
    }
    let meta = meta.unwrap();
    let mut v = assemble_slices(&slices)?;
    v.spacing = meta.spacing;
    v.intensity_range = meta.intensity_range;
    v.normalized = meta.normalized;
    save_volume4d(&v, out)?;
    println!("wrote {} with shape {:?}", file_pair(out).0.display(), v.shape);
    Ok(())
}

fn cmd_train_tsr(ctx: &mut Ctx, resume: Option<&Path>) -> Result<()> {
    let input = ctx.input()?.to_path_buf();
    let out = ctx.out()?.to_path_buf();
    let loaded = resume.map(load_denoiser).transpose()?;
    if let Some(l) = &loaded {
        if l.config != ctx.cfg.denoiser {
            info!("using the denoiser configuration stored in the resumed checkpoint");
            ctx.cfg.denoiser = l.config.clone();
        }
    }
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let cases = load_cases(&input)?;
    let normalized = cases.iter().map(|(_, v)| normalize_volume(v)).collect::<tssc_core::Result<Vec<_>>>()?;
    let data = slice_dataset(&normalized)?;
    info!("stage 1: {} slice sequences from {} cases", data.len(), cases.len());
    let mut trainer = match loaded {
        Some(l) => {
            let adam = l
                .adam
                .ok_or_else(|| TsscError::format(resume.unwrap(), "checkpoint has no optimizer state to resume from"))?;
            Stage1Trainer::resume(cfg, &data, l.params, adam)?
        }
        None => Stage1Trainer::new(cfg, &data)?,
    };
    let log_path = sibling(&out, ".log.csv");
    let mut log = if resume.is_some() {
        CsvLog::append(&log_path)?
    } else {
        CsvLog::create(&log_path)?
    };
    let total = cfg.stage1.steps;
    let every = cfg.stage1.checkpoint_every;
    let mut last = None;
    while trainer.step < total {
        let row = trainer.train_step(&ctx.exec)?;
        log.row(&Stage1Row::from(&row))?;
        if row.step % 100 == 0 || row.step == total {
            info!("step {:>6}  loss {:.5}  lr {:.3e}", row.step, row.loss, row.lr);
        }
        if every > 0 && row.step % every == 0 && row.step < total {
            log.flush()?;
            save_denoiser(&out, &cfg.denoiser, &trainer.params, Some(&trainer.adam))?;
        }
        last = Some(row);
    }
    log.flush()?;
    let digest = save_denoiser(&out, &cfg.denoiser, &trainer.params, Some(&trainer.adam))?;
    match last {
        Some(r) => println!("stage 1: {} steps, final loss {:.5}, checkpoint sha256 {digest}", r.step, r.loss),
        None => println!("stage 1: already at step {}, checkpoint sha256 {digest}", trainer.step),
    }
    Ok(())
}

fn cmd_sample(ctx: &mut Ctx, stage1: Option<&Path>) -> Result<()> {
    let input = ctx.input()?.to_path_buf();
    let out = ctx.out()?.to_path_buf();
    let ck = ctx.checkpoint(stage1, &ctx.cfg.paths.stage1_checkpoint, "stage1")?;
    let den = load_denoiser(&ck)?;
    ctx.cfg.denoiser = den.config.clone();
    ctx.cfg.validate()?;
    let v = load_volume4d(&input)?;
    let generated = generate_case(&den.params, &ctx.cfg, &normalize_volume(&v)?, 0, &ctx.exec)?;
    let result = restore_scale(generated, &v);
    save_volume4d(&result, &out)?;
    write_preview(&result, &sibling(&out, ".pgm"))?;
    println!("wrote {} with shape {:?}", file_pair(&out).0.display(), result.shape);
    Ok(())
}

fn cmd_train_sc(ctx: &mut Ctx, stage1: Option<&Path>) -> Result<()> {
    let input = ctx.input()?.to_path_buf();
    let out = ctx.out()?.to_path_buf();
    let ck = ctx.checkpoint(stage1, &ctx.cfg.paths.stage1_checkpoint, "stage1")?;
    let den = load_denoiser(&ck)?;
    ctx.cfg.denoiser = den.config.clone();
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let before = params_digest(&den.params);
    let cases: Vec<SyntheticCase> = load_cases(&input)?
        .into_iter()
        .map(|(name, volume)| SyntheticCase { name, volume })
        .collect();
    info!("stage 2: generating stage-1 outputs for {} cases", cases.len());
    let prepared = prepare_stage2(&den.params, cfg, &cases, &ctx.exec)?;
    let mut trainer = Stage2Trainer::new(cfg, &prepared)?;
    let mut train_log = CsvLog::create(&sibling(&out, ".log.csv"))?;
    let mut val_log = CsvLog::create(&sibling(&out, ".val.csv"))?;
    let first = trainer.validate(&ctx.exec)?;
    val_log.row(&ValidationRow::from(&first))?;
    info!("epoch {:>3}  val mse {:.6}  total {:.6}", 0, first.mse, first.total);
    let mut last = first;
    for _ in 0..cfg.stage2.epochs {
        for r in trainer.train_epoch()? {
            train_log.row(&Stage2Row::from(&r))?;
        }
        last = trainer.validate(&ctx.exec)?;
        val_log.row(&ValidationRow::from(&last))?;
        info!("epoch {:>3}  val mse {:.6}  total {:.6}", last.step, last.mse, last.total);
    }
    train_log.flush()?;
    val_log.flush()?;
    let digest = save_tridir(&out, &cfg.tridir, &trainer.net, Some(&trainer.adam))?;
    if params_digest(&den.params) != before || Checkpoint::read(&ck)?.payload_digest() != den.digest {
        return Err(TsscError::format(&ck, "stage-1 parameters changed during stage-2 training"));
    }
    println!(
        "stage 2: {} epochs, validation mse {:.6} -> {:.6}, stage-1 sha256 {} unchanged, checkpoint sha256 {digest}",
        cfg.stage2.epochs, first.mse, last.mse, den.digest
    );
    Ok(())
}

fn cmd_enhance(ctx: &mut Ctx, stage2: Option<&Path>) -> Result<()> {
    let input = ctx.input()?.to_path_buf();
    let out = ctx.out()?.to_path_buf();
    let ck = ctx.checkpoint(stage2, &ctx.cfg.paths.stage2_checkpoint, "stage2")?;
    let net = load_tridir(&ck)?;
    let v = load_volume4d(&input)?;
    let enhanced = enhance_case(&net.params, &net.config, &normalize_volume(&v)?, &ctx.exec)?;
    let result = restore_scale(enhanced, &v);
    save_volume4d(&result, &out)?;
    println!("wrote {} with shape {:?}", file_pair(&out).0.display(), result.shape);
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, target: &Path) -> Result<()> {
    let input = ctx.input()?;
    let out = ctx.out()?;
    let preds = load_cases(input)?;
    let targets = load_cases(target)?;
    let pairs: Vec<(String, &Volume4D, &Volume4D)> = if preds.len() == 1 && targets.len() == 1 && !input.is_dir() {
        vec![(preds[0].0.clone(), &preds[0].1, &targets[0].1)]
    } else {
        preds
            .iter()
            .map(|(name, p)| {
                let t = targets
                    .iter()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| TsscError::format(target, format!("no target for case {name}")))?;
                Ok((name.clone(), p, &t.1))
            })
            .collect::<Result<_>>()?
    };
    let max_val = ctx.cfg.metrics.max_val;
    let rows = pairs
        .iter()
        .map(|(name, p, t)| {
            if p.shape != t.shape {
                return Err(TsscError::Core(tssc_core::Error::Shape {
                    context: "evaluate",
                    expected: format!("{:?}", t.shape),
                    found: format!("{:?}", p.shape),
                }));
            }
            let [nt, nz, h, w] = p.shape;
            Ok(evaluate_case(name, &p.data, &t.data, [nt * nz, h, w], max_val)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(rows)?;
    write_metrics(&report, out)?;
    println!("MAE {}  PSNR {}  SSIM {}  ({} cases)", report.mae, report.psnr, report.ssim, report.cases.len());
    Ok(())
}

fn cmd_pipeline(ctx: &mut Ctx, stage1: Option<&Path>, stage2: Option<&Path>) -> Result<()> {
    let input = ctx.input()?.to_path_buf();
    let out = ctx.out()?.to_path_buf();
    let ck1 = ctx.checkpoint(stage1, &ctx.cfg.paths.stage1_checkpoint, "stage1")?;
    let ck2 = ctx.checkpoint(stage2, &ctx.cfg.paths.stage2_checkpoint, "stage2")?;
    let den = load_denoiser(&ck1)?;
    let net = load_tridir(&ck2)?;
    ctx.cfg.denoiser = den.config.clone();
    ctx.cfg.tridir = net.config.clone();
    let v = load_volume4d(&input)?;
    if v.frames() > 2 {
        warn!("input has {} frames; only the first and last are used", v.frames());
    }
    let result = run_pipeline(&ctx.cfg, &den.params, &net.params, &v, &ctx.exec)?;
    save_volume4d(&result, &out)?;
    write_preview(&result, &sibling(&out, ".pgm"))?;
    println!("wrote {} with shape {:?}", file_pair(&out).0.display(), result.shape);
    Ok(())
}

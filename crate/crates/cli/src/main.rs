//! `lwm`: data generation, training, fine-tuning and evaluation of the
//! latent world model from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use lwm_core::action::{attach_action_blocks, finetune, ActionClip, ConditionedPredictor, FinetuneMode};
use lwm_core::checkpoint::{Checkpoint, LWMC_MAGIC};
use lwm_core::config::Config;
use lwm_core::data::{LatentGrid, LWMF_MAGIC};
use lwm_core::encoder::ToyEncoder;
use lwm_core::env::{generate_with_policy, EnvKind, Policy, TrajectoryDataset, LWMT_MAGIC};
use lwm_core::image::{hstack, save_png, upscale};
use lwm_core::planner::{evaluate_planning, executed_frames, LatentDynamics, OracleDynamics, PlanModel};
use lwm_core::predictor::Predictor;
use lwm_core::probes::{run_forecast_protocol, train_linear_head, write_forecast_csv, HeadConfig};
use lwm_core::rollout::{fit_pca, relative_accuracy, surprise_trace, SurpriseTrace};
use lwm_core::scenarios::{encode_frames, encode_videos, flatten_labeled, labeled_clips, surprise_pairs};
use lwm_core::training::{pretrain, RunOutput, Trainer, VideoPool};
use lwm_core::planner::encode_trajectory;
use lwm_core::env::NUM_CLASSES;

#[derive(Parser, Debug)]
#[command(name = "lwm", version, about = "Latent video world model pipeline")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory all artifacts are written to.
    #[arg(long, global = true, default_value = "lwm-out")]
    out_dir: PathBuf,
    /// Parallel workers for episode and pair evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Flat key=value config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a trajectory dataset (LWMT).
    GenData(GenData),
    /// Pre-train the predictor on encoded videos.
    Pretrain(Pretrain),
    /// Action-conditioned fine-tuning.
    Finetune(Finetune),
    /// Short/mid-term segmentation forecasting against copy-last.
    EvalForecast(EvalForecast),
    /// Surprise-based plausibility classification.
    EvalSurprise(EvalSurprise),
    /// CEM planning episodes.
    Plan(Plan),
    /// Summarize an LWMC, LWMT or LWMF file.
    Inspect(Inspect),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    len: Option<usize>,
    /// uniform or bounce.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Args, Debug)]
struct Pretrain {
    /// Trajectory file to train on; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a pre-training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Finetune {
    /// scratch, action-only or full.
    #[arg(long, default_value = "full")]
    mode: FinetuneMode,
    /// Pre-trained checkpoint; defaults to `<out-dir>/pretrain/last.lwmc`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalForecast {
    /// Predictor checkpoint; defaults to `<out-dir>/pretrain/last.lwmc`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluation clips.
    #[arg(long, default_value_t = 64)]
    clips: usize,
    /// Clips used to fit the present-time head.
    #[arg(long, default_value_t = 32)]
    head_clips: usize,
}

#[derive(Args, Debug)]
struct EvalSurprise {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Constructed pairs when no manifest is given.
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    /// CSV `plausible_path,implausible_path,category` of LWMF files.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Frames per constructed video.
    #[arg(long, default_value_t = 12)]
    frames: usize,
    /// Also write PCA renderings of the first pair.
    #[arg(long)]
    pca: bool,
}

#[derive(Args, Debug)]
struct Plan {
    /// Fine-tuned checkpoint; defaults to `<out-dir>/finetune.lwmc`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    episodes: usize,
    /// Plan with the true simulator instead of a model.
    #[arg(long)]
    oracle: bool,
    /// Write a PNG strip of the first episode.
    #[arg(long)]
    png: bool,
}

#[derive(Args, Debug)]
struct Inspect {
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LWM_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}

struct Ctx {
    seed: u64,
    out: PathBuf,
    workers: usize,
    cfg: Config,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn encoder(&self) -> Result<ToyEncoder> {
        Ok(ToyEncoder::new(self.cfg.encoder)?)
    }

    fn dataset(&self, data: Option<&Path>, seed: u64) -> Result<TrajectoryDataset> {
        match data {
            Some(p) => {
                let ds = TrajectoryDataset::load(p)?;
                if ds.spec != self.cfg.env {
                    log::warn!("{} was generated with a different environment spec; using the file's", p.display());
                }
                Ok(ds)
            }
            None => Ok(generate_with_policy(
                &self.cfg.env,
                self.cfg.data.count,
                self.cfg.data.length,
                self.cfg.data.policy,
                seed,
            )?),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.train.seed = cli.seed;
    cfg.finetune.seed = cli.seed;
    if cli.workers == 0 {
        bail!("--workers must be at least 1");
    }
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let ctx = Ctx {
        seed: cli.seed,
        out: cli.out_dir,
        workers: cli.workers,
        cfg,
    };
    match cli.command {
        Command::GenData(a) => gen_data(ctx, a),
        Command::Pretrain(a) => run_pretrain(ctx, a),
        Command::Finetune(a) => run_finetune(ctx, a),
        Command::EvalForecast(a) => eval_forecast(ctx, a),
        Command::EvalSurprise(a) => eval_surprise(ctx, a),
        Command::Plan(a) => plan(ctx, a),
        Command::Inspect(a) => inspect(&a.path),
    }
}

fn log_config(ctx: &Ctx) -> Result<()> {
    let text = ctx.cfg.render();
    log::info!("resolved config (seed {}):\n{}", ctx.seed, text.trim_end());
    fs::write(ctx.path("config.resolved"), format!("# seed={}\n{text}", ctx.seed))?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn gen_data(mut ctx: Ctx, a: GenData) -> Result<()> {
    if let Some(k) = a.env {
        ctx.cfg.env.kind = k;
        if k == EnvKind::PointMaze {
            ctx.cfg.env = lwm_core::env::EnvSpec {
                agent_radius: ctx.cfg.env.agent_radius,
                resolution: ctx.cfg.env.resolution,
                ..lwm_core::env::EnvSpec::point_maze()
            };
        }
    }
    if let Some(c) = a.count {
        ctx.cfg.data.count = c;
    }
    if let Some(l) = a.len {
        ctx.cfg.data.length = l;
    }
    if let Some(p) = a.policy {
        ctx.cfg.data.policy = match p.as_str() {
            "uniform" => Policy::Uniform,
            "bounce" => Policy::Bounce,
            other => bail!("unknown policy `{other}` (expected uniform or bounce)"),
        };
    }
    log_config(&ctx)?;
    let ds = ctx.dataset(None, ctx.seed)?;
    let path = ctx.path("trajectories.lwmt");
    ds.save(&path)?;
    let digest = sha256_file(&path)?;
    log::info!("wrote {} trajectories to {}", ds.trajectories.len(), path.display());
    println!("{digest}  {}", path.display());
    Ok(())
}

fn run_pretrain(ctx: Ctx, a: Pretrain) -> Result<()> {
    let mut ctx = ctx;
    if let Some(s) = a.steps {
        ctx.cfg.train.total_steps = s;
    }
    log_config(&ctx)?;
    let enc = ctx.encoder()?;
    let ds = ctx.dataset(a.data.as_deref(), ctx.seed)?;
    let videos = encode_videos(&ds, &enc)?;
    let pool = VideoPool::new(videos, ctx.cfg.train.sampler)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, ctx.cfg.train.clone())?,
        None => Trainer::new(
            Predictor::new(ctx.cfg.predictor_config()?, ctx.seed)?,
            ctx.cfg.train.clone(),
        )?,
    };
    log::info!("predictor has {} parameters", trainer.model.num_params());
    let out = RunOutput::in_dir(ctx.path("pretrain"));
    let rows = pretrain(&mut trainer, &pool, &out)?;
    if let Some(r) = rows.last() {
        log::info!("final loss {:.6} at step {}", r.loss, r.step);
    }
    Ok(())
}

fn action_clips(ctx: &Ctx, ds: &TrajectoryDataset, enc: &ToyEncoder) -> Result<Vec<ActionClip>> {
    ds.trajectories
        .iter()
        .map(|t| Ok(encode_trajectory(&ds.spec, t, enc, ctx.cfg.plan.frameskip)?))
        .collect()
}

fn run_finetune(mut ctx: Ctx, a: Finetune) -> Result<()> {
    if let Some(s) = a.steps {
        ctx.cfg.finetune.steps = s;
    }
    log_config(&ctx)?;
    let enc = ctx.encoder()?;
    let ckpt_path = a.checkpoint.unwrap_or_else(|| ctx.path("pretrain").join("last.lwmc"));
    let base = if ckpt_path.exists() {
        Predictor::from_checkpoint(&Checkpoint::load(&ckpt_path)?)?
    } else if a.mode == FinetuneMode::Scratch {
        Predictor::new(ctx.cfg.predictor_config()?, ctx.seed)?
    } else {
        bail!("pre-trained checkpoint {} not found", ckpt_path.display());
    };
    // fine-tuning data comes from its own stream so it never repeats the
    // pre-training trajectories
    let ds = ctx.dataset(a.data.as_deref(), ctx.seed.wrapping_add(1))?;
    let clips = action_clips(&ctx, &ds, &enc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let model = attach_action_blocks(base, ctx.cfg.plan.frameskip * lwm_core::env::ACTION_DIM, &mut rng)?;
    let report = finetune(model, &clips, a.mode, &ctx.cfg.finetune)?;
    let path = ctx.path("finetune.lwmc");
    report.model.to_checkpoint(ctx.cfg.finetune.steps).save(&path)?;
    let mut w = csv::Writer::from_path(ctx.path("finetune_log.csv"))?;
    w.write_record(["step", "loss", "lr"])?;
    for r in &report.log {
        w.write_record([r.step.to_string(), format!("{:.9e}", r.loss), format!("{:.9e}", r.lr)])?;
    }
    w.flush()?;
    log::info!(
        "{} fine-tuning: held-out loss {:.6} -> {:.6}; saved {}",
        report.mode,
        report.heldout_before,
        report.heldout_after,
        path.display()
    );
    Ok(())
}

fn load_predictor(ctx: &Ctx, ckpt: Option<PathBuf>) -> Result<Predictor> {
    let path = ckpt.unwrap_or_else(|| ctx.path("pretrain").join("last.lwmc"));
    let c = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Predictor::from_checkpoint(&c)?)
}

fn eval_forecast(ctx: Ctx, a: EvalForecast) -> Result<()> {
    log_config(&ctx)?;
    let model = load_predictor(&ctx, a.checkpoint)?;
    let enc = ctx.encoder()?;
    let frames = ctx.cfg.forecast.min_frames();
    let gen = |count: usize, stream: u64| {
        generate_with_policy(&ctx.cfg.env, count, frames - 1, Policy::Bounce, ctx.seed.wrapping_add(stream))
    };
    let head_clips = labeled_clips(&gen(a.head_clips, 100)?, &enc)?;
    let (x, y) = flatten_labeled(&head_clips);
    let head = train_linear_head(&x, &y, enc.spec().embed_dim, NUM_CLASSES, &HeadConfig::default())?;
    let eval = labeled_clips(&gen(a.clips, 200)?, &enc)?;
    let scores = run_forecast_protocol(&model, &head, &eval, &ctx.cfg.forecast)?;
    let path = ctx.path("forecast.csv");
    write_forecast_csv(&path, "toy", &scores)?;
    log::info!(
        "present {:.4} short {:.4} (copy-last {:.4}) mid {:.4} (copy-last {:.4}) over {} clips; wrote {}",
        scores.present,
        scores.short,
        scores.copy_last_short,
        scores.mid,
        scores.copy_last_mid,
        scores.evaluated,
        path.display()
    );
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Vec<(LatentGrid, LatentGrid, String)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 3 {
            bail!("manifest rows need plausible_path,implausible_path,category");
        }
        let load = |p: &str| LatentGrid::load(&base.join(p));
        out.push((load(&rec[0])?, load(&rec[1])?, rec[2].to_string()));
    }
    Ok(out)
}

fn eval_surprise(ctx: Ctx, a: EvalSurprise) -> Result<()> {
    log_config(&ctx)?;
    let model = load_predictor(&ctx, a.checkpoint)?;
    let enc = ctx.encoder()?;
    let pairs: Vec<(LatentGrid, LatentGrid, String)> = match &a.manifest {
        Some(m) => read_manifest(m)?,
        None => surprise_pairs(&ctx.cfg.env, a.pairs, a.frames, ctx.cfg.surprise.context + 1, ctx.seed)?
            .into_iter()
            .map(|p| {
                Ok((
                    encode_frames(&ctx.cfg.env, &enc, &p.plausible)?,
                    encode_frames(&ctx.cfg.env, &enc, &p.implausible)?,
                    "teleport".to_string(),
                ))
            })
            .collect::<Result<_>>()?,
    };
    if pairs.is_empty() {
        bail!("no pairs to evaluate");
    }
    let context = ctx.cfg.surprise.context;
    let score = |(p, q, _): &(LatentGrid, LatentGrid, String)| -> Result<(SurpriseTrace, SurpriseTrace)> {
        Ok((surprise_trace(&model, p, context)?, surprise_trace(&model, q, context)?))
    };
    let traces: Vec<(SurpriseTrace, SurpriseTrace)> = parallel_map(&pairs, ctx.workers, score)?;
    let mut categories: Vec<String> = pairs.iter().map(|p| p.2.clone()).collect();
    categories.sort();
    categories.dedup();
    let path = ctx.path("surprise.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["category", "pairs", "relative_accuracy"])?;
    let agg = ctx.cfg.surprise.aggregator;
    for c in &categories {
        let sel: Vec<_> = traces
            .iter()
            .zip(&pairs)
            .filter(|(_, p)| &p.2 == c)
            .map(|(t, _)| t.clone())
            .collect();
        w.write_record([c.clone(), sel.len().to_string(), format!("{:.6}", relative_accuracy(&sel, agg)?)])?;
    }
    let overall = relative_accuracy(&traces, agg)?;
    w.write_record(["overall".to_string(), traces.len().to_string(), format!("{overall:.6}")])?;
    w.flush()?;
    log::info!("relative accuracy {overall:.4} over {} pairs; wrote {}", traces.len(), path.display());
    if a.pca {
        let (p, q, _) = &pairs[0];
        let proj = fit_pca(p)?;
        for (name, g) in [("pca_plausible.png", p), ("pca_implausible.png", q)] {
            let frames: Vec<_> = proj
                .render(g)?
                .iter()
                .map(|f| upscale(f, 8))
                .collect::<lwm_core::Result<_>>()?;
            save_png(&hstack(&frames)?, &ctx.path(name))?;
        }
    }
    Ok(())
}

/// Maps `f` over `items` on `workers` threads, keeping input order.
fn parallel_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn plan(ctx: Ctx, a: Plan) -> Result<()> {
    log_config(&ctx)?;
    let enc = ctx.encoder()?;
    let spec = ctx.cfg.env;
    let params = ctx.cfg.plan;
    let conditioned: Option<ConditionedPredictor> = if a.oracle {
        None
    } else {
        let path = a.checkpoint.unwrap_or_else(|| ctx.path("finetune.lwmc"));
        let c = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        Some(ConditionedPredictor::from_checkpoint(&c)?)
    };
    let oracle = OracleDynamics { spec, encoder: &enc };
    let learned = conditioned.as_ref().map(|m| LatentDynamics {
        model: m,
        step_time: ctx.cfg.model_step_time(),
        max_context: ctx.cfg.plan_context,
    });
    let model: &dyn PlanModel = match &learned {
        Some(l) => l,
        None => &oracle,
    };
    let report = evaluate_planning(&spec, model, &enc, &params, a.episodes, ctx.seed, ctx.workers)?;
    let path = ctx.path("plan_episodes.csv");
    report.write_csv(&path)?;
    log::info!(
        "success rate {:.4} ({}/{}); wrote {}",
        report.success_rate(),
        report.successes(),
        report.episodes.len(),
        path.display()
    );
    if a.png {
        let e = &report.episodes[0];
        let frames = executed_frames(&spec, &e.start, &e.plan, params.executed)?;
        save_png(&hstack(&frames)?, &ctx.path("plan_episode0.png"))?;
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let magic = bytes.get(..4).unwrap_or_default();
    if magic == LWMC_MAGIC {
        let c = Checkpoint::from_bytes(&bytes)?;
        println!("checkpoint {} (step {})", path.display(), c.step);
        let mut params = 0;
        for t in &c.tensors {
            println!("{}\t{:?}", t.name, t.dims);
            if !t.name.starts_with("meta.") && !t.name.starts_with("opt.") {
                params += t.data.len();
            }
        }
        println!("parameters: {params}");
    } else if magic == LWMT_MAGIC {
        let ds = TrajectoryDataset::from_bytes(&bytes)?;
        let steps: usize = ds.trajectories.iter().map(|t| t.len()).sum();
        println!(
            "trajectories {} ({:?}, resolution {}), {steps} steps, seed {}",
            ds.trajectories.len(),
            ds.spec.kind,
            ds.spec.resolution,
            ds.seed
        );
        println!("action range {:?}", ds.action_range());
    } else if magic == LWMF_MAGIC {
        let g = LatentGrid::from_bytes(&bytes)?;
        let (t, h, w, d) = g.shape();
        println!("features T={t} H={h} W={w} D={d}, timestamps {:?}", g.timestamps());
    } else {
        bail!("{}: not an LWMC, LWMT or LWMF file", path.display());
    }
    Ok(())
}

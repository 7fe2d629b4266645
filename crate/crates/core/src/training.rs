//! Optimization: learning-rate schedule, AdamW, teacher-forced training
//! steps, checkpoint conversion and the pre-training driver.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{meta_f64, meta_usize, Checkpoint, Tensor};
use crate::data::{nearest_frame_lookup, sample_clip_timestamps, LatentGrid, SamplerSpec, VideoMeta};
use crate::error::{invalid, shape, Error, Result};
use crate::nn::ParamSet;
use crate::predictor::{smooth_l1, smooth_l1_with_grad, AttnBatch, Predictor, PredictorConfig, SMOOTH_L1_BETA};
use crate::rope::RopeConfig;

/// Linear warmup from zero to `base_lr`, then constant.
pub fn lr_at_step(step: u64, warmup: u64, base_lr: f64) -> f64 {
    if warmup == 0 || step >= warmup {
        base_lr
    } else {
        base_lr * step as f64 / warmup as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.4,
        }
    }
}

/// First and second moments for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl OptState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

impl AdamW {
    /// One bias-corrected update with decay applied directly to the weights.
    pub fn update(&self, params: &mut [f32], grads: &[f32], decay: &[bool], st: &mut OptState, lr: f64) {
        st.step += 1;
        let t = st.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for i in 0..params.len() {
            let g = grads[i];
            st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
            st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
            let mhat = st.m[i] as f64 / bc1;
            let vhat = st.v[i] as f64 / bc2;
            let mut p = params[i] as f64;
            if decay[i] {
                p -= lr * self.weight_decay * p;
            }
            p -= lr * mhat / (vhat.sqrt() + self.eps);
            params[i] = p as f32;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub sampler: SamplerSpec,
    pub resolution: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            total_steps: 3000,
            warmup_steps: 200,
            base_lr: 1e-3,
            weight_decay: 0.4,
            seed: 0,
            sampler: SamplerSpec::default(),
            resolution: 64,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(invalid(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(invalid(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay must be non-negative"));
        }
        self.sampler.validate()
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

/// Per-clip smooth-L1 against the next frame's features, with the gradient
/// of the batch mean written into `d_out`.
pub(crate) fn batch_loss(
    out: &[f32],
    batch: &AttnBatch,
    targets: &[f32],
    d_out: &mut [f32],
    dim: usize,
) -> Vec<f64> {
    let weight = 1.0 / batch.segments.len() as f64;
    batch
        .segments
        .iter()
        .map(|s| {
            let r = s.queries.start * dim..s.queries.end * dim;
            smooth_l1_with_grad(&out[r.clone()], &targets[r.clone()], weight, &mut d_out[r])
        })
        .collect()
}

pub(crate) fn check_losses(losses: &[f64], step: u64) -> Result<f64> {
    if let Some(clip) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            clip,
            loss: losses[clip],
        });
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Next-frame targets in query order: frames `1..T` of every grid.
pub(crate) fn teacher_targets(grids: &[&LatentGrid]) -> Vec<f32> {
    grids
        .iter()
        .flat_map(|g| g.data()[g.frame_len()..].iter().copied())
        .collect()
}

fn check_batch(grids: &[LatentGrid], dim: usize) -> Result<()> {
    if grids.is_empty() {
        return Err(invalid("training batch is empty"));
    }
    for (i, g) in grids.iter().enumerate() {
        if g.dim() != dim {
            return Err(shape(format!(
                "clip {i} has feature dim {}, predictor expects {dim}",
                g.dim()
            )));
        }
    }
    Ok(())
}

/// Batch-mean teacher-forced loss and its gradient with respect to every
/// predictor parameter (same layout as `p.params().data()`).
pub fn loss_and_grad(p: &Predictor, grids: &[LatentGrid]) -> Result<(f64, Vec<f32>)> {
    let (losses, grads) = loss_and_grad_inner(p, grids, 0)?;
    Ok((check_losses(&losses, 0)?, grads))
}

fn loss_and_grad_inner(p: &Predictor, grids: &[LatentGrid], step: u64) -> Result<(Vec<f64>, Vec<f32>)> {
    let dim = p.config().input_dim;
    check_batch(grids, dim)?;
    let mut batch = AttnBatch::new(dim, 0);
    for g in grids {
        batch.push_teacher_forced(g, None)?;
    }
    let refs: Vec<&LatentGrid> = grids.iter().collect();
    let targets = teacher_targets(&refs);
    let (out, cache) = p.run(&batch, None, true);
    let mut d_out = vec![0.0f32; out.len()];
    let losses = batch_loss(&out, &batch, &targets, &mut d_out, dim);
    check_losses(&losses, step)?;
    let mut grads = vec![0.0f32; p.num_params()];
    p.backprop(&batch, None, &cache.expect("kept"), &d_out, &mut grads, None);
    Ok((losses, grads))
}

/// Batch-mean teacher-forced loss without gradients.
pub fn evaluate_loss(p: &Predictor, grids: &[LatentGrid]) -> Result<f64> {
    check_batch(grids, p.config().input_dim)?;
    let mut total = 0.0;
    for g in grids {
        let pred = p.forward_train(g)?;
        total += smooth_l1(pred.data(), &g.data()[g.frame_len()..], SMOOTH_L1_BETA)?;
    }
    Ok(total / grids.len() as f64)
}

/// Loss of predicting every frame as a copy of the one before it.
pub fn copy_last_loss(grids: &[LatentGrid]) -> Result<f64> {
    if grids.is_empty() {
        return Err(invalid("no clips"));
    }
    let mut total = 0.0;
    for g in grids {
        let n = g.frame_len();
        let d = g.data();
        total += smooth_l1(&d[..d.len() - n], &d[n..], SMOOTH_L1_BETA)?;
    }
    Ok(total / grids.len() as f64)
}

/// One AdamW step on a batch of clips. The learning rate follows the
/// warmup schedule at the optimizer's current step.
pub fn train_step(
    p: &mut Predictor,
    grids: &[LatentGrid],
    opt: &mut OptState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (losses, grads) = loss_and_grad_inner(p, grids, opt.step)?;
    let loss = check_losses(&losses, opt.step)?;
    let lr = lr_at_step(opt.step, cfg.warmup_steps, cfg.base_lr);
    let decay = p.params().decay_mask();
    cfg.adamw()
        .update(p.params_mut().data_mut(), &grads, &decay, opt, lr);
    Ok(loss)
}

fn predictor_meta(cfg: &PredictorConfig) -> Tensor {
    Tensor::vector(
        "meta.predictor",
        vec![
            cfg.input_dim as f32,
            cfg.model_dim as f32,
            cfg.num_blocks as f32,
            cfg.num_heads as f32,
            cfg.mlp_ratio as f32,
            cfg.rope.head_dim as f32,
            cfg.rope.num_periods as f32,
            cfg.rope.period_min as f32,
            cfg.rope.period_max as f32,
        ],
    )
}

/// Reads the predictor config echoed into a checkpoint.
pub fn checkpoint_predictor_config(ckpt: &Checkpoint) -> Result<PredictorConfig> {
    let m = &ckpt.require("meta.predictor")?.data;
    if m.len() != 9 {
        return Err(invalid("meta.predictor must hold 9 values"));
    }
    let cfg = PredictorConfig {
        input_dim: meta_usize(m[0], "input_dim")?,
        model_dim: meta_usize(m[1], "model_dim")?,
        num_blocks: meta_usize(m[2], "num_blocks")?,
        num_heads: meta_usize(m[3], "num_heads")?,
        mlp_ratio: meta_f64(m[4]),
        rope: RopeConfig {
            head_dim: meta_usize(m[5], "head_dim")?,
            num_periods: meta_usize(m[6], "num_periods")?,
            period_min: meta_f64(m[7]),
            period_max: meta_f64(m[8]),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn param_names(ps: &ParamSet, prefix: &str) -> Vec<String> {
    ps.specs().iter().map(|s| format!("{prefix}{}", s.name)).collect()
}

impl Predictor {
    /// Weights plus the config echo; optimizer moments are added by callers
    /// that resume training.
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut c = Checkpoint {
            step,
            tensors: vec![predictor_meta(self.config())],
        };
        c.push_params(self.params(), self.params().data(), "");
        c
    }

    /// Rebuilds a predictor of configuration `cfg` from checkpoint weights.
    /// Base tensors must match the configuration exactly.
    pub fn load_checkpoint(cfg: PredictorConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut p = Predictor::new(cfg, 0)?;
        let expected = param_names(p.params(), "");
        let base_names: Vec<&str> = ckpt
            .tensors
            .iter()
            .map(|t| t.name.as_str())
            .filter(|n| is_base_tensor(n))
            .collect();
        let have: Checkpoint = Checkpoint {
            step: ckpt.step,
            tensors: base_names
                .iter()
                .map(|n| Tensor::vector(*n, Vec::new()))
                .collect(),
        };
        have.check_names(&expected, &[""])?;
        let ps = p.params().clone();
        ckpt.read_params(&ps, "", p.params_mut().data_mut())?;
        Ok(p)
    }

    /// Rebuilds a predictor using the config echoed in the checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::load_checkpoint(checkpoint_predictor_config(ckpt)?, ckpt)
    }
}

fn is_base_tensor(name: &str) -> bool {
    !(name.starts_with("meta.") || name.starts_with("opt.") || name.starts_with("action."))
}

pub(crate) fn push_opt_state(c: &mut Checkpoint, ps: &ParamSet, st: &OptState, prefix: &str) {
    c.push_params(ps, &st.m, &format!("opt.m.{prefix}"));
    c.push_params(ps, &st.v, &format!("opt.v.{prefix}"));
}

pub(crate) fn read_opt_state(c: &Checkpoint, ps: &ParamSet, prefix: &str) -> Result<OptState> {
    let mut st = OptState::new(ps.len());
    st.step = c.step;
    c.read_params(ps, &format!("opt.m.{prefix}"), &mut st.m)?;
    c.read_params(ps, &format!("opt.v.{prefix}"), &mut st.v)?;
    Ok(st)
}

fn adamw_meta(a: &AdamW) -> Tensor {
    Tensor::vector(
        "meta.adamw",
        vec![a.beta1 as f32, a.beta2 as f32, a.eps as f32, a.weight_decay as f32],
    )
}

/// Source of training clips. Batches are a pure function of
/// `(seed, step)` so an interrupted run resumes on identical data.
pub trait ClipSource {
    fn sample_clip(&self, rng: &mut ChaCha8Rng) -> Result<LatentGrid>;

    fn batch(&self, seed: u64, step: u64, size: usize) -> Result<Vec<LatentGrid>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        (0..size).map(|_| self.sample_clip(&mut rng)).collect()
    }
}

/// A set of long encoded videos sampled with variable frame gaps.
#[derive(Debug, Clone)]
pub struct VideoPool {
    videos: Vec<(LatentGrid, VideoMeta)>,
    sampler: SamplerSpec,
}

impl VideoPool {
    pub fn new(videos: Vec<LatentGrid>, sampler: SamplerSpec) -> Result<Self> {
        sampler.validate()?;
        if videos.is_empty() {
            return Err(invalid("video pool is empty"));
        }
        let videos = videos
            .into_iter()
            .map(|g| {
                let ts = g.timestamps().to_vec();
                let duration = ts[ts.len() - 1].max(f64::MIN_POSITIVE);
                let meta = VideoMeta::with_timestamps(duration, ts)?;
                Ok((g, meta))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { videos, sampler })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

impl ClipSource for VideoPool {
    fn sample_clip(&self, rng: &mut ChaCha8Rng) -> Result<LatentGrid> {
        for _ in 0..64 {
            let (grid, meta) = &self.videos[rng.random_range(0..self.videos.len())];
            let ts = sample_clip_timestamps(meta, &self.sampler, rng)?;
            let idx = ts
                .iter()
                .map(|&t| nearest_frame_lookup(meta, t).map(|(i, _)| i))
                .collect::<Result<Vec<_>>>()?;
            // gaps shorter than the stored frame spacing can collapse onto
            // one frame; draw again rather than repeat a timestamp
            if idx.windows(2).all(|w| w[0] < w[1]) {
                return grid.select(&idx);
            }
        }
        Err(Error::Infeasible(
            "sampled gaps repeatedly map to the same stored frame; delta_min is below the frame spacing"
                .into(),
        ))
    }
}

/// Fixed clips cycled in order; mostly for overfitting and tests.
#[derive(Debug, Clone)]
pub struct FixedClips(pub Vec<LatentGrid>);

impl ClipSource for FixedClips {
    fn sample_clip(&self, rng: &mut ChaCha8Rng) -> Result<LatentGrid> {
        Ok(self.0[rng.random_range(0..self.0.len())].clone())
    }

    fn batch(&self, _seed: u64, step: u64, size: usize) -> Result<Vec<LatentGrid>> {
        let n = self.0.len();
        Ok((0..size)
            .map(|i| self.0[(step as usize * size + i) % n].clone())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Model plus optimizer state; the unit that checkpoints and resumes.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Predictor,
    pub opt: OptState,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: Predictor, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = OptState::new(model.num_params());
        Ok(Self { model, opt, cfg })
    }

    pub fn step(&mut self, grids: &[LatentGrid]) -> Result<LogRow> {
        let step = self.opt.step;
        let lr = lr_at_step(step, self.cfg.warmup_steps, self.cfg.base_lr);
        let loss = train_step(&mut self.model, grids, &mut self.opt, &self.cfg)?;
        Ok(LogRow { step, loss, lr })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.model.to_checkpoint(self.opt.step);
        c.push(adamw_meta(&self.cfg.adamw()));
        push_opt_state(&mut c, self.model.params(), &self.opt, "");
        c
    }

    /// Restores weights and optimizer moments saved by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Predictor::from_checkpoint(ckpt)?;
        let opt = read_opt_state(ckpt, model.params(), "")?;
        Ok(Self { model, opt, cfg })
    }
}

/// Where a training run writes checkpoints and its CSV log.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
        }
    }

    pub fn checkpoint_path(&self, step: u64) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("ckpt_{step:08}.lwmc")))
    }

    pub fn last_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("last.lwmc"))
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("train_log.csv"))
    }
}

pub(crate) fn append_log(path: &Path, rows: &[LogRow], fresh: bool) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::at_path(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("step,loss,lr\n");
    }
    for r in rows {
        text.push_str(&format!("{},{:.9e},{:.9e}\n", r.step, r.loss, r.lr));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::at_path(path, e))
}

/// Runs the trainer until `cfg.total_steps`, checkpointing every
/// `cfg.checkpoint_every` steps and at the end. A trainer restored with
/// [`Trainer::resume`] continues exactly where the saved run stopped.
pub fn pretrain(trainer: &mut Trainer, source: &dyn ClipSource, out: &RunOutput) -> Result<Vec<LogRow>> {
    let fresh = trainer.opt.step == 0;
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::at_path(dir, e))?;
    }
    let mut rows = Vec::new();
    let mut pending = Vec::new();
    let mut first_write = fresh;
    if let (Some(log), true) = (out.log_path(), fresh) {
        append_log(&log, &[], true)?;
        first_write = false;
    }
    while trainer.opt.step < trainer.cfg.total_steps {
        let batch = source.batch(trainer.cfg.seed, trainer.opt.step, trainer.cfg.batch_size)?;
        let row = trainer.step(&batch)?;
        log::debug!("step {} loss {:.6} lr {:.3e}", row.step, row.loss, row.lr);
        rows.push(row);
        pending.push(row);
        let done = trainer.opt.step;
        let periodic = trainer.cfg.checkpoint_every > 0 && done % trainer.cfg.checkpoint_every == 0;
        if periodic || done == trainer.cfg.total_steps {
            if let Some(log) = out.log_path() {
                append_log(&log, &pending, first_write)?;
                first_write = false;
                pending.clear();
            }
            if let Some(path) = out.checkpoint_path(done) {
                trainer.checkpoint().save(&path)?;
            }
        }
    }
    if let Some(last) = out.last_path() {
        trainer.checkpoint().save(&last)?;
    }
    if let Some(r) = rows.last() {
        log::info!("finished at step {} with loss {:.6}", trainer.opt.step, r.loss);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        assert_eq!(lr_at_step(0, 5000, 1e-4), 0.0);
        assert!((lr_at_step(2500, 5000, 1e-4) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at_step(5000, 5000, 1e-4), 1e-4);
        assert_eq!(lr_at_step(300_000, 5000, 1e-4), 1e-4);
        assert_eq!(lr_at_step(0, 0, 1e-4), 1e-4);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let a = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = vec![1.0f32, -1.0];
        let mut st = OptState::new(2);
        a.update(&mut p, &[0.5, -2.0], &[true, true], &mut st, 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn decay_is_decoupled_and_masked() {
        let a = AdamW::default();
        let mut p = vec![2.0f32, 2.0];
        let mut st = OptState::new(2);
        a.update(&mut p, &[0.0, 0.0], &[true, false], &mut st, 0.5);
        assert!((p[0] - 2.0 * (1.0 - 0.5 * 0.4)).abs() < 1e-6);
        assert_eq!(p[1], 2.0);
    }

    #[test]
    fn config_guards() {
        let mut c = TrainConfig::default();
        c.warmup_steps = c.total_steps + 1;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            base_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}

//! Action-conditioned predictor: zero-initialized residual action blocks
//! grafted after each predictor block, plus the fine-tuning driver.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{meta_usize, Checkpoint, Tensor};
use crate::data::LatentGrid;
use crate::error::{invalid, shape, Error, Result};
use crate::nn::ParamSet;
use crate::predictor::{ActionLayout, ActionNet, AttnBatch, Predictor, QueryPoints, QuerySpec};
use crate::training::{
    batch_loss, check_losses, checkpoint_predictor_config, lr_at_step, param_names, teacher_targets,
    AdamW, LogRow, OptState,
};

/// Groups per-step actions `f` at a time into one conditioning vector per
/// model transition.
pub fn embed_action_sequence(actions: &[Vec<f32>], frameskip: usize) -> Result<Vec<Vec<f32>>> {
    if frameskip == 0 {
        return Err(invalid("frameskip must be positive"));
    }
    if actions.len() % frameskip != 0 {
        return Err(invalid(format!(
            "{} actions do not split into groups of {frameskip} ({} left over)",
            actions.len(),
            actions.len() % frameskip
        )));
    }
    if let Some(first) = actions.first() {
        if actions.iter().any(|a| a.len() != first.len()) {
            return Err(shape("actions have inconsistent dimensions"));
        }
    }
    Ok(actions.chunks(frameskip).map(|g| g.concat()).collect())
}

/// Inverse of [`embed_action_sequence`].
pub fn ungroup_actions(groups: &[Vec<f32>], action_dim: usize) -> Result<Vec<Vec<f32>>> {
    if action_dim == 0 {
        return Err(invalid("action_dim must be positive"));
    }
    let mut out = Vec::new();
    for g in groups {
        if g.len() % action_dim != 0 {
            return Err(shape(format!(
                "group of {} values is not a multiple of {action_dim}",
                g.len()
            )));
        }
        out.extend(g.chunks(action_dim).map(<[f32]>::to_vec));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConditionedPredictor {
    base: Predictor,
    action_dim: usize,
    params: ParamSet,
    layout: ActionLayout,
}

/// Adds freshly initialized action blocks; their zero layer scales make the
/// result compute exactly what `p` computes.
pub fn attach_action_blocks<R: Rng + ?Sized>(
    p: Predictor,
    action_dim: usize,
    rng: &mut R,
) -> Result<ConditionedPredictor> {
    if action_dim == 0 {
        return Err(invalid("action dimension must be positive"));
    }
    let mut params = ParamSet::default();
    let cfg = p.config();
    let layout = ActionLayout::build(&mut params, action_dim, cfg.model_dim, cfg.num_blocks, rng);
    Ok(ConditionedPredictor {
        base: p,
        action_dim,
        params,
        layout,
    })
}

impl ConditionedPredictor {
    pub fn base(&self) -> &Predictor {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut Predictor {
        &mut self.base
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn action_params(&self) -> &ParamSet {
        &self.params
    }

    pub fn action_params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Parameters added on top of the base predictor.
    pub fn added_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_params(&self) -> usize {
        self.base.num_params() + self.params.len()
    }

    pub(crate) fn net(&self) -> ActionNet<'_> {
        ActionNet {
            layout: &self.layout,
            params: self.params.data(),
        }
    }

    pub(crate) fn new_batch(&self) -> AttnBatch {
        AttnBatch::new(self.base.config().input_dim, self.action_dim)
    }

    pub(crate) fn run(&self, batch: &AttnBatch) -> Vec<f32> {
        self.base.run(batch, Some(&self.net()), false).0
    }

    fn flat_actions(&self, actions: &[Vec<f32>], expected: usize) -> Result<Vec<f32>> {
        if actions.len() != expected {
            return Err(shape(format!(
                "expected {expected} actions, got {}",
                actions.len()
            )));
        }
        if let Some(a) = actions.iter().find(|a| a.len() != self.action_dim) {
            return Err(shape(format!(
                "action has {} values, model expects {}",
                a.len(),
                self.action_dim
            )));
        }
        Ok(actions.concat())
    }

    /// Teacher-forced predictions; `actions[t]` conditions the prediction
    /// of frame `t + 1`.
    pub fn forward_conditioned(&self, grid: &LatentGrid, actions: &[Vec<f32>]) -> Result<LatentGrid> {
        let t = grid.num_frames();
        let flat = self.flat_actions(actions, t.saturating_sub(1))?;
        let mut batch = self.new_batch();
        batch.push_teacher_forced(grid, Some(&flat))?;
        let out = self.run(&batch);
        let (t, h, w, d) = grid.shape();
        LatentGrid::new((t - 1, h, w, d), out, grid.timestamps()[1..].to_vec())
    }

    /// Direct prediction at `q.tau` conditioned on one action vector.
    pub fn predict_direct(&self, context: &LatentGrid, q: &QuerySpec, action: &[f32]) -> Result<Vec<f32>> {
        let mut batch = self.new_batch();
        batch.push_direct(context, q.tau, q.points, Some(action))?;
        Ok(self.run(&batch))
    }

    /// Predicts the next grid for many `(context, tau, action)` problems in
    /// one batched forward pass.
    pub fn predict_many(&self, problems: &[(&LatentGrid, f64, &[f32])]) -> Result<Vec<Vec<f32>>> {
        let mut batch = self.new_batch();
        for (ctx, tau, a) in problems {
            batch.push_direct(ctx, *tau, QueryPoints::Grid, Some(a))?;
        }
        let out = self.run(&batch);
        let d = self.base.config().input_dim;
        Ok(batch
            .segments
            .iter()
            .map(|s| out[s.queries.start * d..s.queries.end * d].to_vec())
            .collect())
    }

    /// Batch-mean loss with gradients for base and action parameters.
    pub fn loss_and_grad(&self, clips: &[ActionClip]) -> Result<(f64, Vec<f32>, Vec<f32>)> {
        let (losses, gb, ga) = self.loss_and_grad_inner(clips)?;
        Ok((check_losses(&losses, 0)?, gb, ga))
    }

    fn loss_and_grad_inner(&self, clips: &[ActionClip]) -> Result<(Vec<f64>, Vec<f32>, Vec<f32>)> {
        if clips.is_empty() {
            return Err(invalid("training batch is empty"));
        }
        let mut batch = self.new_batch();
        for c in clips {
            let flat = self.flat_actions(&c.actions, c.grid.num_frames().saturating_sub(1))?;
            batch.push_teacher_forced(&c.grid, Some(&flat))?;
        }
        let grids: Vec<&LatentGrid> = clips.iter().map(|c| &c.grid).collect();
        let targets = teacher_targets(&grids);
        let net = self.net();
        let (out, cache) = self.base.run(&batch, Some(&net), true);
        let mut d_out = vec![0.0f32; out.len()];
        let losses = batch_loss(&out, &batch, &targets, &mut d_out, self.base.config().input_dim);
        let mut gb = vec![0.0f32; self.base.num_params()];
        let mut ga = vec![0.0f32; self.params.len()];
        if losses.iter().all(|l| l.is_finite()) {
            self.base
                .backprop(&batch, Some(&net), &cache.expect("kept"), &d_out, &mut gb, Some(&mut ga));
        }
        Ok((losses, gb, ga))
    }

    /// Mean teacher-forced loss over clips, without gradients.
    pub fn evaluate_loss(&self, clips: &[ActionClip]) -> Result<f64> {
        if clips.is_empty() {
            return Err(invalid("no clips to evaluate"));
        }
        let mut total = 0.0;
        for c in clips {
            let pred = self.forward_conditioned(&c.grid, &c.actions)?;
            total += crate::predictor::smooth_l1(
                pred.data(),
                &c.grid.data()[c.grid.frame_len()..],
                crate::predictor::SMOOTH_L1_BETA,
            )?;
        }
        Ok(total / clips.len() as f64)
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let mut c = self.base.to_checkpoint(step);
        c.push(Tensor::vector("meta.action", vec![self.action_dim as f32]));
        c.push_params(&self.params, self.params.data(), "");
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = checkpoint_predictor_config(ckpt)?;
        let base = Predictor::load_checkpoint(cfg, ckpt)?;
        let meta = &ckpt.require("meta.action")?.data;
        if meta.len() != 1 {
            return Err(invalid("meta.action must hold the action dimension"));
        }
        let action_dim = meta_usize(meta[0], "action_dim")?;
        let mut cp = attach_action_blocks(base, action_dim, &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.check_names(&param_names(&cp.params, ""), &["action."])?;
        let ps = cp.params.clone();
        ckpt.read_params(&ps, "", cp.params.data_mut())?;
        Ok(cp)
    }
}

/// A latent clip with one conditioning vector per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionClip {
    pub grid: LatentGrid,
    pub actions: Vec<Vec<f32>>,
}

impl ActionClip {
    pub fn new(grid: LatentGrid, actions: Vec<Vec<f32>>) -> Result<Self> {
        if actions.len() + 1 != grid.num_frames() {
            return Err(shape(format!(
                "{} frames need {} actions, got {}",
                grid.num_frames(),
                grid.num_frames().saturating_sub(1),
                actions.len()
            )));
        }
        Ok(Self { grid, actions })
    }

    /// Window of `len` frames starting at `start`, with its actions.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len < 2 || start + len > self.grid.num_frames() {
            return Err(invalid(format!(
                "window {start}+{len} outside {} frames",
                self.grid.num_frames()
            )));
        }
        Ok(Self {
            grid: self.grid.slice(start..start + len)?,
            actions: self.actions[start..start + len - 1].to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    Scratch,
    ActionOnly,
    Full,
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Self::Scratch),
            "action-only" => Ok(Self::ActionOnly),
            "full" | "fine-tuned" => Ok(Self::Full),
            other => Err(invalid(format!(
                "unknown fine-tuning mode `{other}` (expected scratch, action-only or full)"
            ))),
        }
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Scratch => "scratch",
            Self::ActionOnly => "action-only",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub clip_frames: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            clip_frames: 4,
            batch_size: 16,
            steps: 2000,
            warmup_steps: 100,
            base_lr: 1e-3,
            weight_decay: 0.4,
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_frames < 2 {
            return Err(invalid("clip_frames must be at least 2"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if self.warmup_steps > self.steps {
            return Err(invalid("warmup_steps exceeds steps"));
        }
        if !(self.base_lr > 0.0) {
            return Err(invalid("base_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(invalid("heldout_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Splits trajectories by index: the last `fraction` (at least one when
/// there are two or more) are held out.
pub fn split_heldout<T: Clone>(items: &[T], fraction: f64) -> (Vec<T>, Vec<T>) {
    let n = items.len();
    let mut held = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        held = held.max(1);
    }
    held = held.min(n.saturating_sub(1));
    (items[..n - held].to_vec(), items[n - held..].to_vec())
}

/// Non-overlapping evaluation windows covering each trajectory.
pub fn evaluation_windows(trajs: &[ActionClip], len: usize) -> Result<Vec<ActionClip>> {
    let mut out = Vec::new();
    for t in trajs {
        let mut s = 0;
        while s + len <= t.grid.num_frames() {
            out.push(t.window(s, len)?);
            s += len - 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub model: ConditionedPredictor,
    pub mode: FinetuneMode,
    pub log: Vec<LogRow>,
    pub heldout_before: f64,
    pub heldout_after: f64,
    pub train_trajectories: usize,
    pub heldout_trajectories: usize,
}

/// Trains action-conditioned prediction on trajectories.
///
/// `Scratch` re-initializes every weight from `cfg.seed` first; `Full`
/// trains everything starting from `model`; `ActionOnly` updates only the
/// action projection and action blocks.
pub fn finetune(
    model: ConditionedPredictor,
    trajectories: &[ActionClip],
    mode: FinetuneMode,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if trajectories.is_empty() {
        return Err(invalid("trajectory dataset is empty"));
    }
    let mut model = model;
    if mode == FinetuneMode::Scratch {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let base = crate::predictor::init_predictor(model.base.config().clone(), &mut rng)?;
        model = attach_action_blocks(base, model.action_dim, &mut rng)?;
    }
    let (train, held) = split_heldout(trajectories, cfg.heldout_fraction);
    let usable: Vec<&ActionClip> = train
        .iter()
        .filter(|t| t.grid.num_frames() >= cfg.clip_frames)
        .collect();
    if usable.is_empty() {
        return Err(invalid(format!(
            "no training trajectory has {} frames",
            cfg.clip_frames
        )));
    }
    let eval = evaluation_windows(if held.is_empty() { &train } else { &held }, cfg.clip_frames)?;
    let heldout_before = model.evaluate_loss(&eval)?;

    let adam = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let base_decay = model.base.params().decay_mask();
    let act_decay = model.params.decay_mask();
    let mut opt_base = OptState::new(model.base.num_params());
    let mut opt_act = OptState::new(model.params.len());
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step);
        let clips = (0..cfg.batch_size)
            .map(|_| {
                let t = usable[rng.random_range(0..usable.len())];
                let start = rng.random_range(0..=t.grid.num_frames() - cfg.clip_frames);
                t.window(start, cfg.clip_frames)
            })
            .collect::<Result<Vec<_>>>()?;
        let (losses, gb, ga) = model.loss_and_grad_inner(&clips)?;
        let loss = check_losses(&losses, step)?;
        let lr = lr_at_step(step, cfg.warmup_steps, cfg.base_lr);
        if mode != FinetuneMode::ActionOnly {
            adam.update(model.base.params_mut().data_mut(), &gb, &base_decay, &mut opt_base, lr);
        }
        adam.update(model.params.data_mut(), &ga, &act_decay, &mut opt_act, lr);
        log.push(LogRow { step, loss, lr });
    }
    let heldout_after = model.evaluate_loss(&eval)?;
    log::info!(
        "finetune {mode}: held-out loss {heldout_before:.5} -> {heldout_after:.5} over {} steps",
        cfg.steps
    );
    Ok(FinetuneReport {
        model,
        mode,
        log,
        heldout_before,
        heldout_after,
        train_trajectories: train.len(),
        heldout_trajectories: held.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping_concatenates_in_order() {
        let acts: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, -(i as f32)]).collect();
        let g = embed_action_sequence(&acts, 5).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].len(), 10);
        assert_eq!(&g[1][..4], &[5.0, -5.0, 6.0, -6.0]);
        assert_eq!(ungroup_actions(&g, 2).unwrap(), acts);
        assert_eq!(embed_action_sequence(&acts, 1).unwrap(), acts);
        let eleven: Vec<Vec<f32>> = (0..11).map(|_| vec![0.0, 0.0]).collect();
        assert!(embed_action_sequence(&eleven, 5).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("action-only".parse::<FinetuneMode>().unwrap(), FinetuneMode::ActionOnly);
        assert_eq!("scratch".parse::<FinetuneMode>().unwrap(), FinetuneMode::Scratch);
        assert!("partial".parse::<FinetuneMode>().is_err());
    }

    #[test]
    fn heldout_split_sizes() {
        let v: Vec<usize> = (0..20).collect();
        let (a, b) = split_heldout(&v, 0.1);
        assert_eq!((a.len(), b.len()), (18, 2));
        assert_eq!(b, vec![18, 19]);
        let (a, b) = split_heldout(&[1], 0.1);
        assert_eq!((a.len(), b.len()), (1, 0));
    }
}

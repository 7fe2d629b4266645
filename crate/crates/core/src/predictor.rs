//! Cross-attention future predictor.
//!
//! Queries start from a learned embedding and only ever attend to context
//! tokens, never to each other. Position and time enter exclusively through
//! the rotary embedding applied to queries and keys.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LatentGrid;
use crate::error::{invalid, shape, Error, Result};
use crate::linalg::{gemm, View};
use crate::nn::{gelu, gelu_grad, Init, LayerNorm, Linear, LnCache, ParamSet};
use crate::rope::{patch_center, Coord3, RopeConfig, RopeTable};

pub const SMOOTH_L1_BETA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub rope: RopeConfig,
}

impl PredictorConfig {
    /// The 768-wide, 12-block, 12-head configuration over 768-d features.
    pub fn base() -> Self {
        Self {
            input_dim: 768,
            model_dim: 768,
            num_blocks: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
            rope: RopeConfig::base(),
        }
    }

    /// Desk-scale default: D=32, D'=64, two blocks, two heads.
    pub fn desk() -> Self {
        Self::tiny(32, 64, 2, 2).expect("valid desk config")
    }

    /// Builds a config whose rotary layout is derived from the head width.
    pub fn tiny(input_dim: usize, model_dim: usize, blocks: usize, heads: usize) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(invalid(format!(
                "model_dim {model_dim} is not divisible by num_heads {heads}"
            )));
        }
        Ok(Self {
            input_dim,
            model_dim,
            num_blocks: blocks,
            num_heads: heads,
            mlp_ratio: 4.0,
            rope: RopeConfig::for_head_dim(model_dim / heads)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.model_dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.model_dim == 0 {
            return Err(invalid("input_dim and model_dim must be positive"));
        }
        if self.num_heads == 0 {
            return Err(invalid("num_heads must be positive"));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(invalid(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 {
            return Err(invalid("num_blocks must be at least 1"));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(invalid(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        if self.rope.head_dim != self.head_dim() {
            return Err(invalid(format!(
                "rope head_dim {} does not match model_dim/num_heads = {}",
                self.rope.head_dim,
                self.head_dim()
            )));
        }
        self.rope.validate()
    }
}

/// Which spatial positions a direct prediction asks for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueryPoints {
    /// Every patch of the context grid.
    Grid,
    /// One patch `(row, col)` of the context grid.
    Single { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuerySpec {
    pub tau: f64,
    pub points: QueryPoints,
}

impl QuerySpec {
    pub fn grid(tau: f64) -> Self {
        Self {
            tau,
            points: QueryPoints::Grid,
        }
    }

    pub fn single(tau: f64, row: usize, col: usize) -> Self {
        Self {
            tau,
            points: QueryPoints::Single { row, col },
        }
    }
}

/// Dense boolean attention mask, `queries x keys`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    pub queries: usize,
    pub keys: usize,
    pub allowed: Vec<bool>,
}

impl BlockMask {
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn row_sum(&self, q: usize) -> usize {
        self.allowed[q * self.keys..(q + 1) * self.keys]
            .iter()
            .filter(|&&a| a)
            .count()
    }
}

/// Teacher-forcing mask: keys are the tokens of frames `1..T-1`, the query
/// block predicting frame `t+1` sees key frames `1..=t`.
pub fn block_triangular_mask(frames: usize, patches: usize) -> Result<BlockMask> {
    if frames < 2 {
        return Err(invalid(format!(
            "need at least 2 frames for prediction targets, got {frames}"
        )));
    }
    let n = (frames - 1) * patches;
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        let visible = (q / patches.max(1) + 1) * patches;
        allowed[q * n..q * n + visible].iter_mut().for_each(|a| *a = true);
    }
    Ok(BlockMask {
        queries: n,
        keys: n,
        allowed,
    })
}

/// Smooth-L1 loss, mean over elements.
pub fn smooth_l1(pred: &[f32], target: &[f32], beta: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape(format!(
            "prediction has {} elements, target {}",
            pred.len(),
            target.len()
        )));
    }
    if !(beta > 0.0) {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| smooth_l1_term(p as f64 - t as f64, beta))
        .sum();
    Ok(sum / pred.len() as f64)
}

fn smooth_l1_term(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        a * a / (2.0 * beta)
    } else {
        a - beta / 2.0
    }
}

fn smooth_l1_slope(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Loss and `dL/dpred` for a mean reduction scaled by `weight`.
pub(crate) fn smooth_l1_with_grad(pred: &[f32], target: &[f32], weight: f64, grad: &mut [f32]) -> f64 {
    let n = pred.len() as f64;
    let mut sum = 0.0;
    for ((g, &p), &t) in grad.iter_mut().zip(pred).zip(target) {
        let d = p as f64 - t as f64;
        sum += smooth_l1_term(d, SMOOTH_L1_BETA);
        *g = (weight * smooth_l1_slope(d, SMOOTH_L1_BETA) / n) as f32;
    }
    sum / n
}

/// One independent prediction problem inside a batch: a contiguous range of
/// context keys and the queries that read from them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Segment {
    pub keys: Range<usize>,
    pub queries: Range<usize>,
}

/// A batch of prediction problems flattened into shared buffers.
#[derive(Debug, Clone)]
pub(crate) struct AttnBatch {
    pub input_dim: usize,
    pub action_dim: usize,
    pub ctx: Vec<f32>,
    pub ctx_coords: Vec<Coord3>,
    pub query_coords: Vec<Coord3>,
    /// Number of leading segment keys each query may attend to.
    pub visible: Vec<usize>,
    pub segments: Vec<Segment>,
    /// `queries x action_dim`, empty when unconditioned.
    pub actions: Vec<f32>,
}

fn grid_coords(grid: &LatentGrid, frames: Range<usize>) -> Vec<Coord3> {
    let (_, h, w, _) = grid.shape();
    let mut out = Vec::with_capacity(frames.len() * h * w);
    for t in frames {
        let tau = grid.timestamps()[t];
        for i in 0..h {
            for j in 0..w {
                out.push(Coord3::new(tau, patch_center(i, h), patch_center(j, w)));
            }
        }
    }
    out
}

fn check_finite(values: &[f32], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} element {i} is {}", values[i]))),
        None => Ok(()),
    }
}

impl AttnBatch {
    pub fn new(input_dim: usize, action_dim: usize) -> Self {
        Self {
            input_dim,
            action_dim,
            ctx: Vec::new(),
            ctx_coords: Vec::new(),
            query_coords: Vec::new(),
            visible: Vec::new(),
            segments: Vec::new(),
            actions: Vec::new(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.query_coords.len()
    }

    fn check_grid(&self, grid: &LatentGrid) -> Result<()> {
        if grid.dim() != self.input_dim {
            return Err(shape(format!(
                "grid feature dim {} does not match predictor input dim {}",
                grid.dim(),
                self.input_dim
            )));
        }
        check_finite(grid.data(), "latent grid")
    }

    fn push_actions(&mut self, action: Option<&[f32]>, count: usize) -> Result<()> {
        match (action, self.action_dim) {
            (None, 0) => Ok(()),
            (Some(a), n) if n > 0 && a.len() == n => {
                check_finite(a, "action")?;
                for _ in 0..count {
                    self.actions.extend_from_slice(a);
                }
                Ok(())
            }
            (Some(a), n) => Err(shape(format!(
                "action has {} values, model expects {n}",
                a.len()
            ))),
            (None, n) => Err(invalid(format!("model expects {n}-d actions, none given"))),
        }
    }

    /// Teacher-forced segment: keys are frames `0..T-1`, queries predict
    /// frames `1..T`. `actions` holds one vector per transition.
    pub fn push_teacher_forced(&mut self, grid: &LatentGrid, actions: Option<&[f32]>) -> Result<()> {
        self.check_grid(grid)?;
        let t = grid.num_frames();
        if t < 2 {
            return Err(invalid(format!(
                "need at least 2 frames for prediction targets, got {t}"
            )));
        }
        let hw = grid.tokens_per_frame();
        if let Some(a) = actions {
            if self.action_dim == 0 || a.len() != (t - 1) * self.action_dim {
                return Err(shape(format!(
                    "expected {} transitions of {}-d actions, got {} values",
                    t - 1,
                    self.action_dim,
                    a.len()
                )));
            }
        }
        let k0 = self.ctx_coords.len();
        let q0 = self.query_coords.len();
        self.ctx.extend_from_slice(&grid.data()[..(t - 1) * grid.frame_len()]);
        self.ctx_coords.extend(grid_coords(grid, 0..t - 1));
        self.query_coords.extend(grid_coords(grid, 1..t));
        for f in 1..t {
            self.visible.extend(std::iter::repeat_n(f * hw, hw));
            let act = actions.map(|a| &a[(f - 1) * self.action_dim..f * self.action_dim]);
            self.push_actions(act, hw)?;
        }
        self.segments.push(Segment {
            keys: k0..self.ctx_coords.len(),
            queries: q0..self.query_coords.len(),
        });
        Ok(())
    }

    /// Direct segment: queries at `tau` attend to every context token.
    pub fn push_direct(
        &mut self,
        context: &LatentGrid,
        tau: f64,
        points: QueryPoints,
        action: Option<&[f32]>,
    ) -> Result<()> {
        self.check_grid(context)?;
        if context.num_frames() == 0 {
            return Err(invalid("context is empty"));
        }
        let last = context.last_timestamp();
        if !tau.is_finite() || tau <= last {
            return Err(invalid(format!(
                "query timestamp {tau} must be later than last context timestamp {last}"
            )));
        }
        let (t, h, w, _) = context.shape();
        let cells: Vec<(usize, usize)> = match points {
            QueryPoints::Grid => (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect(),
            QueryPoints::Single { row, col } => {
                if row >= h || col >= w {
                    return Err(invalid(format!(
                        "query patch ({row}, {col}) outside {h}x{w} grid"
                    )));
                }
                vec![(row, col)]
            }
        };
        let k0 = self.ctx_coords.len();
        let q0 = self.query_coords.len();
        self.ctx.extend_from_slice(context.data());
        self.ctx_coords.extend(grid_coords(context, 0..t));
        for &(i, j) in &cells {
            self.query_coords
                .push(Coord3::new(tau, patch_center(i, h), patch_center(j, w)));
            self.visible.push(t * h * w);
        }
        self.push_actions(action, cells.len())?;
        self.segments.push(Segment {
            keys: k0..self.ctx_coords.len(),
            queries: q0..self.query_coords.len(),
        });
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    attn_norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    mlp_norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    input: Linear,
    query: usize,
    blocks: Vec<BlockLayout>,
    final_norm: LayerNorm,
    output: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct ActionBlockLayout {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub scale: usize,
}

/// Offsets of the action pathway inside its own parameter set.
#[derive(Debug, Clone)]
pub(crate) struct ActionLayout {
    pub proj: Linear,
    pub blocks: Vec<ActionBlockLayout>,
}

impl ActionLayout {
    pub fn build<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        action_dim: usize,
        model_dim: usize,
        num_blocks: usize,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(ps, "action.proj", action_dim, model_dim, rng);
        let blocks = (0..num_blocks)
            .map(|b| {
                let name = format!("action.blocks.{b}");
                ActionBlockLayout {
                    norm: LayerNorm::new(ps, &format!("{name}.norm"), 2 * model_dim, rng),
                    fc1: Linear::new(ps, &format!("{name}.fc1"), 2 * model_dim, model_dim, rng),
                    fc2: Linear::new(ps, &format!("{name}.fc2"), model_dim, model_dim, rng),
                    scale: ps.add(
                        format!("{name}.scale"),
                        vec![model_dim],
                        Init::Zeros,
                        false,
                        rng,
                    ),
                }
            })
            .collect();
        Self { proj, blocks }
    }
}

/// Action pathway handed to the shared forward/backward.
pub(crate) struct ActionNet<'a> {
    pub layout: &'a ActionLayout,
    pub params: &'a [f32],
}

struct ActionCache {
    ln: LnCache,
    z: Vec<f32>,
    pre: Vec<f32>,
    hidden: Vec<f32>,
    y: Vec<f32>,
}

struct BlockCache {
    ln1: LnCache,
    u1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    att: Vec<f32>,
    ln2: LnCache,
    u2: Vec<f32>,
    pre: Vec<f32>,
    hidden: Vec<f32>,
    action: Option<ActionCache>,
}

pub(crate) struct ForwardCache {
    ctx: Vec<f32>,
    rope_q: RopeTable,
    rope_k: RopeTable,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    final_u: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Predictor {
    cfg: PredictorConfig,
    params: ParamSet,
    layout: Layout,
}

/// Builds a predictor with weights drawn from `rng`.
pub fn init_predictor<R: Rng + ?Sized>(cfg: PredictorConfig, rng: &mut R) -> Result<Predictor> {
    cfg.validate()?;
    let mut ps = ParamSet::default();
    let (d, dm, hid) = (cfg.input_dim, cfg.model_dim, cfg.mlp_hidden());
    let input = Linear::new(&mut ps, "input_proj", d, dm, rng);
    let query = ps.add("query_embed".into(), vec![dm], Init::Normal(0.02), false, rng);
    let blocks = (0..cfg.num_blocks)
        .map(|b| {
            let name = format!("blocks.{b}");
            BlockLayout {
                attn_norm: LayerNorm::new(&mut ps, &format!("{name}.attn_norm"), dm, rng),
                q: Linear::new(&mut ps, &format!("{name}.attn.q"), dm, dm, rng),
                k: Linear::new(&mut ps, &format!("{name}.attn.k"), dm, dm, rng),
                v: Linear::new(&mut ps, &format!("{name}.attn.v"), dm, dm, rng),
                out: Linear::new(&mut ps, &format!("{name}.attn.out"), dm, dm, rng),
                mlp_norm: LayerNorm::new(&mut ps, &format!("{name}.mlp_norm"), dm, rng),
                fc1: Linear::new(&mut ps, &format!("{name}.mlp.fc1"), dm, hid, rng),
                fc2: Linear::new(&mut ps, &format!("{name}.mlp.fc2"), hid, dm, rng),
            }
        })
        .collect();
    let final_norm = LayerNorm::new(&mut ps, "final_norm", dm, rng);
    let output = Linear::new(&mut ps, "output_proj", dm, d, rng);
    Ok(Predictor {
        cfg,
        params: ps,
        layout: Layout {
            input,
            query,
            blocks,
            final_norm,
            output,
        },
    })
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Concatenates two row-major matrices column-wise.
fn concat_cols(a: &[f32], b: &[f32], rows: usize, ca: usize, cb: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        out.extend_from_slice(&a[r * ca..(r + 1) * ca]);
        out.extend_from_slice(&b[r * cb..(r + 1) * cb]);
    }
    out
}

impl Predictor {
    /// Seeded constructor, equivalent to [`init_predictor`] with ChaCha8.
    pub fn new(cfg: PredictorConfig, seed: u64) -> Result<Self> {
        init_predictor(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Teacher-forced predictions for frames `2..=T`, stamped with their
    /// target timestamps.
    pub fn forward_train(&self, grid: &LatentGrid) -> Result<LatentGrid> {
        let mut batch = AttnBatch::new(self.cfg.input_dim, 0);
        batch.push_teacher_forced(grid, None)?;
        let (out, _) = self.run(&batch, None, false);
        let (t, h, w, d) = grid.shape();
        LatentGrid::new((t - 1, h, w, d), out, grid.timestamps()[1..].to_vec())
    }

    /// Prediction at an arbitrary future timestamp from the full context.
    /// Returns `H*W*D` values for a grid query or `D` for a single patch.
    pub fn predict_direct(&self, context: &LatentGrid, q: &QuerySpec) -> Result<Vec<f32>> {
        let mut batch = AttnBatch::new(self.cfg.input_dim, 0);
        batch.push_direct(context, q.tau, q.points, None)?;
        Ok(self.run(&batch, None, false).0)
    }

    /// Set-based prediction: context tokens with explicit coordinates, one
    /// output per query coordinate, every query seeing every token.
    pub fn predict_points(&self, tokens: &[f32], coords: &[Coord3], queries: &[Coord3]) -> Result<Vec<f32>> {
        let d = self.cfg.input_dim;
        if coords.is_empty() || tokens.len() != coords.len() * d {
            return Err(shape(format!(
                "{} context coordinates need {} token values, got {}",
                coords.len(),
                coords.len() * d,
                tokens.len()
            )));
        }
        check_finite(tokens, "context tokens")?;
        let mut batch = AttnBatch::new(d, 0);
        batch.ctx = tokens.to_vec();
        batch.ctx_coords = coords.to_vec();
        batch.query_coords = queries.to_vec();
        batch.visible = vec![coords.len(); queries.len()];
        batch.segments.push(Segment {
            keys: 0..coords.len(),
            queries: 0..queries.len(),
        });
        Ok(self.run(&batch, None, false).0)
    }

    /// Forward pass over a flattened batch; returns `queries x D` outputs and
    /// the activations needed for backpropagation when `keep` is set.
    pub(crate) fn run(
        &self,
        batch: &AttnBatch,
        action: Option<&ActionNet>,
        keep: bool,
    ) -> (Vec<f32>, Option<ForwardCache>) {
        let cfg = &self.cfg;
        let p = self.params.data();
        let l = &self.layout;
        let (dm, nh) = (cfg.model_dim, cfg.num_heads);
        let nq = batch.num_queries();
        let nk = batch.ctx_coords.len();

        let ctx = l.input.forward(p, &batch.ctx, nk);
        let rope_q = RopeTable::new(&cfg.rope, &batch.query_coords);
        let rope_k = RopeTable::new(&cfg.rope, &batch.ctx_coords);
        let q0 = &p[l.query..l.query + dm];
        let mut h: Vec<f32> = q0.iter().copied().cycle().take(nq * dm).collect();
        let embed = match action {
            Some(a) => a.layout.proj.forward(a.params, &batch.actions, nq),
            None => Vec::new(),
        };

        let mut caches = Vec::new();
        for (b, bl) in l.blocks.iter().enumerate() {
            let (u1, ln1) = bl.attn_norm.forward(p, &h, keep);
            let mut q = bl.q.forward(p, &u1, nq);
            rope_q.apply(&mut q, nh, &cfg.rope, false);
            let mut k = bl.k.forward(p, &ctx, nk);
            rope_k.apply(&mut k, nh, &cfg.rope, false);
            let v = bl.v.forward(p, &ctx, nk);
            let (att, probs) = attention(cfg, batch, &q, &k, &v, keep);
            add_into(&mut h, &bl.out.forward(p, &att, nq));

            let (u2, ln2) = bl.mlp_norm.forward(p, &h, keep);
            let pre = bl.fc1.forward(p, &u2, nq);
            let hidden: Vec<f32> = pre.iter().map(|&x| gelu(x)).collect();
            add_into(&mut h, &bl.fc2.forward(p, &hidden, nq));

            let act_cache = action.map(|a| {
                let ab = &a.layout.blocks[b];
                let zin = concat_cols(&h, &embed, nq, dm, dm);
                let (z, ln) = ab.norm.forward(a.params, &zin, keep);
                let apre = ab.fc1.forward(a.params, &z, nq);
                let ahid: Vec<f32> = apre.iter().map(|&x| gelu(x)).collect();
                let y = ab.fc2.forward(a.params, &ahid, nq);
                let scale = &a.params[ab.scale..ab.scale + dm];
                for (row_h, row_y) in h.chunks_exact_mut(dm).zip(y.chunks_exact(dm)) {
                    for c in 0..dm {
                        row_h[c] += scale[c] * row_y[c];
                    }
                }
                ActionCache {
                    ln,
                    z,
                    pre: apre,
                    hidden: ahid,
                    y,
                }
            });

            if keep {
                caches.push(BlockCache {
                    ln1,
                    u1,
                    q,
                    k,
                    v,
                    probs,
                    att,
                    ln2,
                    u2,
                    pre,
                    hidden,
                    action: act_cache,
                });
            }
        }
        let (final_u, final_ln) = l.final_norm.forward(p, &h, keep);
        let out = l.output.forward(p, &final_u, nq);
        let cache = keep.then(|| ForwardCache {
            ctx,
            rope_q,
            rope_k,
            blocks: caches,
            final_ln,
            final_u,
        });
        (out, cache)
    }

    /// Accumulates `dL/dparams` into `grads` (and the action pathway's
    /// gradient into `action_grads`) given `dL/doutput`.
    pub(crate) fn backprop(
        &self,
        batch: &AttnBatch,
        action: Option<&ActionNet>,
        cache: &ForwardCache,
        d_out: &[f32],
        grads: &mut [f32],
        mut action_grads: Option<&mut [f32]>,
    ) {
        let cfg = &self.cfg;
        let p = self.params.data();
        let l = &self.layout;
        let (dm, nh) = (cfg.model_dim, cfg.num_heads);
        let nq = batch.num_queries();
        let nk = batch.ctx_coords.len();

        let du = l.output.backward(p, grads, &cache.final_u, d_out, nq, true);
        let mut dh = l.final_norm.backward(p, grads, &cache.final_ln, &du);
        let mut dctx = vec![0.0f32; nk * dm];
        let mut d_embed = vec![0.0f32; if action.is_some() { nq * dm } else { 0 }];

        for (b, bl) in l.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[b];
            if let (Some(a), Some(ac)) = (action, &c.action) {
                let ag = action_grads.as_deref_mut().expect("action gradient buffer");
                let ab = &a.layout.blocks[b];
                let scale = &a.params[ab.scale..ab.scale + dm];
                let mut dy = vec![0.0f32; nq * dm];
                for r in 0..nq {
                    for col in 0..dm {
                        let idx = r * dm + col;
                        dy[idx] = dh[idx] * scale[col];
                        ag[ab.scale + col] += dh[idx] * ac.y[idx];
                    }
                }
                let mut dpre = ab.fc2.backward(a.params, ag, &ac.hidden, &dy, nq, true);
                dpre.iter_mut()
                    .zip(&ac.pre)
                    .for_each(|(g, &x)| *g *= gelu_grad(x));
                let dz = ab.fc1.backward(a.params, ag, &ac.z, &dpre, nq, true);
                let dzin = ab.norm.backward(a.params, ag, &ac.ln, &dz);
                for r in 0..nq {
                    let row = &dzin[r * 2 * dm..(r + 1) * 2 * dm];
                    add_into(&mut dh[r * dm..(r + 1) * dm], &row[..dm]);
                    add_into(&mut d_embed[r * dm..(r + 1) * dm], &row[dm..]);
                }
            }

            let mut dpre = bl.fc2.backward(p, grads, &c.hidden, &dh, nq, true);
            dpre.iter_mut()
                .zip(&c.pre)
                .for_each(|(g, &x)| *g *= gelu_grad(x));
            let du2 = bl.fc1.backward(p, grads, &c.u2, &dpre, nq, true);
            add_into(&mut dh, &bl.mlp_norm.backward(p, grads, &c.ln2, &du2));

            let datt = bl.out.backward(p, grads, &c.att, &dh, nq, true);
            let (mut dq, mut dk, dv) = attention_backward(cfg, batch, c, &datt);
            cache.rope_q.apply(&mut dq, nh, &cfg.rope, true);
            cache.rope_k.apply(&mut dk, nh, &cfg.rope, true);
            let du1 = bl.q.backward(p, grads, &c.u1, &dq, nq, true);
            add_into(&mut dctx, &bl.k.backward(p, grads, &cache.ctx, &dk, nk, true));
            add_into(&mut dctx, &bl.v.backward(p, grads, &cache.ctx, &dv, nk, true));
            add_into(&mut dh, &bl.attn_norm.backward(p, grads, &c.ln1, &du1));
        }

        let gq = &mut grads[l.query..l.query + dm];
        for row in dh.chunks_exact(dm) {
            add_into(gq, row);
        }
        l.input.backward(p, grads, &batch.ctx, &dctx, nk, false);
        if let Some(a) = action {
            let ag = action_grads.expect("action gradient buffer");
            a.layout
                .proj
                .backward(a.params, ag, &batch.actions, &d_embed, nq, false);
        }
    }
}

fn prob_offsets(batch: &AttnBatch, heads: usize) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(batch.segments.len() + 1);
    let mut acc = 0;
    for s in &batch.segments {
        offsets.push(acc);
        acc += heads * s.queries.len() * s.keys.len();
    }
    offsets.push(acc);
    offsets
}

/// Masked multi-head attention of every segment's queries over its keys.
/// Returns the attended values and, when `keep`, all attention weights.
fn attention(
    cfg: &PredictorConfig,
    batch: &AttnBatch,
    q: &[f32],
    k: &[f32],
    v: &[f32],
    keep: bool,
) -> (Vec<f32>, Vec<f32>) {
    let (dm, nh, dh) = (cfg.model_dim, cfg.num_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f32).sqrt();
    let offsets = prob_offsets(batch, nh);
    let mut out = vec![0.0f32; q.len()];
    let mut probs = if keep {
        vec![0.0f32; offsets[offsets.len() - 1]]
    } else {
        Vec::new()
    };
    let mut scratch = Vec::new();
    for (si, s) in batch.segments.iter().enumerate() {
        let (nq, nk) = (s.queries.len(), s.keys.len());
        for head in 0..nh {
            let block = nq * nk;
            let buf: &mut [f32] = if keep {
                let o = offsets[si] + head * block;
                &mut probs[o..o + block]
            } else {
                scratch.resize(block, 0.0);
                &mut scratch[..]
            };
            let col = head * dh;
            gemm(
                nq,
                dh,
                nk,
                q,
                View::rows(s.queries.start * dm + col, dm),
                k,
                View::transposed(s.keys.start * dm + col, dm),
                buf,
                View::rows(0, nk),
                0.0,
            );
            for (r, row) in buf.chunks_exact_mut(nk).enumerate() {
                let vis = batch.visible[s.queries.start + r];
                let max = row[..vis]
                    .iter()
                    .fold(f32::NEG_INFINITY, |m, &x| m.max(x * scale));
                let mut sum = 0.0f32;
                for x in &mut row[..vis] {
                    *x = (*x * scale - max).exp();
                    sum += *x;
                }
                let inv = 1.0 / sum;
                row[..vis].iter_mut().for_each(|x| *x *= inv);
                row[vis..].iter_mut().for_each(|x| *x = 0.0);
            }
            gemm(
                nq,
                nk,
                dh,
                buf,
                View::rows(0, nk),
                v,
                View::rows(s.keys.start * dm + col, dm),
                &mut out,
                View::rows(s.queries.start * dm + col, dm),
                0.0,
            );
        }
    }
    (out, probs)
}

fn attention_backward(
    cfg: &PredictorConfig,
    batch: &AttnBatch,
    c: &BlockCache,
    d_att: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (dm, nh, dh) = (cfg.model_dim, cfg.num_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f32).sqrt();
    let offsets = prob_offsets(batch, nh);
    let mut dq = vec![0.0f32; c.q.len()];
    let mut dk = vec![0.0f32; c.k.len()];
    let mut dv = vec![0.0f32; c.v.len()];
    let mut ds = Vec::new();
    for (si, s) in batch.segments.iter().enumerate() {
        let (nq, nk) = (s.queries.len(), s.keys.len());
        for head in 0..nh {
            let block = nq * nk;
            let o = offsets[si] + head * block;
            let pr = &c.probs[o..o + block];
            let col = head * dh;
            let qv = View::rows(s.queries.start * dm + col, dm);
            let kv = View::rows(s.keys.start * dm + col, dm);
            ds.resize(block, 0.0);
            // dP = dO V^T
            gemm(
                nq,
                dh,
                nk,
                d_att,
                qv,
                &c.v,
                View::transposed(s.keys.start * dm + col, dm),
                &mut ds,
                View::rows(0, nk),
                0.0,
            );
            // dV += P^T dO
            gemm(nk, nq, dh, pr, View::transposed(0, nk), d_att, qv, &mut dv, kv, 1.0);
            for (drow, prow) in ds.chunks_exact_mut(nk).zip(pr.chunks_exact(nk)) {
                let dot: f32 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            gemm(nq, nk, dh, &ds, View::rows(0, nk), &c.k, kv, &mut dq, qv, 0.0);
            gemm(nk, nq, dh, &ds, View::transposed(0, nk), &c.q, qv, &mut dk, kv, 1.0);
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_parameter_count_near_reference() {
        let p = Predictor::new(PredictorConfig::base(), 0).unwrap();
        let n = p.num_params() as f64;
        assert!((n / 86e6 - 1.0).abs() < 0.05, "{n}");
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut cfg = PredictorConfig::base();
        cfg.model_dim = 1537;
        cfg.num_heads = 24;
        assert!(init_predictor(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(PredictorConfig::tiny(32, 65, 1, 2).is_err());
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(&[1.0], &[1.0], 0.1).unwrap(), 0.0);
        assert!((smooth_l1(&[0.05], &[0.0], 0.1).unwrap() - 0.0125).abs() < 1e-9);
        assert!((smooth_l1(&[1.0], &[0.0], 0.1).unwrap() - 0.95).abs() < 1e-9);
        assert!(smooth_l1(&[1.0], &[0.0, 1.0], 0.1).is_err());
    }
}

//! Cross-entropy-method planning in latent space and closed-loop episode
//! evaluation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::action::{embed_action_sequence, ActionClip, ConditionedPredictor};
use crate::data::LatentGrid;
use crate::encoder::ToyEncoder;
use crate::env::{
    env_render, env_reset, env_step, is_success, EnvSpec, EnvState, Trajectory, ACTION_DIM,
};
use crate::error::{invalid, shape, Result};

pub const STD_FLOOR: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanParams {
    /// Candidates sampled per iteration (N).
    pub population: usize,
    /// Environment actions per plan (H).
    pub horizon: usize,
    /// Actions grouped into one model step (f).
    pub frameskip: usize,
    /// Model steps per rollout (H′ = H / f).
    pub predictor_calls: usize,
    /// Actions executed before the episode ends (m).
    pub executed: usize,
    /// Elites kept per iteration (K).
    pub elites: usize,
    /// CEM iterations (J).
    pub iterations: usize,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            population: 300,
            horizon: 25,
            frameskip: 5,
            predictor_calls: 5,
            executed: 25,
            elites: 10,
            iterations: 30,
        }
    }
}

impl PlanParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.population,
            self.horizon,
            self.frameskip,
            self.predictor_calls,
            self.executed,
            self.elites,
            self.iterations,
        ];
        if all.contains(&0) {
            return Err(invalid("planning parameters must all be positive"));
        }
        if self.horizon % self.frameskip != 0 {
            return Err(invalid(format!(
                "frameskip {} does not divide horizon {}",
                self.frameskip, self.horizon
            )));
        }
        if self.predictor_calls != self.horizon / self.frameskip {
            return Err(invalid(format!(
                "predictor calls {} != horizon / frameskip = {}",
                self.predictor_calls,
                self.horizon / self.frameskip
            )));
        }
        if self.elites > self.population {
            return Err(invalid(format!(
                "elites {} exceed population {}",
                self.elites, self.population
            )));
        }
        if self.executed > self.horizon {
            return Err(invalid("cannot execute more actions than planned"));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over flattened action sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Proposal {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, bounds: Option<(f32, f32)>) -> Vec<f32> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| {
                let z: f32 = rng.sample(StandardNormal);
                let v = m + s * z;
                match bounds {
                    Some((lo, hi)) => v.clamp(lo, hi),
                    None => v,
                }
            })
            .collect()
    }

    /// Per-dimension empirical mean and (population) std of `elites`, with
    /// the std floored at `floor`.
    pub fn refit(elites: &[&[f32]], floor: f32) -> Result<Self> {
        let first = elites.first().ok_or_else(|| invalid("no elites to refit"))?;
        let dim = first.len();
        if elites.iter().any(|e| e.len() != dim) {
            return Err(shape("elites differ in length"));
        }
        let k = elites.len() as f64;
        let mut mean = vec![0.0f32; dim];
        let mut std = vec![0.0f32; dim];
        for i in 0..dim {
            let m = elites.iter().map(|e| e[i] as f64).sum::<f64>() / k;
            let var = elites.iter().map(|e| (e[i] as f64 - m).powi(2)).sum::<f64>() / k;
            mean[i] = m as f32;
            std[i] = (var.sqrt() as f32).max(floor);
        }
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemResult {
    pub best: Vec<f32>,
    pub best_cost: f64,
    /// Best-ever cost after each iteration.
    pub best_per_iteration: Vec<f64>,
    pub final_proposal: Proposal,
}

/// Minimizes a batched objective over `R^dim`. The objective receives all
/// `N` candidates of an iteration at once; non-finite costs rank last.
pub fn cem_optimize<F, R>(
    mut objective: F,
    dim: usize,
    params: &PlanParams,
    bounds: Option<(f32, f32)>,
    rng: &mut R,
) -> Result<CemResult>
where
    F: FnMut(&[Vec<f32>]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    if params.elites > params.population {
        return Err(invalid(format!(
            "elites {} exceed population {}",
            params.elites, params.population
        )));
    }
    if params.elites == 0 || params.iterations == 0 || dim == 0 {
        return Err(invalid("CEM needs at least one elite, iteration and dimension"));
    }
    let mut proposal = Proposal::standard(dim);
    let mut best: Option<(f64, Vec<f32>)> = None;
    let mut curve = Vec::with_capacity(params.iterations);
    for _ in 0..params.iterations {
        let cands: Vec<Vec<f32>> = (0..params.population)
            .map(|_| proposal.sample(rng, bounds))
            .collect();
        let costs = objective(&cands)?;
        if costs.len() != cands.len() {
            return Err(shape(format!(
                "objective returned {} costs for {} candidates",
                costs.len(),
                cands.len()
            )));
        }
        let key = |c: f64| if c.is_finite() { c } else { f64::INFINITY };
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| key(costs[a]).total_cmp(&key(costs[b])).then(a.cmp(&b)));
        let top = order[0];
        if best.as_ref().is_none_or(|(c, _)| key(costs[top]) < *c) {
            best = Some((key(costs[top]), cands[top].clone()));
        }
        curve.push(best.as_ref().map_or(f64::INFINITY, |b| b.0));
        let elites: Vec<&[f32]> = order[..params.elites].iter().map(|&i| cands[i].as_slice()).collect();
        proposal = Proposal::refit(&elites, STD_FLOOR)?;
    }
    let (best_cost, best) = best.expect("at least one iteration ran");
    Ok(CemResult {
        best,
        best_cost,
        best_per_iteration: curve,
        final_proposal: proposal,
    })
}

/// Where an episode starts, both as simulator state and as encoded frame.
#[derive(Debug, Clone)]
pub struct PlanStart {
    pub state: EnvState,
    pub latent: LatentGrid,
}

/// Maps candidate action sequences (flattened `H x A`) to the final latent
/// frame they lead to.
pub trait PlanModel: Sync {
    /// Returns one final frame per candidate and the number of batched
    /// predictor calls made.
    fn final_latents(
        &self,
        start: &PlanStart,
        candidates: &[Vec<f32>],
        params: &PlanParams,
    ) -> Result<(Vec<Vec<f32>>, usize)>;
}

/// A learned action-conditioned predictor rolled forward in latent space.
#[derive(Debug, Clone, Copy)]
pub struct LatentDynamics<'a> {
    pub model: &'a ConditionedPredictor,
    /// Seconds between consecutive model frames (`f * dt`).
    pub step_time: f64,
    /// Most recent frames kept as context.
    pub max_context: usize,
}

impl PlanModel for LatentDynamics<'_> {
    fn final_latents(
        &self,
        start: &PlanStart,
        candidates: &[Vec<f32>],
        params: &PlanParams,
    ) -> Result<(Vec<Vec<f32>>, usize)> {
        params.validate()?;
        let group = params.frameskip * ACTION_DIM;
        if self.model.action_dim() != group {
            return Err(shape(format!(
                "model expects {}-dim actions, frameskip {} gives {group}",
                self.model.action_dim(),
                params.frameskip
            )));
        }
        if candidates.iter().any(|c| c.len() != params.horizon * ACTION_DIM) {
            return Err(shape("candidate length differs from horizon x action dim"));
        }
        if self.max_context == 0 {
            return Err(invalid("max_context must be positive"));
        }
        let mut contexts = vec![start.latent.clone(); candidates.len()];
        let mut last = vec![Vec::new(); candidates.len()];
        for s in 0..params.predictor_calls {
            let problems: Vec<(&LatentGrid, f64, &[f32])> = contexts
                .iter()
                .zip(candidates)
                .map(|(ctx, c)| {
                    (
                        ctx,
                        ctx.last_timestamp() + self.step_time,
                        &c[s * group..(s + 1) * group],
                    )
                })
                .collect();
            let preds = self.model.predict_many(&problems)?;
            for ((ctx, p), l) in contexts.iter_mut().zip(preds).zip(last.iter_mut()) {
                let tau = ctx.last_timestamp() + self.step_time;
                ctx.push_frame(&p, tau)?;
                let n = ctx.num_frames();
                if n > self.max_context {
                    *ctx = ctx.slice(n - self.max_context..n)?;
                }
                *l = p;
            }
        }
        Ok((last, params.predictor_calls))
    }
}

/// Ground-truth simulator plus encoder; bounds what any learned model can
/// achieve with the latent cost.
#[derive(Debug, Clone)]
pub struct OracleDynamics<'a> {
    pub spec: EnvSpec,
    pub encoder: &'a ToyEncoder,
}

impl PlanModel for OracleDynamics<'_> {
    fn final_latents(
        &self,
        start: &PlanStart,
        candidates: &[Vec<f32>],
        params: &PlanParams,
    ) -> Result<(Vec<Vec<f32>>, usize)> {
        let out = candidates
            .iter()
            .map(|c| {
                let s = execute(&self.spec, &start.state, c, params.horizon)?;
                self.encoder.encode_frame(&env_render(&self.spec, &s))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((out, 0))
    }
}

fn execute(spec: &EnvSpec, start: &EnvState, actions: &[f32], steps: usize) -> Result<EnvState> {
    let mut s = *start;
    for a in actions.chunks_exact(ACTION_DIM).take(steps) {
        s = env_step(spec, &s, [a[0], a[1]])?;
    }
    Ok(s)
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape(format!("cannot compare {} and {} values", a.len(), b.len())));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanCost {
    pub costs: Vec<f64>,
    pub predictor_calls: usize,
}

/// L2 distance between each candidate's final predicted frame and the goal
/// frame, with all candidates rolled out together.
pub fn planning_objective(
    model: &dyn PlanModel,
    start: &PlanStart,
    candidates: &[Vec<f32>],
    goal: &[f32],
    params: &PlanParams,
) -> Result<PlanCost> {
    params.validate()?;
    let (finals, calls) = model.final_latents(start, candidates, params)?;
    let costs = finals
        .iter()
        .map(|f| l2_distance(f, goal))
        .collect::<Result<Vec<_>>>()?;
    Ok(PlanCost {
        costs,
        predictor_calls: calls,
    })
}

/// Encodes a trajectory with every `frameskip`-th frame kept and actions
/// grouped to match, timestamped at `k * frameskip * dt`.
pub fn encode_trajectory(
    spec: &EnvSpec,
    traj: &Trajectory,
    encoder: &ToyEncoder,
    frameskip: usize,
) -> Result<ActionClip> {
    if frameskip == 0 {
        return Err(invalid("frameskip must be positive"));
    }
    let usable = traj.len() / frameskip * frameskip;
    if usable == 0 {
        return Err(invalid(format!(
            "trajectory of {} steps is shorter than frameskip {frameskip}",
            traj.len()
        )));
    }
    let feats = (0..=usable / frameskip)
        .map(|k| encoder.encode_frame(&traj.frames[k * frameskip]))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = encoder.grid_shape(spec.resolution, spec.resolution)?;
    let d = encoder.spec().embed_dim;
    let step = frameskip as f64 * spec.dt;
    let ts: Vec<f64> = (0..feats.len()).map(|k| k as f64 * step).collect();
    let grid = LatentGrid::new((feats.len(), h, w, d), feats.concat(), ts)?;
    let acts: Vec<Vec<f32>> = traj.actions[..usable].iter().map(|a| a.to_vec()).collect();
    ActionClip::new(grid, embed_action_sequence(&acts, frameskip)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub index: u64,
    pub start: EnvState,
    pub goal: [f64; 2],
    pub final_state: EnvState,
    pub success: bool,
    pub final_distance: f64,
    pub plan: Vec<f32>,
    pub cost_curve: Vec<f64>,
    pub predictor_calls: usize,
}

/// Start from a random free position and set the goal where a uniform
/// random walk of `steps` actions ends, so it is reachable in that many.
pub fn sample_episode<R: Rng + ?Sized>(spec: &EnvSpec, steps: usize, rng: &mut R) -> Result<EnvState> {
    let mut start = env_reset(spec, rng);
    let mut s = start;
    let m = spec.max_force as f32;
    for _ in 0..steps {
        s = env_step(spec, &s, [rng.random_range(-m..=m), rng.random_range(-m..=m)])?;
    }
    start.goal = s.pos;
    Ok(start)
}

/// The goal observation: the agent drawn at the goal, at rest.
pub fn goal_state(state: &EnvState) -> EnvState {
    EnvState {
        pos: state.goal,
        vel: [0.0, 0.0],
        goal: state.goal,
    }
}

fn encode_state(spec: &EnvSpec, encoder: &ToyEncoder, s: &EnvState) -> Result<LatentGrid> {
    let (h, w) = encoder.grid_shape(spec.resolution, spec.resolution)?;
    let feats = encoder.encode_frame(&env_render(spec, s))?;
    LatentGrid::new((1, h, w, encoder.spec().embed_dim), feats, vec![0.0])
}

/// Plans from `start` toward its goal and executes the first `m` actions
/// open loop.
pub fn plan_from_state(
    spec: &EnvSpec,
    model: &dyn PlanModel,
    encoder: &ToyEncoder,
    params: &PlanParams,
    start: EnvState,
    rng: &mut ChaCha8Rng,
) -> Result<(EnvState, CemResult, usize)> {
    params.validate()?;
    let plan_start = PlanStart {
        state: start,
        latent: encode_state(spec, encoder, &start)?,
    };
    let goal = encode_state(spec, encoder, &goal_state(&start))?;
    let mut calls = 0;
    let m = spec.max_force as f32;
    let cem = cem_optimize(
        |cands| {
            let c = planning_objective(model, &plan_start, cands, goal.frame(0), params)?;
            calls += c.predictor_calls;
            Ok(c.costs)
        },
        params.horizon * ACTION_DIM,
        params,
        Some((-m, m)),
        rng,
    )?;
    let end = execute(spec, &start, &cem.best, params.executed)?;
    Ok((end, cem, calls))
}

/// One seeded episode; the RNG is `seed` on stream `index`.
pub fn plan_episode(
    spec: &EnvSpec,
    model: &dyn PlanModel,
    encoder: &ToyEncoder,
    params: &PlanParams,
    seed: u64,
    index: u64,
) -> Result<EpisodeOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let start = sample_episode(spec, params.horizon, &mut rng)?;
    let (end, cem, calls) = plan_from_state(spec, model, encoder, params, start, &mut rng)?;
    Ok(EpisodeOutcome {
        seed,
        index,
        start,
        goal: start.goal,
        final_state: end,
        success: is_success(spec, &end),
        final_distance: (end.pos[0] - end.goal[0]).hypot(end.pos[1] - end.goal[1]),
        plan: cem.best,
        cost_curve: cem.best_per_iteration,
        predictor_calls: calls,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanningReport {
    pub episodes: Vec<EpisodeOutcome>,
}

impl PlanningReport {
    pub fn successes(&self) -> usize {
        self.episodes.iter().filter(|e| e.success).count()
    }

    pub fn success_rate(&self) -> f64 {
        self.successes() as f64 / self.episodes.len() as f64
    }

    /// One row per episode; the cost curve is `;`-separated.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["seed", "episode", "success", "final_distance", "final_cost", "cost_curve"])?;
        for e in &self.episodes {
            let curve: Vec<String> = e.cost_curve.iter().map(|c| format!("{c:.6}")).collect();
            w.write_record([
                e.seed.to_string(),
                e.index.to_string(),
                (e.success as u8).to_string(),
                format!("{:.6}", e.final_distance),
                format!("{:.6}", e.cost_curve.last().copied().unwrap_or(f64::NAN)),
                curve.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `episodes` seeded episodes, spread over `workers` threads. Results
/// are ordered by episode index and do not depend on `workers`.
pub fn evaluate_planning(
    spec: &EnvSpec,
    model: &dyn PlanModel,
    encoder: &ToyEncoder,
    params: &PlanParams,
    episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<PlanningReport> {
    if episodes == 0 {
        return Err(invalid("need at least one episode"));
    }
    params.validate()?;
    let workers = workers.clamp(1, episodes);
    let run = |i: usize| plan_episode(spec, model, encoder, params, seed, i as u64);
    let results: Vec<Result<EpisodeOutcome>> = if workers == 1 {
        (0..episodes).map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<EpisodeOutcome>>> = (0..episodes).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run = &run;
                    scope.spawn(move || {
                        (w..episodes)
                            .step_by(workers)
                            .map(|i| (i, run(i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("planning worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every episode ran")).collect()
    };
    let episodes = results.into_iter().collect::<Result<Vec<_>>>()?;
    for e in &episodes {
        log::debug!(
            "episode {}: success={} distance={:.4} cost={:.4}",
            e.index,
            e.success,
            e.final_distance,
            e.cost_curve.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(PlanningReport { episodes })
}

/// Frames of the executed plan, for PNG strips.
pub fn executed_frames(spec: &EnvSpec, start: &EnvState, plan: &[f32], steps: usize) -> Result<Vec<crate::data::Frame>> {
    let mut s = *start;
    let mut frames = vec![env_render(spec, &s)];
    for a in plan.chunks_exact(ACTION_DIM).take(steps) {
        s = env_step(spec, &s, [a[0], a[1]])?;
        frames.push(env_render(spec, &s));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_params_match_table() {
        let p = PlanParams::default();
        assert_eq!(
            (p.population, p.horizon, p.frameskip, p.predictor_calls, p.executed, p.elites, p.iterations),
            (300, 25, 5, 5, 25, 10, 30)
        );
        p.validate().unwrap();
        assert!(PlanParams { frameskip: 4, ..p }.validate().is_err());
        assert!(PlanParams { elites: 301, ..p }.validate().is_err());
    }

    #[test]
    fn refit_floors_std() {
        let a = [1.0f32, 2.0];
        let b = [1.0f32, 4.0];
        let p = Proposal::refit(&[&a, &b], STD_FLOOR).unwrap();
        assert_eq!(p.mean, vec![1.0, 3.0]);
        assert_eq!(p.std, vec![STD_FLOOR, 1.0]);
    }
}

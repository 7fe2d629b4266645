//! Glue between environments, the encoder and the evaluations: encoded
//! video pools, labeled clips for segmentation probes and matched
//! plausible/implausible pairs for surprise scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Frame, LatentGrid};
use crate::encoder::ToyEncoder;
use crate::env::{
    class_map, env_render, env_reset, patch_labels, rollout_policy, step_detail, EnvSpec, EnvState,
    Policy, Trajectory, TrajectoryDataset,
};
use crate::error::{invalid, Result};
use crate::probes::LabeledClip;

/// Encodes frames stamped at `k * dt`.
pub fn encode_frames(spec: &EnvSpec, enc: &ToyEncoder, frames: &[Frame]) -> Result<LatentGrid> {
    let feats = frames
        .iter()
        .map(|f| enc.encode_frame(f))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = enc.grid_shape(spec.resolution, spec.resolution)?;
    let ts = (0..frames.len()).map(|k| k as f64 * spec.dt).collect();
    LatentGrid::new((frames.len(), h, w, enc.spec().embed_dim), feats.concat(), ts)
}

pub fn encode_videos(ds: &TrajectoryDataset, enc: &ToyEncoder) -> Result<Vec<LatentGrid>> {
    ds.trajectories
        .iter()
        .map(|t| encode_frames(&ds.spec, enc, &t.frames))
        .collect()
}

/// Per-frame patch labels of a trajectory.
pub fn trajectory_labels(spec: &EnvSpec, traj: &Trajectory, patch: usize) -> Result<Vec<Vec<u8>>> {
    traj.states(spec)?
        .iter()
        .map(|s| patch_labels(&class_map(spec, s), spec.resolution, patch))
        .collect()
}

pub fn labeled_clips(ds: &TrajectoryDataset, enc: &ToyEncoder) -> Result<Vec<LabeledClip>> {
    ds.trajectories
        .iter()
        .map(|t| {
            Ok(LabeledClip {
                grid: encode_frames(&ds.spec, enc, &t.frames)?,
                labels: trajectory_labels(&ds.spec, t, enc.spec().patch_size)?,
            })
        })
        .collect()
}

/// Feature rows and labels of every frame, for head training.
pub fn flatten_labeled(clips: &[LabeledClip]) -> (Vec<f32>, Vec<u8>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in clips {
        x.extend_from_slice(c.grid.data());
        for l in &c.labels {
            y.extend_from_slice(l);
        }
    }
    (x, y)
}

/// A matched pair: identical up to `jump_frame`, where the implausible
/// video's agent jumps to a distant free spot and carries on.
#[derive(Debug, Clone, PartialEq)]
pub struct SurprisePair {
    pub plausible: Vec<Frame>,
    pub implausible: Vec<Frame>,
    pub jump_frame: usize,
}

/// Smallest jump distance, in unit-square coordinates.
pub const MIN_JUMP: f64 = 0.3;

fn bounce_continue(
    spec: &EnvSpec,
    mut s: EnvState,
    mut dir: [f32; 2],
    steps: usize,
    frames: &mut Vec<Frame>,
) -> Result<()> {
    for _ in 0..steps {
        let (next, hit) = step_detail(spec, &s, dir)?;
        for k in 0..2 {
            if hit[k] {
                dir[k] = -dir[k];
            }
        }
        s = next;
        frames.push(env_render(spec, &s));
    }
    Ok(())
}

/// Builds one pair of `frames`-long bounce videos with the jump placed
/// uniformly in `min_jump_frame..frames`.
pub fn surprise_pair<R: Rng + ?Sized>(
    spec: &EnvSpec,
    frames: usize,
    min_jump_frame: usize,
    rng: &mut R,
) -> Result<SurprisePair> {
    if min_jump_frame == 0 || min_jump_frame >= frames {
        return Err(invalid(format!(
            "jump frame must lie in 1..{frames}, minimum {min_jump_frame}"
        )));
    }
    let init = env_reset(spec, rng);
    let traj = rollout_policy(spec, init, frames - 1, Policy::Bounce, rng)?;
    let jump = rng.random_range(min_jump_frame..frames);
    let states = traj.states(spec)?;
    let before = states[jump - 1];
    let dir = traj.actions[jump - 1];
    let r = spec.agent_radius;
    let mut landing = before;
    loop {
        let p = [rng.random_range(r..1.0 - r), rng.random_range(r..1.0 - r)];
        let far = (p[0] - states[jump].pos[0]).hypot(p[1] - states[jump].pos[1]) >= MIN_JUMP;
        if spec.is_free(p) && far {
            landing.pos = p;
            break;
        }
    }
    let mut implausible = traj.frames[..jump].to_vec();
    implausible.push(env_render(spec, &landing));
    // the bounce policy may have flipped direction on the step into `jump`
    let dir_after = traj.actions.get(jump).copied().unwrap_or(dir);
    bounce_continue(spec, landing, dir_after, frames - jump - 1, &mut implausible)?;
    Ok(SurprisePair {
        plausible: traj.frames,
        implausible,
        jump_frame: jump,
    })
}

/// `count` pairs, pair `i` drawn from stream `i` of `seed`.
pub fn surprise_pairs(
    spec: &EnvSpec,
    count: usize,
    frames: usize,
    min_jump_frame: usize,
    seed: u64,
) -> Result<Vec<SurprisePair>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            surprise_pair(spec, frames, min_jump_frame, &mut rng)
        })
        .collect()
}

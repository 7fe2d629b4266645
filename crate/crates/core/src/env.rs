//! Deterministic 2D point-agent environments with pixel rendering.
//!
//! Coordinates live in the unit square with `y` pointing down the image.
//! Obstacles are axis-aligned rectangles; the agent is a disc that slides
//! along them (x motion resolved first, then y).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytes::{ByteReader, ByteWriter};
use crate::data::{Frame, VideoClip};
use crate::error::{invalid, shape, Error, Result};

pub const LWMT_MAGIC: &[u8; 4] = b"LWMT";
pub const LWMT_VERSION: u32 = 1;
pub const ACTION_DIM: usize = 2;

/// Pixel classes used for segmentation labels.
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_AGENT: u8 = 1;
pub const CLASS_GOAL: u8 = 2;
pub const CLASS_WALL: u8 = 3;
pub const NUM_CLASSES: usize = 4;

const COLOR_BACKGROUND: [f64; 3] = [24.0, 28.0, 48.0];
const COLOR_AGENT: [f64; 3] = [235.0, 70.0, 60.0];
const COLOR_GOAL: [f64; 3] = [70.0, 205.0, 110.0];
const COLOR_WALL: [f64; 3] = [205.0, 205.0, 215.0];

/// Gap left between the agent and an obstacle it slid into.
const CONTACT_GAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Wall,
    PointMaze,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wall" => Ok(Self::Wall),
            "pointmaze" => Ok(Self::PointMaze),
            other => Err(invalid(format!("unknown environment `{other}` (expected wall or pointmaze)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MazeLayout {
    /// U-shaped corridor around a central block.
    U,
    /// No interior walls.
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub layout: MazeLayout,
    pub resolution: usize,
    pub agent_radius: f64,
    pub wall_x: f64,
    pub wall_thickness: f64,
    pub door_center: f64,
    pub door_span: f64,
    /// Seconds per step; also scales Wall displacements.
    pub dt: f64,
    pub damping: f64,
    pub max_force: f64,
    pub success_radius: f64,
}

impl EnvSpec {
    pub fn wall() -> Self {
        Self {
            kind: EnvKind::Wall,
            layout: MazeLayout::Open,
            resolution: 64,
            agent_radius: 0.03,
            wall_x: 0.5,
            wall_thickness: 0.04,
            door_center: 0.5,
            door_span: 0.2,
            dt: 0.04,
            damping: 0.95,
            max_force: 1.0,
            success_radius: 0.05,
        }
    }

    pub fn point_maze() -> Self {
        Self {
            kind: EnvKind::PointMaze,
            layout: MazeLayout::U,
            dt: 0.1,
            ..Self::wall()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, what: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid(format!("{what} must lie in [0, 1], got {v}")))
            }
        };
        unit(self.agent_radius, "agent_radius")?;
        unit(self.wall_x, "wall_x")?;
        unit(self.wall_thickness, "wall_thickness")?;
        unit(self.door_center, "door_center")?;
        unit(self.door_span, "door_span")?;
        if !(self.agent_radius > 0.0 && self.agent_radius < 0.25) {
            return Err(invalid("agent_radius must be in (0, 0.25)"));
        }
        if !(self.success_radius > 0.0) {
            return Err(invalid("success_radius must be positive"));
        }
        if !(self.dt > 0.0) || !(self.max_force > 0.0) {
            return Err(invalid("dt and max_force must be positive"));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(invalid("damping must be in [0, 1)"));
        }
        if self.resolution == 0 {
            return Err(invalid("resolution must be positive"));
        }
        Ok(())
    }

    /// Largest speed PointMaze can reach from rest: geometric series of the
    /// damped force impulses.
    pub fn v_max(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.max_force * self.dt / (1.0 - self.damping)
    }

    pub fn obstacles(&self) -> Vec<Rect> {
        match (self.kind, self.layout) {
            (EnvKind::Wall, _) => {
                let (x0, x1) = (
                    self.wall_x - self.wall_thickness / 2.0,
                    self.wall_x + self.wall_thickness / 2.0,
                );
                let lo = self.door_center - self.door_span / 2.0;
                let hi = self.door_center + self.door_span / 2.0;
                vec![Rect::new(x0, 0.0, x1, lo), Rect::new(x0, hi, x1, 1.0)]
            }
            (EnvKind::PointMaze, MazeLayout::U) => vec![Rect::new(0.0, 0.42, 0.68, 0.58)],
            (EnvKind::PointMaze, MazeLayout::Open) => Vec::new(),
        }
    }

    /// Whether a disc of the agent's radius at `p` overlaps no obstacle and
    /// stays inside the arena.
    pub fn is_free(&self, p: [f64; 2]) -> bool {
        let r = self.agent_radius;
        let inside = (r..=1.0 - r).contains(&p[0]) && (r..=1.0 - r).contains(&p[1]);
        inside && self.obstacles().iter().all(|o| o.distance(p) >= r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let dx = (self.x0 - p[0]).max(0.0).max(p[0] - self.x1);
        let dy = (self.y0 - p[1]).max(0.0).max(p[1] - self.y1);
        dx.hypot(dy)
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        (self.x0..=self.x1).contains(&p[0]) && (self.y0..=self.y1).contains(&p[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
}

fn sample_free<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> [f64; 2] {
    let r = spec.agent_radius;
    loop {
        let p = [rng.random_range(r..1.0 - r), rng.random_range(r..1.0 - r)];
        if spec.is_free(p) {
            return p;
        }
    }
}

/// Agent and goal placed uniformly in free space, at rest.
pub fn env_reset<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> EnvState {
    let pos = sample_free(spec, rng);
    let goal = sample_free(spec, rng);
    EnvState {
        pos,
        vel: [0.0, 0.0],
        goal,
    }
}

/// Moves along one axis, stopping at the first obstacle face in the way.
/// Returns the reached coordinate and whether the motion was cut short.
fn slide(spec: &EnvSpec, p: [f64; 2], axis: usize, delta: f64) -> (f64, bool) {
    let r = spec.agent_radius;
    let other = 1 - axis;
    let from = p[axis];
    let mut to = (from + delta).clamp(r, 1.0 - r);
    let mut blocked = to != from + delta;
    if delta == 0.0 {
        return (from, false);
    }
    for o in spec.obstacles() {
        let (lo, hi, olo, ohi) = if axis == 0 {
            (o.x0, o.x1, o.y0, o.y1)
        } else {
            (o.y0, o.y1, o.x0, o.x1)
        };
        // distance outside the obstacle's span on the other axis
        let e = (olo - p[other]).max(0.0).max(p[other] - ohi);
        if e >= r {
            continue;
        }
        let reach = (r * r - e * e).sqrt();
        if delta > 0.0 {
            let face = lo - reach;
            if from <= face && to > face - CONTACT_GAP {
                to = face - CONTACT_GAP;
                blocked = true;
            }
        } else {
            let face = hi + reach;
            if from >= face && to < face + CONTACT_GAP {
                to = face + CONTACT_GAP;
                blocked = true;
            }
        }
    }
    if (delta > 0.0 && to < from) || (delta < 0.0 && to > from) {
        // already touching; stay put rather than back off
        to = from;
    }
    (to, blocked)
}

fn check_action(action: [f32; 2]) -> Result<()> {
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("action {action:?}")));
    }
    Ok(())
}

/// Advances one step. Actions are clamped per component to
/// `[-max_force, max_force]`.
pub fn env_step(spec: &EnvSpec, state: &EnvState, action: [f32; 2]) -> Result<EnvState> {
    Ok(step_detail(spec, state, action)?.0)
}

/// [`env_step`] that also reports which axes hit an obstacle.
pub fn step_detail(spec: &EnvSpec, state: &EnvState, action: [f32; 2]) -> Result<(EnvState, [bool; 2])> {
    check_action(action)?;
    let a = [
        (action[0] as f64).clamp(-spec.max_force, spec.max_force),
        (action[1] as f64).clamp(-spec.max_force, spec.max_force),
    ];
    let mut next = *state;
    let delta = match spec.kind {
        EnvKind::Wall => [a[0] * spec.dt, a[1] * spec.dt],
        EnvKind::PointMaze => {
            for k in 0..2 {
                next.vel[k] = spec.damping * state.vel[k] + a[k] * spec.dt;
            }
            [next.vel[0] * spec.dt, next.vel[1] * spec.dt]
        }
    };
    let mut hit = [false; 2];
    for axis in 0..2 {
        let (v, blocked) = slide(spec, next.pos, axis, delta[axis]);
        next.pos[axis] = v;
        hit[axis] = blocked;
        if blocked && spec.kind == EnvKind::PointMaze {
            next.vel[axis] = 0.0;
        }
    }
    Ok((next, hit))
}

pub fn is_success(spec: &EnvSpec, state: &EnvState) -> bool {
    let d = (state.pos[0] - state.goal[0]).hypot(state.pos[1] - state.goal[1]);
    d < spec.success_radius
}

/// Fraction of the pixel square `[px, px+1) x [py, py+1)` (in pixel units)
/// covered by a disc, exact for pixels fully inside or outside and
/// supersampled 4x4 on the boundary.
fn disc_coverage(cx: f64, cy: f64, r: f64, px: f64, py: f64) -> f64 {
    let near_x = cx.clamp(px, px + 1.0);
    let near_y = cy.clamp(py, py + 1.0);
    if (near_x - cx).hypot(near_y - cy) >= r {
        return 0.0;
    }
    let far_x = if cx - px > px + 1.0 - cx { px } else { px + 1.0 };
    let far_y = if cy - py > py + 1.0 - cy { py } else { py + 1.0 };
    if (far_x - cx).hypot(far_y - cy) <= r {
        return 1.0;
    }
    let mut hits = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let x = px + (sx as f64 + 0.5) / 4.0;
            let y = py + (sy as f64 + 0.5) / 4.0;
            if (x - cx).hypot(y - cy) < r {
                hits += 1;
            }
        }
    }
    hits as f64 / 16.0
}

fn rect_coverage(o: &Rect, scale: f64, px: f64, py: f64) -> f64 {
    let w = ((o.x1 * scale).min(px + 1.0) - (o.x0 * scale).max(px)).max(0.0);
    let h = ((o.y1 * scale).min(py + 1.0) - (o.y0 * scale).max(py)).max(0.0);
    w * h
}

/// Draws walls over the agent over the goal over the background, blending
/// by per-pixel coverage.
pub fn env_render(spec: &EnvSpec, state: &EnvState) -> Frame {
    let n = spec.resolution;
    let s = n as f64;
    let r = spec.agent_radius * s;
    let obstacles = spec.obstacles();
    let mut pixels = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64, y as f64);
            let goal = disc_coverage(state.goal[0] * s, state.goal[1] * s, r, px, py);
            let agent = disc_coverage(state.pos[0] * s, state.pos[1] * s, r, px, py);
            let wall: f64 = obstacles
                .iter()
                .map(|o| rect_coverage(o, s, px, py))
                .sum::<f64>()
                .min(1.0);
            for c in 0..3 {
                let under = goal * COLOR_GOAL[c] + (1.0 - goal) * COLOR_BACKGROUND[c];
                let mid = agent * COLOR_AGENT[c] + (1.0 - agent) * under;
                let top = wall * COLOR_WALL[c] + (1.0 - wall) * mid;
                pixels.push(top.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Frame::new(n, n, pixels).expect("consistent frame size")
}

/// Class of each pixel center, with priority wall > agent > goal.
pub fn class_map(spec: &EnvSpec, state: &EnvState) -> Vec<u8> {
    let n = spec.resolution;
    let obstacles = spec.obstacles();
    let r = spec.agent_radius;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let p = [(x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64];
            let dist = |c: [f64; 2]| (p[0] - c[0]).hypot(p[1] - c[1]);
            out.push(if obstacles.iter().any(|o| o.contains(p)) {
                CLASS_WALL
            } else if dist(state.pos) < r {
                CLASS_AGENT
            } else if dist(state.goal) < r {
                CLASS_GOAL
            } else {
                CLASS_BACKGROUND
            });
        }
    }
    out
}

/// Majority class per `patch x patch` block; ties go to the class with the
/// higher priority (wall > agent > goal > background).
pub fn patch_labels(pixels: &[u8], resolution: usize, patch: usize) -> Result<Vec<u8>> {
    if patch == 0 || resolution % patch != 0 {
        return Err(invalid(format!("patch {patch} does not divide {resolution}")));
    }
    if pixels.len() != resolution * resolution {
        return Err(shape("class map size does not match resolution"));
    }
    let g = resolution / patch;
    let priority = [CLASS_WALL, CLASS_AGENT, CLASS_GOAL, CLASS_BACKGROUND];
    let mut out = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            let mut counts = [0usize; NUM_CLASSES];
            for y in i * patch..(i + 1) * patch {
                for x in j * patch..(j + 1) * patch {
                    counts[pixels[y * resolution + x] as usize] += 1;
                }
            }
            let best = counts.iter().copied().max().unwrap_or(0);
            let class = priority
                .iter()
                .copied()
                .find(|&c| counts[c as usize] == best)
                .unwrap_or(CLASS_BACKGROUND);
            out.push(class);
        }
    }
    Ok(out)
}

/// How actions are chosen while generating trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    /// Independent uniform actions in the action box.
    Uniform,
    /// A constant random direction at full force that reflects off
    /// whatever it hits, producing smooth predictable motion.
    Bounce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: EnvState,
    pub frames: Vec<Frame>,
    pub actions: Vec<[f32; 2]>,
}

impl Trajectory {
    /// Number of environment steps.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Frames as a clip stamped at `k * dt`.
    pub fn clip(&self, spec: &EnvSpec) -> Result<VideoClip> {
        let ts = (0..self.frames.len()).map(|k| k as f64 * spec.dt).collect();
        VideoClip::new(self.frames.clone(), ts)
    }

    pub fn states(&self, spec: &EnvSpec) -> Result<Vec<EnvState>> {
        let mut out = Vec::with_capacity(self.actions.len() + 1);
        let mut s = self.initial;
        out.push(s);
        for &a in &self.actions {
            s = env_step(spec, &s, a)?;
            out.push(s);
        }
        Ok(out)
    }
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R, force: f64) -> [f32; 2] {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    [(force * angle.cos()) as f32, (force * angle.sin()) as f32]
}

/// Simulates one rollout of `length` steps from `initial`.
pub fn rollout_policy<R: Rng + ?Sized>(
    spec: &EnvSpec,
    initial: EnvState,
    length: usize,
    policy: Policy,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut state = initial;
    let mut frames = vec![env_render(spec, &state)];
    let mut actions = Vec::with_capacity(length);
    let mut dir = random_direction(rng, spec.max_force);
    for _ in 0..length {
        let a = match policy {
            Policy::Uniform => {
                let m = spec.max_force as f32;
                [rng.random_range(-m..=m), rng.random_range(-m..=m)]
            }
            Policy::Bounce => dir,
        };
        let (next, hit) = step_detail(spec, &state, a)?;
        if policy == Policy::Bounce {
            for k in 0..2 {
                if hit[k] {
                    dir[k] = -dir[k];
                }
            }
        }
        state = next;
        actions.push(a);
        frames.push(env_render(spec, &state));
    }
    Ok(Trajectory {
        initial,
        frames,
        actions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub spec: EnvSpec,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

/// Random-policy rollouts, fully determined by `(spec, count, length, seed)`.
pub fn generate_trajectories(spec: &EnvSpec, count: usize, length: usize, seed: u64) -> Result<TrajectoryDataset> {
    generate_with_policy(spec, count, length, Policy::Uniform, seed)
}

pub fn generate_with_policy(
    spec: &EnvSpec,
    count: usize,
    length: usize,
    policy: Policy,
    seed: u64,
) -> Result<TrajectoryDataset> {
    spec.validate()?;
    if count == 0 || length == 0 {
        return Err(invalid("trajectory count and length must be at least 1"));
    }
    let trajectories = (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let init = env_reset(spec, &mut rng);
            rollout_policy(spec, init, length, policy, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDataset {
        spec: *spec,
        seed,
        trajectories,
    })
}

/// Re-simulates the stored actions from the stored initial state.
pub fn replay(spec: &EnvSpec, traj: &Trajectory) -> Result<Vec<Frame>> {
    Ok(traj
        .states(spec)?
        .iter()
        .map(|s| env_render(spec, s))
        .collect())
}

fn write_spec(w: &mut ByteWriter, s: &EnvSpec) {
    w.u8(match s.kind {
        EnvKind::Wall => 0,
        EnvKind::PointMaze => 1,
    });
    w.u8(match s.layout {
        MazeLayout::U => 0,
        MazeLayout::Open => 1,
    });
    w.u32(s.resolution as u32);
    w.f64s(&[
        s.agent_radius,
        s.wall_x,
        s.wall_thickness,
        s.door_center,
        s.door_span,
        s.dt,
        s.damping,
        s.max_force,
        s.success_radius,
    ]);
}

fn read_spec(r: &mut ByteReader) -> Result<EnvSpec> {
    let kind = match r.u8()? {
        0 => EnvKind::Wall,
        1 => EnvKind::PointMaze,
        k => return Err(invalid(format!("unknown environment kind {k}"))),
    };
    let layout = match r.u8()? {
        0 => MazeLayout::U,
        1 => MazeLayout::Open,
        k => return Err(invalid(format!("unknown layout {k}"))),
    };
    let resolution = r.u32()? as usize;
    let v = r.f64s(9)?;
    let spec = EnvSpec {
        kind,
        layout,
        resolution,
        agent_radius: v[0],
        wall_x: v[1],
        wall_thickness: v[2],
        door_center: v[3],
        door_span: v[4],
        dt: v[5],
        damping: v[6],
        max_force: v[7],
        success_radius: v[8],
    };
    spec.validate()?;
    Ok(spec)
}

impl TrajectoryDataset {
    /// Per-dimension `(min, max)` over every stored action.
    pub fn action_range(&self) -> [(f32, f32); 2] {
        let mut out = [(f32::INFINITY, f32::NEG_INFINITY); 2];
        for a in self.trajectories.iter().flat_map(|t| &t.actions) {
            for k in 0..2 {
                out[k].0 = out[k].0.min(a[k]);
                out[k].1 = out[k].1.max(a[k]);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(64);
        w.bytes(LWMT_MAGIC);
        w.u32(LWMT_VERSION);
        write_spec(&mut w, &self.spec);
        w.u64(self.seed);
        w.u32(self.trajectories.len() as u32);
        for t in &self.trajectories {
            w.u32(t.frames.len() as u32);
            let s = &t.initial;
            w.f64s(&[s.pos[0], s.pos[1], s.vel[0], s.vel[1], s.goal[0], s.goal[1]]);
            for f in &t.frames {
                w.bytes(f.pixels());
            }
            for a in &t.actions {
                w.f32s(a);
            }
        }
        for (lo, hi) in self.action_range() {
            w.f32s(&[lo, hi]);
        }
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf, "LWMT");
        r.magic(LWMT_MAGIC)?;
        let version = r.u32()?;
        if version != LWMT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: LWMT_VERSION,
            });
        }
        let spec = read_spec(&mut r)?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let n = spec.resolution;
        let mut trajectories = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let t = r.u32()? as usize;
            if t == 0 {
                return Err(invalid("trajectory with no frames"));
            }
            let s = r.f64s(6)?;
            let initial = EnvState {
                pos: [s[0], s[1]],
                vel: [s[2], s[3]],
                goal: [s[4], s[5]],
            };
            let frames = (0..t)
                .map(|_| Frame::new(n, n, r.take(n * n * 3)?.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let actions = (0..t - 1)
                .map(|_| r.f32s(2).map(|v| [v[0], v[1]]))
                .collect::<Result<Vec<_>>>()?;
            trajectories.push(Trajectory {
                initial,
                frames,
                actions,
            });
        }
        let _range = r.f32s(4)?;
        r.finish()?;
        Ok(Self {
            spec,
            seed,
            trajectories,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::at_path(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_action_at_rest_is_a_fixed_point() {
        for spec in [EnvSpec::wall(), EnvSpec::point_maze()] {
            let s = env_reset(&spec, &mut ChaCha8Rng::seed_from_u64(1));
            assert_eq!(env_step(&spec, &s, [0.0, 0.0]).unwrap(), s);
        }
    }

    #[test]
    fn nan_action_rejected() {
        let spec = EnvSpec::wall();
        let s = env_reset(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(env_step(&spec, &s, [f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn success_boundary_is_strict() {
        let spec = EnvSpec::wall();
        let mut s = EnvState {
            pos: [0.2, 0.2],
            vel: [0.0; 2],
            goal: [0.2, 0.2],
        };
        assert!(is_success(&spec, &s));
        // representable exactly: |0.05 - 0| == 0.05
        s.goal = [0.0, 0.25];
        s.pos = [0.05, 0.25];
        assert!(!is_success(&spec, &s));
        s.pos = [0.025, 0.25];
        assert!(is_success(&spec, &s));
    }

    #[test]
    fn patch_majority_ties_follow_priority() {
        // 2x2 patch: two agent pixels, two goal pixels
        let pixels = vec![CLASS_AGENT, CLASS_GOAL, CLASS_GOAL, CLASS_AGENT];
        assert_eq!(patch_labels(&pixels, 2, 2).unwrap(), vec![CLASS_AGENT]);
        let pixels = vec![CLASS_BACKGROUND, CLASS_WALL, CLASS_BACKGROUND, CLASS_GOAL];
        assert_eq!(patch_labels(&pixels, 2, 2).unwrap(), vec![CLASS_BACKGROUND]);
        assert_eq!(patch_labels(&pixels, 2, 1).unwrap(), pixels);
    }
}

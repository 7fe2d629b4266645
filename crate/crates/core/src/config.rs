//! Flat `key=value` run configuration with dotted keys and `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::action::FinetuneConfig;
use crate::data::SamplerSpec;
use crate::encoder::EncoderSpec;
use crate::env::{EnvKind, EnvSpec, MazeLayout, Policy};
use crate::error::{Error, Result};
use crate::planner::PlanParams;
use crate::predictor::PredictorConfig;
use crate::probes::ForecastProtocol;
use crate::rollout::Aggregator;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub count: usize,
    pub length: usize,
    pub policy: Policy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorShape {
    pub model_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurpriseConfig {
    pub context: usize,
    pub aggregator: Aggregator,
}

/// Every tunable of a run. Defaults are the desk-scale presets.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub env: EnvSpec,
    pub data: DataConfig,
    pub encoder: EncoderSpec,
    pub predictor: PredictorShape,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub plan: PlanParams,
    /// Most recent frames a planning rollout keeps as context.
    pub plan_context: usize,
    pub surprise: SurpriseConfig,
    pub forecast: ForecastProtocol,
}

impl Default for Config {
    fn default() -> Self {
        let env = EnvSpec {
            agent_radius: 0.11,
            door_span: 0.3,
            ..EnvSpec::wall()
        };
        Self {
            env,
            data: DataConfig {
                count: 256,
                length: 50,
                policy: Policy::Uniform,
            },
            encoder: EncoderSpec {
                patch_size: 16,
                embed_dim: 32,
                seed: 1,
                standardize: true,
            },
            predictor: PredictorShape {
                model_dim: 64,
                blocks: 2,
                heads: 2,
                mlp_ratio: 4.0,
            },
            train: TrainConfig {
                total_steps: 1000,
                warmup_steps: 100,
                sampler: SamplerSpec {
                    num_frames: 4,
                    delta_min: env.dt,
                    delta_max: 10.0 * env.dt,
                },
                resolution: env.resolution,
                checkpoint_every: 500,
                ..TrainConfig::default()
            },
            finetune: FinetuneConfig {
                steps: 5000,
                ..FinetuneConfig::default()
            },
            plan: PlanParams::default(),
            plan_context: 1,
            surprise: SurpriseConfig {
                context: 4,
                aggregator: Aggregator::Max,
            },
            forecast: ForecastProtocol::vspw(),
        }
    }
}

fn err(line: usize, key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| err(line, key, format!("cannot parse `{v}`: {e}")))
}

fn positive(line: usize, key: &str, v: &str) -> Result<usize> {
    let n: usize = parse(line, key, v)?;
    if n == 0 {
        return Err(err(line, key, "must be at least 1"));
    }
    Ok(n)
}

fn positive_f64(line: usize, key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse(line, key, v)?;
    if !(x > 0.0) || !x.is_finite() {
        return Err(err(line, key, format!("must be positive and finite, got {x}")));
    }
    Ok(x)
}

fn non_negative_f64(line: usize, key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse(line, key, v)?;
    if !(x >= 0.0) || !x.is_finite() {
        return Err(err(line, key, format!("must be non-negative and finite, got {x}")));
    }
    Ok(x)
}

fn unit(line: usize, key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse(line, key, v)?;
    if !(0.0..=1.0).contains(&x) {
        return Err(err(line, key, format!("must lie in [0, 1], got {x}")));
    }
    Ok(x)
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(err(line, key, format!("expected true or false, got `{v}`"))),
    }
}

fn policy_name(p: Policy) -> &'static str {
    match p {
        Policy::Uniform => "uniform",
        Policy::Bounce => "bounce",
    }
}

impl Config {
    /// Passive-video preset for the forecasting and surprise evaluations:
    /// bouncing agent, 8 px patches, short frame gaps.
    pub fn video() -> Self {
        let mut c = Self::default();
        c.data = DataConfig {
            count: 256,
            length: 40,
            policy: Policy::Bounce,
        };
        c.encoder.patch_size = 8;
        c.train.total_steps = 2000;
        c.train.checkpoint_every = 1000;
        c.train.sampler.delta_max = 0.2;
        c
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        let l = line;
        match key {
            "env.kind" => {
                self.env.kind = v.parse::<EnvKind>().map_err(|e| err(l, key, e.to_string()))?;
            }
            "env.layout" => {
                self.env.layout = match v {
                    "u" => MazeLayout::U,
                    "open" => MazeLayout::Open,
                    _ => return Err(err(l, key, format!("expected u or open, got `{v}`"))),
                }
            }
            "env.resolution" => self.env.resolution = positive(l, key, v)?,
            "env.agent_radius" => {
                let r = unit(l, key, v)?;
                if !(r > 0.0 && r < 0.25) {
                    return Err(err(l, key, "must lie in (0, 0.25)"));
                }
                self.env.agent_radius = r;
            }
            "env.wall_x" => self.env.wall_x = unit(l, key, v)?,
            "env.wall_thickness" => self.env.wall_thickness = unit(l, key, v)?,
            "env.door_center" => self.env.door_center = unit(l, key, v)?,
            "env.door_span" => self.env.door_span = unit(l, key, v)?,
            "env.dt" => self.env.dt = positive_f64(l, key, v)?,
            "env.damping" => {
                let d = unit(l, key, v)?;
                if d >= 1.0 {
                    return Err(err(l, key, "must be below 1"));
                }
                self.env.damping = d;
            }
            "env.max_force" => self.env.max_force = positive_f64(l, key, v)?,
            "env.success_radius" => self.env.success_radius = positive_f64(l, key, v)?,
            "data.count" => self.data.count = positive(l, key, v)?,
            "data.length" => self.data.length = positive(l, key, v)?,
            "data.policy" => {
                self.data.policy = match v {
                    "uniform" => Policy::Uniform,
                    "bounce" => Policy::Bounce,
                    _ => return Err(err(l, key, format!("expected uniform or bounce, got `{v}`"))),
                }
            }
            "encoder.patch" => self.encoder.patch_size = positive(l, key, v)?,
            "encoder.dim" => self.encoder.embed_dim = positive(l, key, v)?,
            "encoder.seed" => self.encoder.seed = parse(l, key, v)?,
            "encoder.standardize" => self.encoder.standardize = boolean(l, key, v)?,
            "predictor.dim" => self.predictor.model_dim = positive(l, key, v)?,
            "predictor.blocks" => self.predictor.blocks = positive(l, key, v)?,
            "predictor.heads" => self.predictor.heads = positive(l, key, v)?,
            "predictor.mlp_ratio" => self.predictor.mlp_ratio = positive_f64(l, key, v)?,
            "sampler.frames" => {
                let n = positive(l, key, v)?;
                if n < 2 {
                    return Err(err(l, key, "must be at least 2"));
                }
                self.train.sampler.num_frames = n;
            }
            "sampler.delta_min" => self.train.sampler.delta_min = positive_f64(l, key, v)?,
            "sampler.delta_max" => self.train.sampler.delta_max = positive_f64(l, key, v)?,
            "train.batch" => self.train.batch_size = positive(l, key, v)?,
            "train.steps" => self.train.total_steps = parse(l, key, v)?,
            "train.warmup" => self.train.warmup_steps = parse(l, key, v)?,
            "train.lr" => self.train.base_lr = positive_f64(l, key, v)?,
            "train.weight_decay" => self.train.weight_decay = non_negative_f64(l, key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(l, key, v)?,
            "finetune.steps" => self.finetune.steps = parse(l, key, v)?,
            "finetune.batch" => self.finetune.batch_size = positive(l, key, v)?,
            "finetune.warmup" => self.finetune.warmup_steps = parse(l, key, v)?,
            "finetune.lr" => self.finetune.base_lr = positive_f64(l, key, v)?,
            "finetune.weight_decay" => self.finetune.weight_decay = non_negative_f64(l, key, v)?,
            "finetune.clip_frames" => {
                let n = positive(l, key, v)?;
                if n < 2 {
                    return Err(err(l, key, "must be at least 2"));
                }
                self.finetune.clip_frames = n;
            }
            "finetune.heldout" => {
                let h = unit(l, key, v)?;
                if h >= 1.0 {
                    return Err(err(l, key, "must be below 1"));
                }
                self.finetune.heldout_fraction = h;
            }
            "plan.population" => self.plan.population = positive(l, key, v)?,
            "plan.horizon" => self.plan.horizon = positive(l, key, v)?,
            "plan.frameskip" => self.plan.frameskip = positive(l, key, v)?,
            "plan.calls" => self.plan.predictor_calls = positive(l, key, v)?,
            "plan.executed" => self.plan.executed = positive(l, key, v)?,
            "plan.elites" => self.plan.elites = positive(l, key, v)?,
            "plan.iterations" => self.plan.iterations = positive(l, key, v)?,
            "plan.context" => self.plan_context = positive(l, key, v)?,
            "surprise.context" => self.surprise.context = positive(l, key, v)?,
            "surprise.aggregator" => {
                self.surprise.aggregator = v.parse().map_err(|e: Error| err(l, key, e.to_string()))?
            }
            "forecast.stride" => self.forecast.stride = positive(l, key, v)?,
            "forecast.target" => self.forecast.target = positive(l, key, v)?,
            _ => return Err(err(l, key, "unknown key")),
        }
        Ok(())
    }

    /// Parses config text over the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| err(line, content, "expected `key=value`"))?;
            cfg.set(k.trim(), v.trim(), line)?;
            last_line = line;
        }
        cfg.validate().map_err(|e| match e {
            Error::Config { key, message, .. } => err(last_line, &key, message),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::at_path(path, e))?;
        Self::parse_str(&text)
    }

    /// Cross-field checks; errors name the most relevant key.
    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, r: Result<()>| r.map_err(|e| err(0, key, e.to_string()));
        wrap("env", self.env.validate())?;
        wrap("sampler", self.train.sampler.validate())?;
        wrap("predictor.heads", self.predictor_config().map(|_| ()))?;
        wrap("train", self.train.validate())?;
        wrap("finetune", self.finetune.validate())?;
        wrap("plan", self.plan.validate())?;
        if self.env.resolution % self.encoder.patch_size != 0 {
            return Err(err(0, "encoder.patch", format!(
                "patch {} does not divide resolution {}",
                self.encoder.patch_size, self.env.resolution
            )));
        }
        if self.train.resolution != self.env.resolution {
            return Err(err(0, "env.resolution", "training and environment resolution differ"));
        }
        Ok(())
    }

    pub fn predictor_config(&self) -> Result<PredictorConfig> {
        let mut c = PredictorConfig::tiny(
            self.encoder.embed_dim,
            self.predictor.model_dim,
            self.predictor.blocks,
            self.predictor.heads,
        )?;
        c.mlp_ratio = self.predictor.mlp_ratio;
        c.validate()?;
        Ok(c)
    }

    /// Seconds between consecutive frames seen by the action-conditioned
    /// model.
    pub fn model_step_time(&self) -> f64 {
        self.plan.frameskip as f64 * self.env.dt
    }

    /// Fully resolved config in the same `key=value` syntax it is read from.
    pub fn render(&self) -> String {
        let e = &self.env;
        let kind = match e.kind {
            EnvKind::Wall => "wall",
            EnvKind::PointMaze => "pointmaze",
        };
        let layout = match e.layout {
            MazeLayout::U => "u",
            MazeLayout::Open => "open",
        };
        let agg = match self.surprise.aggregator {
            Aggregator::Max => "max",
            Aggregator::Mean => "mean",
        };
        let t = &self.train;
        let f = &self.finetune;
        let p = &self.plan;
        let rows: Vec<(&str, String)> = vec![
            ("env.kind", kind.into()),
            ("env.layout", layout.into()),
            ("env.resolution", e.resolution.to_string()),
            ("env.agent_radius", e.agent_radius.to_string()),
            ("env.wall_x", e.wall_x.to_string()),
            ("env.wall_thickness", e.wall_thickness.to_string()),
            ("env.door_center", e.door_center.to_string()),
            ("env.door_span", e.door_span.to_string()),
            ("env.dt", e.dt.to_string()),
            ("env.damping", e.damping.to_string()),
            ("env.max_force", e.max_force.to_string()),
            ("env.success_radius", e.success_radius.to_string()),
            ("data.count", self.data.count.to_string()),
            ("data.length", self.data.length.to_string()),
            ("data.policy", policy_name(self.data.policy).into()),
            ("encoder.patch", self.encoder.patch_size.to_string()),
            ("encoder.dim", self.encoder.embed_dim.to_string()),
            ("encoder.seed", self.encoder.seed.to_string()),
            ("encoder.standardize", self.encoder.standardize.to_string()),
            ("predictor.dim", self.predictor.model_dim.to_string()),
            ("predictor.blocks", self.predictor.blocks.to_string()),
            ("predictor.heads", self.predictor.heads.to_string()),
            ("predictor.mlp_ratio", self.predictor.mlp_ratio.to_string()),
            ("sampler.frames", t.sampler.num_frames.to_string()),
            ("sampler.delta_min", t.sampler.delta_min.to_string()),
            ("sampler.delta_max", t.sampler.delta_max.to_string()),
            ("train.batch", t.batch_size.to_string()),
            ("train.steps", t.total_steps.to_string()),
            ("train.warmup", t.warmup_steps.to_string()),
            ("train.lr", t.base_lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("finetune.steps", f.steps.to_string()),
            ("finetune.batch", f.batch_size.to_string()),
            ("finetune.warmup", f.warmup_steps.to_string()),
            ("finetune.lr", f.base_lr.to_string()),
            ("finetune.weight_decay", f.weight_decay.to_string()),
            ("finetune.clip_frames", f.clip_frames.to_string()),
            ("finetune.heldout", f.heldout_fraction.to_string()),
            ("plan.population", p.population.to_string()),
            ("plan.horizon", p.horizon.to_string()),
            ("plan.frameskip", p.frameskip.to_string()),
            ("plan.calls", p.predictor_calls.to_string()),
            ("plan.executed", p.executed.to_string()),
            ("plan.elites", p.elites.to_string()),
            ("plan.iterations", p.iterations.to_string()),
            ("plan.context", self.plan_context.to_string()),
            ("surprise.context", self.surprise.context.to_string()),
            ("surprise.aggregator", agg.into()),
            ("forecast.stride", self.forecast.stride.to_string()),
            ("forecast.target", self.forecast.target.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back() {
        let c = Config::default();
        assert_eq!(Config::parse_str(&c.render()).unwrap(), c);
    }

    #[test]
    fn errors_name_key_and_line() {
        let e = Config::parse_str("# comment\n\npredictor.heads=0\n").unwrap_err();
        assert!(matches!(&e, Error::Config { line: 3, key, .. } if key == "predictor.heads"), "{e}");
        let e = Config::parse_str("plan.population=300\nplan.bogus=1").unwrap_err();
        assert!(matches!(&e, Error::Config { line: 2, key, .. } if key == "plan.bogus"), "{e}");
        let e = Config::parse_str("train.lr=fast").unwrap_err();
        assert!(matches!(&e, Error::Config { line: 1, key, .. } if key == "train.lr"), "{e}");
    }
}

//! Inference-time evaluation: autoregressive rollouts, surprise traces for
//! plausibility ranking, and PCA renderings of feature grids.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::{Frame, LatentGrid};
use crate::error::{invalid, shape, Error, Result};
use crate::predictor::{Predictor, QuerySpec};

/// Anything that predicts a full feature frame at a future timestamp.
pub trait Forecaster {
    fn predict_frame(&self, context: &LatentGrid, tau: f64) -> Result<Vec<f32>>;
}

impl Forecaster for Predictor {
    fn predict_frame(&self, context: &LatentGrid, tau: f64) -> Result<Vec<f32>> {
        self.predict_direct(context, &QuerySpec::grid(tau))
    }
}

/// Repeats the most recent context frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct CopyLast;

impl Forecaster for CopyLast {
    fn predict_frame(&self, context: &LatentGrid, tau: f64) -> Result<Vec<f32>> {
        if context.num_frames() == 0 {
            return Err(invalid("context is empty"));
        }
        if tau <= context.last_timestamp() {
            return Err(invalid("query must lie after the context"));
        }
        Ok(context.frame(context.num_frames() - 1).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// One single-frame grid per requested timestamp.
    pub predictions: Vec<LatentGrid>,
    /// Context frames available when each prediction was made.
    pub context_lengths: Vec<usize>,
    /// Context size after the last prediction was appended.
    pub final_context_len: usize,
}

/// Predicts each target in turn, appending every prediction (with its
/// timestamp) to the context before the next one.
pub fn rollout_autoregressive(
    model: &dyn Forecaster,
    context: &LatentGrid,
    targets: &[f64],
) -> Result<RolloutResult> {
    if targets.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("rollout targets must be strictly increasing"));
    }
    if let Some(&first) = targets.first() {
        if !(first > context.last_timestamp()) {
            return Err(invalid(format!(
                "first target {first} is not after the context end {}",
                context.last_timestamp()
            )));
        }
    }
    let (_, h, w, d) = context.shape();
    let mut ctx = context.clone();
    let mut predictions = Vec::with_capacity(targets.len());
    let mut context_lengths = Vec::with_capacity(targets.len());
    for &tau in targets {
        context_lengths.push(ctx.num_frames());
        let frame = model.predict_frame(&ctx, tau)?;
        predictions.push(LatentGrid::new((1, h, w, d), frame.clone(), vec![tau])?);
        ctx.push_frame(&frame, tau)?;
    }
    Ok(RolloutResult {
        predictions,
        context_lengths,
        final_context_len: ctx.num_frames(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurpriseTrace {
    /// Mean absolute error per evaluated frame, in feature units.
    pub scores: Vec<f64>,
    pub context_len: usize,
}

pub fn mean_abs_error(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape(format!("cannot compare {} and {} values", a.len(), b.len())));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// Teacher-forced one-step surprise: frame `k` is predicted from the
/// `context_len` true frames before it, for every `k >= context_len`.
pub fn surprise_trace(model: &dyn Forecaster, grid: &LatentGrid, context_len: usize) -> Result<SurpriseTrace> {
    let t = grid.num_frames();
    if context_len == 0 || context_len >= t {
        return Err(invalid(format!(
            "context length {context_len} must be in 1..{t}"
        )));
    }
    let scores = (context_len..t)
        .map(|k| {
            let ctx = grid.slice(k - context_len..k)?;
            let pred = model.predict_frame(&ctx, grid.timestamps()[k])?;
            mean_abs_error(&pred, grid.frame(k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SurpriseTrace {
        scores,
        context_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    Max,
    Mean,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            other => Err(invalid(format!("unknown aggregator `{other}`"))),
        }
    }
}

impl Aggregator {
    pub fn apply(&self, scores: &[f64]) -> f64 {
        match self {
            Self::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Self::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        }
    }
}

/// Fraction of `(plausible, implausible)` pairs where the implausible video
/// is more surprising; ties count one half.
pub fn relative_accuracy(pairs: &[(SurpriseTrace, SurpriseTrace)], agg: Aggregator) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("no pairs to score"));
    }
    let mut total = 0.0;
    for (plausible, implausible) in pairs {
        if plausible.scores.is_empty() || implausible.scores.is_empty() {
            return Err(invalid("surprise trace is empty"));
        }
        let (p, q) = (agg.apply(&plausible.scores), agg.apply(&implausible.scores));
        total += if q > p {
            1.0
        } else if q == p {
            0.5
        } else {
            0.0
        };
    }
    Ok(total / pairs.len() as f64)
}

/// Three-component PCA fit on reference patch vectors, with per-channel
/// min/max taken from the reference projections.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 3],
    pub eigenvalues: [f64; 3],
    pub total_variance: f64,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

const RANK_TOL: f64 = 1e-9;

pub fn fit_pca(reference: &LatentGrid) -> Result<PcaProjection> {
    let d = reference.dim();
    let n = reference.data().len() / d;
    let rows: Vec<&[f32]> = reference.data().chunks_exact(d).collect();
    let mut mean = vec![0.0f64; d];
    for r in &rows {
        for (m, &v) in mean.iter_mut().zip(r.iter()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0f64; d];
    for r in &rows {
        for k in 0..d {
            centered[k] = r[k] as f64 - mean[k];
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let significant = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > RANK_TOL * total_variance.max(0.0) && total_variance > 0.0)
        .count();
    if significant < 3 {
        return Err(Error::DegenerateRank);
    }
    let mut components: [Vec<f64>; 3] = Default::default();
    let mut eigenvalues = [0.0; 3];
    for c in 0..3 {
        let i = order[c];
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // fix the sign so the largest-magnitude entry is positive
        let big = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components[c] = v;
        eigenvalues[c] = eig.eigenvalues[i];
    }
    let mut proj = PcaProjection {
        mean,
        components,
        eigenvalues,
        total_variance,
        lo: [f64::INFINITY; 3],
        hi: [f64::NEG_INFINITY; 3],
    };
    for r in &rows {
        let p = proj.project(r);
        for c in 0..3 {
            proj.lo[c] = proj.lo[c].min(p[c]);
            proj.hi[c] = proj.hi[c].max(p[c]);
        }
    }
    Ok(proj)
}

impl PcaProjection {
    pub fn project(&self, token: &[f32]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, comp) in self.components.iter().enumerate() {
            out[c] = token
                .iter()
                .zip(&self.mean)
                .zip(comp)
                .map(|((&x, m), w)| (x as f64 - m) * w)
                .sum();
        }
        out
    }

    /// Fraction of total variance carried by each component.
    pub fn explained_ratio(&self) -> [f64; 3] {
        self.eigenvalues.map(|e| e / self.total_variance)
    }

    /// One `H x W` RGB image per frame of `grid`.
    pub fn render(&self, grid: &LatentGrid) -> Result<Vec<Frame>> {
        if grid.dim() != self.mean.len() {
            return Err(shape(format!(
                "grid dim {} does not match PCA dim {}",
                grid.dim(),
                self.mean.len()
            )));
        }
        let (t, h, w, d) = grid.shape();
        (0..t)
            .map(|f| {
                let mut px = Vec::with_capacity(h * w * 3);
                for tok in grid.frame(f).chunks_exact(d) {
                    let p = self.project(tok);
                    for c in 0..3 {
                        let span = self.hi[c] - self.lo[c];
                        let v = if span > 0.0 { (p[c] - self.lo[c]) / span } else { 0.5 };
                        px.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
                Frame::new(h, w, px)
            })
            .collect()
    }
}

/// Fits PCA on `reference` only and renders every target with it.
pub fn pca_visualize(reference: &LatentGrid, targets: &[LatentGrid]) -> Result<Vec<Vec<Frame>>> {
    let proj = fit_pca(reference)?;
    targets.iter().map(|t| proj.render(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(s: &[f64]) -> SurpriseTrace {
        SurpriseTrace {
            scores: s.to_vec(),
            context_len: 1,
        }
    }

    #[test]
    fn ties_count_half() {
        let pairs = vec![
            (trace(&[0.1, 0.2]), trace(&[0.1, 0.9])),
            (trace(&[0.3]), trace(&[0.3])),
            (trace(&[0.5]), trace(&[0.2])),
        ];
        assert!((relative_accuracy(&pairs, Aggregator::Max).unwrap() - 0.5).abs() < 1e-12);
        assert!(relative_accuracy(&[], Aggregator::Max).is_err());
    }

    #[test]
    fn constant_features_are_degenerate() {
        let g = LatentGrid::new((2, 2, 2, 4), vec![0.5; 32], vec![0.0, 1.0]).unwrap();
        assert!(matches!(fit_pca(&g), Err(Error::DegenerateRank)));
    }
}

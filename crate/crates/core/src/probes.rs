//! Linear segmentation heads on patch features and the short/mid-term
//! dense forecasting protocol.

use std::path::Path;

use crate::data::LatentGrid;
use crate::error::{invalid, shape, Result};
use crate::rollout::{rollout_autoregressive, Forecaster};
use crate::training::{AdamW, OptState};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub steps: u64,
    pub lr: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-2 }
    }
}

/// Frozen per-feature standardization followed by a linear map to class
/// logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub dim: usize,
    pub classes: usize,
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// Row-major `dim x classes`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    /// Classes that never occurred in the training labels.
    pub missing_classes: Vec<u8>,
}

/// Trains a head on `(features, labels)` pairs: feature rows of length `D`
/// and one class label per row. Full-batch Adam on the cross-entropy.
pub fn train_linear_head(features: &[f32], labels: &[u8], dim: usize, classes: usize, cfg: &HeadConfig) -> Result<LinearHead> {
    if dim == 0 || classes < 2 {
        return Err(invalid("head needs a positive dim and at least two classes"));
    }
    if features.len() != labels.len() * dim || labels.is_empty() {
        return Err(shape(format!(
            "{} feature values for {} labels of dim {dim}",
            features.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let n = labels.len();
    let mut mean = vec![0.0f64; dim];
    let mut var = vec![0.0f64; dim];
    for row in features.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for row in features.chunks_exact(dim) {
        for k in 0..dim {
            var[k] += (row[k] as f64 - mean[k]).powi(2);
        }
    }
    let inv_std: Vec<f32> = var
        .iter()
        .map(|v| (1.0 / (v / n as f64 + NORM_EPS).sqrt()) as f32)
        .collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let mut seen = vec![false; classes];
    for &l in labels {
        seen[l as usize] = true;
    }
    let missing_classes: Vec<u8> = (0..classes).filter(|&c| !seen[c]).map(|c| c as u8).collect();
    if !missing_classes.is_empty() {
        log::warn!("classes {missing_classes:?} never occur in the head training labels");
    }

    let x: Vec<f32> = features
        .chunks_exact(dim)
        .flat_map(|row| row.iter().zip(&mean).zip(&inv_std).map(|((v, m), s)| (v - m) * s))
        .collect();
    let mut params = vec![0.0f32; dim * classes + classes];
    let decay = vec![false; params.len()];
    let adam = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut st = OptState::new(params.len());
    let mut grad = vec![0.0f32; params.len()];
    let mut probs = vec![0.0f32; classes];
    for _ in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (w, b) = params.split_at(dim * classes);
        let (gw, gb) = grad.split_at_mut(dim * classes);
        for (row, &l) in x.chunks_exact(dim).zip(labels) {
            logits_into(row, w, b, classes, &mut probs);
            softmax_in_place(&mut probs);
            probs[l as usize] -= 1.0;
            let scale = 1.0 / n as f32;
            for (k, &xv) in row.iter().enumerate() {
                for c in 0..classes {
                    gw[k * classes + c] += xv * probs[c] * scale;
                }
            }
            for c in 0..classes {
                gb[c] += probs[c] * scale;
            }
        }
        adam.update(&mut params, &grad, &decay, &mut st, cfg.lr);
    }
    let bias = params.split_off(dim * classes);
    Ok(LinearHead {
        dim,
        classes,
        mean,
        inv_std,
        weight: params,
        bias,
        missing_classes,
    })
}

fn logits_into(x: &[f32], w: &[f32], b: &[f32], classes: usize, out: &mut [f32]) {
    out.copy_from_slice(b);
    for (k, &xv) in x.iter().enumerate() {
        for c in 0..classes {
            out[c] += xv * w[k * classes + c];
        }
    }
}

fn softmax_in_place(z: &mut [f32]) {
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

impl LinearHead {
    /// Argmax class per feature row.
    pub fn predict(&self, features: &[f32]) -> Result<Vec<u8>> {
        if features.len() % self.dim != 0 {
            return Err(shape(format!(
                "{} values are not rows of dim {}",
                features.len(),
                self.dim
            )));
        }
        let mut z = vec![0.0f32; self.classes];
        let mut xn = vec![0.0f32; self.dim];
        Ok(features
            .chunks_exact(self.dim)
            .map(|row| {
                for k in 0..self.dim {
                    xn[k] = (row[k] - self.mean[k]) * self.inv_std[k];
                }
                logits_into(&xn, &self.weight, &self.bias, self.classes, &mut z);
                let mut best = 0;
                for c in 1..self.classes {
                    if z[c] > z[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect())
    }
}

/// Mean IoU over classes that occur in either map.
pub fn miou(pred: &[u8], truth: &[u8], classes: usize) -> Result<f64> {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    accumulate_iou(pred, truth, &mut inter, &mut union)?;
    Ok(iou_from_counts(&inter, &union))
}

fn accumulate_iou(pred: &[u8], truth: &[u8], inter: &mut [usize], union: &mut [usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(shape(format!(
            "prediction has {} cells, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let classes = inter.len();
    for (&p, &t) in pred.iter().zip(truth) {
        if p as usize >= classes || t as usize >= classes {
            return Err(invalid(format!("class id out of range for {classes} classes")));
        }
        if p == t {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[t as usize] += 1;
        }
    }
    Ok(())
}

fn iou_from_counts(inter: &[usize], union: &[usize]) -> f64 {
    let present: Vec<f64> = inter
        .iter()
        .zip(union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    if present.is_empty() {
        return 1.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

/// Frame indices for one forecasting setting: four context frames spaced
/// `stride` apart, then either one direct step (short) or three
/// autoregressive steps (mid) ending at `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForecastProtocol {
    pub stride: usize,
    pub target: usize,
}

impl ForecastProtocol {
    pub const CONTEXT: usize = 4;
    pub const MID_STEPS: usize = 3;

    /// 16 fps and 15 fps sources: frames `[7,10,13,16] -> 19`.
    pub fn cityscapes() -> Self {
        Self { stride: 3, target: 19 }
    }

    pub fn vspw() -> Self {
        Self::cityscapes()
    }

    /// 10 fps source: frames `[5,7,9,11] -> 13`.
    pub fn kitti() -> Self {
        Self { stride: 2, target: 13 }
    }

    fn check(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(invalid("stride must be positive"));
        }
        if self.target < self.stride * (Self::CONTEXT + Self::MID_STEPS - 1) {
            return Err(invalid(format!(
                "target {} leaves no room for a mid-term context at stride {}",
                self.target, self.stride
            )));
        }
        Ok(())
    }

    pub fn short_context(&self) -> Result<Vec<usize>> {
        self.check()?;
        Ok((1..=Self::CONTEXT).rev().map(|k| self.target - k * self.stride).collect())
    }

    pub fn mid_context(&self) -> Result<Vec<usize>> {
        self.check()?;
        let back = Self::MID_STEPS - 1;
        Ok((1..=Self::CONTEXT)
            .rev()
            .map(|k| self.target - (k + back) * self.stride)
            .collect())
    }

    pub fn mid_targets(&self) -> Result<Vec<usize>> {
        self.check()?;
        Ok((0..Self::MID_STEPS).rev().map(|k| self.target - k * self.stride).collect())
    }

    /// Frames a clip must hold.
    pub fn min_frames(&self) -> usize {
        self.target + 1
    }
}

/// A feature clip with per-frame, per-patch class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub grid: LatentGrid,
    pub labels: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastScores {
    pub present: f64,
    pub short: f64,
    pub mid: f64,
    pub copy_last_short: f64,
    pub copy_last_mid: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

struct Iou {
    inter: Vec<usize>,
    union: Vec<usize>,
}

impl Iou {
    fn new(c: usize) -> Self {
        Self {
            inter: vec![0; c],
            union: vec![0; c],
        }
    }

    fn add(&mut self, head: &LinearHead, feats: &[f32], truth: &[u8]) -> Result<()> {
        let pred = head.predict(feats)?;
        accumulate_iou(&pred, truth, &mut self.inter, &mut self.union)
    }

    fn value(&self) -> f64 {
        iou_from_counts(&self.inter, &self.union)
    }
}

/// Scores the head on true target features (present), one direct
/// prediction (short), the last frame of an autoregressive rollout (mid),
/// and the last context frame (copy-last). IoU counts are pooled over all
/// evaluated clips.
pub fn run_forecast_protocol(
    model: &dyn Forecaster,
    head: &LinearHead,
    clips: &[LabeledClip],
    protocol: &ForecastProtocol,
) -> Result<ForecastScores> {
    let short_ctx = protocol.short_context()?;
    let mid_ctx = protocol.mid_context()?;
    let mid_targets = protocol.mid_targets()?;
    let c = head.classes;
    let (mut present, mut short, mut mid, mut cl_short, mut cl_mid) =
        (Iou::new(c), Iou::new(c), Iou::new(c), Iou::new(c), Iou::new(c));
    let mut evaluated = 0;
    let mut skipped = 0;
    for clip in clips {
        if clip.grid.num_frames() < protocol.min_frames() {
            skipped += 1;
            continue;
        }
        if clip.labels.len() != clip.grid.num_frames() {
            return Err(shape("one label map per frame is required"));
        }
        let g = &clip.grid;
        let target = protocol.target;
        let truth = &clip.labels[target];
        let tau = g.timestamps()[target];
        present.add(head, g.frame(target), truth)?;

        let ctx = g.select(&short_ctx)?;
        short.add(head, &model.predict_frame(&ctx, tau)?, truth)?;
        cl_short.add(head, ctx.frame(ctx.num_frames() - 1), truth)?;

        let ctx = g.select(&mid_ctx)?;
        let taus: Vec<f64> = mid_targets.iter().map(|&i| g.timestamps()[i]).collect();
        let roll = rollout_autoregressive(model, &ctx, &taus)?;
        let last = roll.predictions.last().expect("three mid steps");
        mid.add(head, last.frame(0), truth)?;
        cl_mid.add(head, ctx.frame(ctx.num_frames() - 1), truth)?;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(invalid(format!(
            "no clip has the {} frames the protocol needs ({skipped} skipped)",
            protocol.min_frames()
        )));
    }
    if skipped > 0 {
        log::warn!("{skipped} clips too short for the protocol were skipped");
    }
    Ok(ForecastScores {
        present: present.value(),
        short: short.value(),
        mid: mid.value(),
        copy_last_short: cl_short.value(),
        copy_last_mid: cl_mid.value(),
        evaluated,
        skipped,
    })
}

/// CSV with header `protocol,present,short,mid,copy_last`, one row per
/// horizon; `copy_last` is the baseline for that row's horizon.
pub fn write_forecast_csv(path: &Path, name: &str, s: &ForecastScores) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["protocol", "present", "short", "mid", "copy_last"])?;
    let f = |v: f64| format!("{v:.6}");
    w.write_record([
        format!("{name}-short"),
        f(s.present),
        f(s.short),
        f(s.mid),
        f(s.copy_last_short),
    ])?;
    w.write_record([
        format!("{name}-mid"),
        f(s.present),
        f(s.short),
        f(s.mid),
        f(s.copy_last_mid),
    ])?;
    w.flush()?;
    Ok(())
}

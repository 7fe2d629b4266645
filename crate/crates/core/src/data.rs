//! Videos, latent feature grids, variable-FPS clip sampling and the LWMF
//! feature file format.
//!
//! LWMF layout (little-endian): magic `LWMF`, `u32` version (1), `u32` T, H,
//! W, D, then T `f64` timestamps, then `f32` data row-major `[t][h][w][d]`.

use std::path::Path;

use rand::Rng;

use crate::bytes::{checked_product, ByteReader, ByteWriter};
use crate::error::{invalid, shape, Error, Result};

pub const LWMF_MAGIC: &[u8; 4] = b"LWMF";
pub const LWMF_VERSION: u32 = 1;
const LWMF_HEADER_LEN: usize = 4 + 4 + 16;

/// A single RGB frame, channel-last, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("frame dimensions must be positive"));
        }
        if pixels.len() != height * width * 3 {
            return Err(shape(format!(
                "frame {}x{}x3 needs {} bytes, got {}",
                height,
                width,
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }
}

/// Frames with their absolute presentation timestamps in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
    timestamps: Vec<f64>,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, timestamps: Vec<f64>) -> Result<Self> {
        if frames.is_empty() {
            return Err(invalid("a clip needs at least one frame"));
        }
        if frames.len() != timestamps.len() {
            return Err(shape(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        let (h, w) = (frames[0].height, frames[0].width);
        if frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(shape("all frames of a clip must share one resolution"));
        }
        check_timestamps(&timestamps)?;
        Ok(Self { frames, timestamps })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn check_timestamps(ts: &[f64]) -> Result<()> {
    if let Some(bad) = ts.iter().find(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("timestamp {bad}")));
    }
    if let Some(w) = ts.windows(2).find(|w| w[1] <= w[0]) {
        return Err(invalid(format!(
            "timestamps must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Per-frame `H x W x D` feature tensors with timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    frames: usize,
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
    timestamps: Vec<f64>,
}

impl LatentGrid {
    pub fn new(
        (frames, height, width, dim): (usize, usize, usize, usize),
        data: Vec<f32>,
        timestamps: Vec<f64>,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || dim == 0 {
            return Err(invalid(format!(
                "latent grid dims must be positive, got ({frames}, {height}, {width}, {dim})"
            )));
        }
        let n = checked_product(&[frames, height, width, dim], "latent grid")?;
        if data.len() != n {
            return Err(shape(format!(
                "latent grid ({frames}, {height}, {width}, {dim}) needs {n} values, got {}",
                data.len()
            )));
        }
        if timestamps.len() != frames {
            return Err(shape(format!(
                "{frames} frames but {} timestamps",
                timestamps.len()
            )));
        }
        check_timestamps(&timestamps)?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "latent value at flat index {pos} is {}",
                data[pos]
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            dim,
            data,
            timestamps,
        })
    }

    /// Builds a grid from per-frame slices of length `H * W * D`.
    pub fn from_frames(
        (height, width, dim): (usize, usize, usize),
        frames: &[Vec<f32>],
        timestamps: Vec<f64>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * height * width * dim);
        for f in frames {
            if f.len() != height * width * dim {
                return Err(shape(format!(
                    "frame has {} values, expected {}",
                    f.len(),
                    height * width * dim
                )));
            }
            data.extend_from_slice(f);
        }
        Self::new((frames.len(), height, width, dim), data, timestamps)
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.dim)
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn last_timestamp(&self) -> f64 {
        self.timestamps[self.frames - 1]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Consecutive frames `range` as a new grid.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.frames {
            return Err(invalid(format!(
                "frame range {range:?} out of bounds for {} frames",
                self.frames
            )));
        }
        let n = self.frame_len();
        Self::new(
            (range.len(), self.height, self.width, self.dim),
            self.data[range.start * n..range.end * n].to_vec(),
            self.timestamps[range].to_vec(),
        )
    }

    /// Frames at the given (strictly increasing) indices.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.frames) {
            return Err(invalid(format!(
                "frame index {bad} out of bounds for {} frames",
                self.frames
            )));
        }
        let n = self.frame_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        let ts = indices.iter().map(|&i| self.timestamps[i]).collect();
        Self::new((indices.len(), self.height, self.width, self.dim), data, ts)
    }

    /// Appends one frame; `tau` must be later than the current last frame.
    pub fn push_frame(&mut self, frame: &[f32], tau: f64) -> Result<()> {
        if frame.len() != self.frame_len() {
            return Err(shape(format!(
                "pushed frame has {} values, expected {}",
                frame.len(),
                self.frame_len()
            )));
        }
        if !(tau > self.last_timestamp()) {
            return Err(invalid(format!(
                "pushed timestamp {tau} must follow {}",
                self.last_timestamp()
            )));
        }
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pushed frame".into()));
        }
        self.data.extend_from_slice(frame);
        self.timestamps.push(tau);
        self.frames += 1;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(
            LWMF_HEADER_LEN + self.frames * 8 + self.data.len() * 4,
        );
        w.bytes(LWMF_MAGIC);
        w.u32(LWMF_VERSION);
        for d in [self.frames, self.height, self.width, self.dim] {
            w.u32(d as u32);
        }
        w.f64s(&self.timestamps);
        w.f32s(&self.data);
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf, "LWMF");
        r.magic(LWMF_MAGIC)?;
        let version = r.u32()?;
        if version != LWMF_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: LWMF_VERSION,
            });
        }
        let dims = [
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        ];
        let n = checked_product(&dims, "LWMF header")?;
        n.checked_mul(4)
            .ok_or_else(|| Error::DimensionOverflow(format!("LWMF payload for dims {dims:?}")))?;
        let timestamps = r.f64s(dims[0])?;
        let data = r.f32s(n)?;
        r.finish()?;
        Self::new((dims[0], dims[1], dims[2], dims[3]), data, timestamps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::at_path(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Round trip through an LWMF file on disk.
pub fn feature_file_roundtrip(grid: &LatentGrid, path: &Path) -> Result<LatentGrid> {
    grid.save(path)?;
    LatentGrid::load(path)
}

/// Variable-FPS clip sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSpec {
    pub num_frames: usize,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            num_frames: 4,
            delta_min: 0.05,
            delta_max: 0.5,
        }
    }
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 2 {
            return Err(invalid(format!(
                "sampler needs at least 2 frames, got {}",
                self.num_frames
            )));
        }
        if !(self.delta_min > 0.0) || !self.delta_min.is_finite() {
            return Err(invalid(format!(
                "delta_min must be positive, got {}",
                self.delta_min
            )));
        }
        if !(self.delta_max >= self.delta_min) || !self.delta_max.is_finite() {
            return Err(invalid(format!(
                "delta_max {} must be >= delta_min {}",
                self.delta_max, self.delta_min
            )));
        }
        Ok(())
    }

    /// Longest time span a sampled clip can cover.
    pub fn max_span(&self) -> f64 {
        (self.num_frames - 1) as f64 * self.delta_max
    }
}

/// Where the frames of a stored video sit in time.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameTimes {
    Timestamps(Vec<f64>),
    ConstantFps(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoMeta {
    duration: f64,
    frames: FrameTimes,
}

impl VideoMeta {
    pub fn with_timestamps(duration: f64, timestamps: Vec<f64>) -> Result<Self> {
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(invalid(format!("duration must be positive, got {duration}")));
        }
        if timestamps.is_empty() {
            return Err(invalid("video has no frames"));
        }
        check_timestamps(&timestamps)?;
        if timestamps[0] < 0.0 || *timestamps.last().unwrap() > duration {
            return Err(invalid("frame timestamps must lie within [0, duration]"));
        }
        Ok(Self {
            duration,
            frames: FrameTimes::Timestamps(timestamps),
        })
    }

    pub fn with_fps(duration: f64, fps: f64) -> Result<Self> {
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(invalid(format!("duration must be positive, got {duration}")));
        }
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(invalid(format!("fps must be positive, got {fps}")));
        }
        Ok(Self {
            duration,
            frames: FrameTimes::ConstantFps(fps),
        })
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn frame_times(&self) -> &FrameTimes {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        match &self.frames {
            FrameTimes::Timestamps(ts) => ts.len(),
            FrameTimes::ConstantFps(fps) => (self.duration * fps + 1e-9).floor() as usize + 1,
        }
    }

    pub fn frame_timestamp(&self, index: usize) -> f64 {
        match &self.frames {
            FrameTimes::Timestamps(ts) => ts[index],
            FrameTimes::ConstantFps(fps) => index as f64 / fps,
        }
    }

    fn first_last(&self) -> (f64, f64) {
        (
            self.frame_timestamp(0),
            self.frame_timestamp(self.num_frames() - 1),
        )
    }
}

/// Nearest stored frame to `tau` (clamped to the video), ties going to the
/// earlier frame. Returns the frame index and its true timestamp.
pub fn nearest_frame_lookup(meta: &VideoMeta, tau: f64) -> Result<(usize, f64)> {
    let n = meta.num_frames();
    if n == 0 {
        return Err(invalid("video has no frames"));
    }
    if tau.is_nan() {
        return Err(Error::NonFinite("lookup timestamp is NaN".into()));
    }
    // index of the first frame strictly after tau
    let after = match &meta.frames {
        FrameTimes::Timestamps(ts) => ts.partition_point(|&t| t <= tau),
        FrameTimes::ConstantFps(fps) => {
            let mut k = ((tau * fps).floor().max(0.0) as usize).min(n);
            while k < n && meta.frame_timestamp(k) <= tau {
                k += 1;
            }
            while k > 0 && meta.frame_timestamp(k - 1) > tau {
                k -= 1;
            }
            k
        }
    };
    let idx = if after == 0 {
        0
    } else if after == n {
        n - 1
    } else {
        let before = after - 1;
        let d_before = tau - meta.frame_timestamp(before);
        let d_after = meta.frame_timestamp(after) - tau;
        if d_before <= d_after {
            before
        } else {
            after
        }
    };
    Ok((idx, meta.frame_timestamp(idx)))
}

/// `start` followed by the running sums of `deltas`.
pub fn cumulative_timestamps(start: f64, deltas: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(deltas.len() + 1);
    let mut t = start;
    out.push(t);
    for d in deltas {
        t += d;
        out.push(t);
    }
    out
}

/// Draws `T - 1` gaps uniformly from `[delta_min, delta_max]`, then a start
/// uniformly over the positions where the whole clip fits in the video.
pub fn sample_clip_timestamps<R: Rng + ?Sized>(
    meta: &VideoMeta,
    spec: &SamplerSpec,
    rng: &mut R,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let (first, last) = meta.first_last();
    let available = last - first;
    if spec.max_span() > available {
        return Err(Error::Infeasible(format!(
            "{} frames with gaps up to {} s need {:.3} s of video, only {:.3} s available",
            spec.num_frames,
            spec.delta_max,
            spec.max_span(),
            available
        )));
    }
    let deltas: Vec<f64> = (0..spec.num_frames - 1)
        .map(|_| {
            if spec.delta_max > spec.delta_min {
                rng.random_range(spec.delta_min..=spec.delta_max)
            } else {
                spec.delta_min
            }
        })
        .collect();
    let span: f64 = deltas.iter().sum();
    let slack = (available - span).max(0.0);
    let start = first + if slack > 0.0 { rng.random_range(0.0..=slack) } else { 0.0 };
    Ok(cumulative_timestamps(start, &deltas))
}

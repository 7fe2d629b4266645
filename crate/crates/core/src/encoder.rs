//! Frozen frame encoder producing patch-token feature grids.
//!
//! The toy encoder is a fixed random linear map of each raw patch followed by
//! optional per-patch standardization. Features from a real backbone can be
//! ingested as LWMF files instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Frame, LatentGrid, VideoClip};
use crate::error::{invalid, shape, Axis, Error, Result};
use crate::linalg::matmul;

const STANDARDIZE_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderSpec {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub seed: u64,
    pub standardize: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 32,
            seed: 0,
            standardize: true,
        }
    }
}

impl EncoderSpec {
    pub fn raw_patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Raw patch vectors of one frame, `rows x cols` patches of `3 p^2` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub rows: usize,
    pub cols: usize,
    pub patch_len: usize,
    pub values: Vec<f32>,
}

impl Patches {
    pub fn patch(&self, i: usize, j: usize) -> &[f32] {
        let o = (i * self.cols + j) * self.patch_len;
        &self.values[o..o + self.patch_len]
    }
}

fn check_divisible(height: usize, width: usize, p: usize) -> Result<()> {
    if p == 0 {
        return Err(invalid("patch size must be positive"));
    }
    if height % p != 0 {
        return Err(Error::NotDivisible {
            axis: Axis::Height,
            size: height,
            patch: p,
        });
    }
    if width % p != 0 {
        return Err(Error::NotDivisible {
            axis: Axis::Width,
            size: width,
            patch: p,
        });
    }
    Ok(())
}

/// Cuts real-valued channel-last pixels into non-overlapping `p x p` patches,
/// flattening each as `[dy][dx][c]`.
pub fn patchify_values(height: usize, width: usize, values: &[f32], p: usize) -> Result<Patches> {
    check_divisible(height, width, p)?;
    if values.len() != height * width * 3 {
        return Err(shape(format!(
            "{height}x{width}x3 frame needs {} values, got {}",
            height * width * 3,
            values.len()
        )));
    }
    let (rows, cols, patch_len) = (height / p, width / p, 3 * p * p);
    let mut out = Vec::with_capacity(rows * cols * patch_len);
    for i in 0..rows {
        for j in 0..cols {
            for dy in 0..p {
                let start = ((i * p + dy) * width + j * p) * 3;
                out.extend_from_slice(&values[start..start + 3 * p]);
            }
        }
    }
    Ok(Patches {
        rows,
        cols,
        patch_len,
        values: out,
    })
}

/// [`patchify_values`] on a `u8` frame, scaling pixels to `[0, 1]`.
pub fn patchify(frame: &Frame, p: usize) -> Result<Patches> {
    let values: Vec<f32> = frame.pixels().iter().map(|&v| v as f32 / 255.0).collect();
    patchify_values(frame.height(), frame.width(), &values, p)
}

#[derive(Debug, Clone)]
pub struct ToyEncoder {
    spec: EncoderSpec,
    projection: Vec<f32>,
}

impl ToyEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.patch_size == 0 {
            return Err(invalid("patch size must be positive"));
        }
        if spec.embed_dim == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        let rows = spec.raw_patch_len();
        let std = 1.0 / (rows as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let projection = (0..rows * spec.embed_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(Self { spec, projection })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// The `(3 p^2) x D` projection matrix, row-major.
    pub fn projection(&self) -> &[f32] {
        &self.projection
    }

    pub fn grid_shape(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        check_divisible(height, width, self.spec.patch_size)?;
        Ok((height / self.spec.patch_size, width / self.spec.patch_size))
    }

    /// Encodes real-valued channel-last pixels; the `u8` path scales by 1/255
    /// first. Returns `rows * cols * D` values.
    pub fn encode_values(&self, height: usize, width: usize, values: &[f32]) -> Result<Vec<f32>> {
        let patches = patchify_values(height, width, values, self.spec.patch_size)?;
        let n = patches.rows * patches.cols;
        let d = self.spec.embed_dim;
        let mut out = vec![0.0f32; n * d];
        matmul(
            n,
            patches.patch_len,
            d,
            &patches.values,
            false,
            &self.projection,
            false,
            &mut out,
            false,
        );
        if self.spec.standardize {
            for token in out.chunks_exact_mut(d) {
                standardize(token);
            }
        }
        Ok(out)
    }

    /// `H x W x D` features for one frame.
    pub fn encode_frame(&self, frame: &Frame) -> Result<Vec<f32>> {
        let values: Vec<f32> = frame.pixels().iter().map(|&v| v as f32 / 255.0).collect();
        self.encode_values(frame.height(), frame.width(), &values)
    }

    pub fn encode_clip(&self, clip: &VideoClip) -> Result<LatentGrid> {
        let first = &clip.frames()[0];
        let (h, w) = self.grid_shape(first.height(), first.width())?;
        let frames = clip
            .frames()
            .iter()
            .map(|f| self.encode_frame(f))
            .collect::<Result<Vec<_>>>()?;
        LatentGrid::from_frames(
            (h, w, self.spec.embed_dim),
            &frames,
            clip.timestamps().to_vec(),
        )
    }
}

fn standardize(v: &mut [f32]) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + STANDARDIZE_EPS as f64).sqrt();
    for x in v {
        *x = ((*x as f64 - mean) * inv) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn patch_counts_match_reference_geometry() {
        let f = random_frame(224, 224, 0);
        let p = patchify(&f, 14).unwrap();
        assert_eq!((p.rows, p.cols), (16, 16));
        assert_eq!(p.rows * p.cols, 256);
        assert_eq!(p.patch_len, 588);
    }

    #[test]
    fn single_patch_is_whole_frame() {
        let f = random_frame(6, 6, 1);
        let p = patchify(&f, 6).unwrap();
        let expect: Vec<f32> = f.pixels().iter().map(|&v| v as f32 / 255.0).collect();
        assert_eq!(p.values, expect);
    }

    #[test]
    fn patch_contents_follow_block_layout() {
        let f = random_frame(8, 12, 2);
        let p = patchify(&f, 4).unwrap();
        // patch (1, 2), pixel (dy=3, dx=1), channel 2
        let v = p.patch(1, 2)[(3 * 4 + 1) * 3 + 2];
        assert_eq!(v, f.pixel(4 + 3, 8 + 1)[2] as f32 / 255.0);
    }

    #[test]
    fn non_divisible_names_axis() {
        let f = random_frame(10, 12, 3);
        let err = patchify(&f, 4).unwrap_err();
        assert!(matches!(err, Error::NotDivisible { axis: Axis::Height, .. }));
        assert!(err.to_string().contains("height"));
        let f = random_frame(12, 10, 3);
        assert!(matches!(
            patchify(&f, 4).unwrap_err(),
            Error::NotDivisible { axis: Axis::Width, .. }
        ));
    }

    #[test]
    fn encode_shape_and_determinism() {
        let spec = EncoderSpec {
            patch_size: 8,
            embed_dim: 32,
            seed: 9,
            standardize: true,
        };
        let f = random_frame(64, 64, 4);
        let a = ToyEncoder::new(spec).unwrap().encode_frame(&f).unwrap();
        let b = ToyEncoder::new(spec).unwrap().encode_frame(&f).unwrap();
        assert_eq!(a.len(), 8 * 8 * 32);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn standardized_patches_have_unit_moments() {
        let enc = ToyEncoder::new(EncoderSpec::default()).unwrap();
        let out = enc.encode_frame(&random_frame(64, 64, 5)).unwrap();
        for tok in out.chunks_exact(32) {
            let mean = tok.iter().map(|&x| x as f64).sum::<f64>() / 32.0;
            let var = tok.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn linear_without_standardization() {
        let enc = ToyEncoder::new(EncoderSpec {
            standardize: false,
            ..EncoderSpec::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.random()).collect();
        let alpha = 2.5f32;
        let scaled: Vec<f32> = vals.iter().map(|v| v * alpha).collect();
        let a = enc.encode_values(32, 32, &vals).unwrap();
        let b = enc.encode_values(32, 32, &scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((alpha * x - y).abs() < 1e-5 * (1.0 + y.abs()), "{x} {y}");
        }
    }

    #[test]
    fn clip_encoding_preserves_order_and_timestamps() {
        let enc = ToyEncoder::new(EncoderSpec::default()).unwrap();
        let f = random_frame(16, 16, 7);
        let clip = VideoClip::new(vec![f.clone(), f], vec![0.5, 0.75]).unwrap();
        let g = enc.encode_clip(&clip).unwrap();
        assert_eq!(g.shape(), (2, 2, 2, 32));
        assert_eq!(g.frame(0), g.frame(1));
        assert_eq!(g.timestamps(), &[0.5, 0.75]);

        let one = VideoClip::new(vec![random_frame(16, 16, 8)], vec![0.0]).unwrap();
        assert_eq!(enc.encode_clip(&one).unwrap().num_frames(), 1);
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let enc = ToyEncoder::new(EncoderSpec::default()).unwrap();
        assert!(enc.encode_frame(&random_frame(20, 16, 0)).is_err());
    }
}

//! Three-axis rotary position encoding over `(tau, i, j)`.
//!
//! Each attention head is laid out as three rotated chunks of `2n` dims (time,
//! vertical, horizontal) followed by `head_dim - 6n` dims left as they are.
//! Inside a chunk, interleaved pairs `(2k, 2k + 1)` rotate by
//! `coordinate / period_k` radians.

use crate::error::{invalid, shape, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub num_periods: usize,
    pub period_min: f64,
    pub period_max: f64,
}

impl RopeConfig {
    /// 64-dim heads: three 20-dim chunks from 10 periods in `[1e-2, 1e2]`,
    /// four trailing dims untouched.
    pub fn base() -> Self {
        Self {
            head_dim: 64,
            num_periods: 10,
            period_min: 1e-2,
            period_max: 1e2,
        }
    }

    /// Largest period count that fits `head_dim`, capped at 10.
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        let n = (head_dim / 6).min(10);
        let cfg = Self {
            head_dim,
            num_periods: n,
            ..Self::base()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn axis_dims(&self) -> usize {
        2 * self.num_periods
    }

    pub fn rotated_dims(&self) -> usize {
        3 * self.axis_dims()
    }

    pub fn unrotated_dims(&self) -> usize {
        self.head_dim.saturating_sub(self.rotated_dims())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_periods == 0 {
            return Err(invalid("RoPE needs at least one period per axis"));
        }
        if self.rotated_dims() > self.head_dim {
            return Err(invalid(format!(
                "3 axes x {} dims exceed head dim {}",
                self.axis_dims(),
                self.head_dim
            )));
        }
        if !(self.period_min > 0.0) || !self.period_min.is_finite() || !self.period_max.is_finite()
        {
            return Err(invalid("RoPE periods must be positive and finite"));
        }
        if self.num_periods > 1 && !(self.period_min < self.period_max) {
            return Err(invalid(format!(
                "period range [{}, {}] is empty",
                self.period_min, self.period_max
            )));
        }
        Ok(())
    }

    pub fn periods(&self) -> Result<Vec<f64>> {
        log_spaced_periods(self.num_periods, self.period_min, self.period_max)
    }
}

/// `n` periods log-uniformly spaced over `[10^-2, 10^2]`.
pub fn rope_periods(n: usize) -> Result<Vec<f64>> {
    log_spaced_periods(n, 1e-2, 1e2)
}

fn log_spaced_periods(n: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("period count must be at least 1"));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..n)
        .map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64))
        .collect())
}

/// Token position: absolute time in seconds and spatial coordinates on the
/// `[-1, 1]^2` grid.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Coord3 {
    pub tau: f64,
    pub i: f64,
    pub j: f64,
}

impl Coord3 {
    pub fn new(tau: f64, i: f64, j: f64) -> Self {
        Self { tau, i, j }
    }

    /// Like [`Coord3::new`] but enforcing finite time and in-range space.
    pub fn checked(tau: f64, i: f64, j: f64) -> Result<Self> {
        if !tau.is_finite() || !(-1.0..=1.0).contains(&i) || !(-1.0..=1.0).contains(&j) {
            return Err(invalid(format!(
                "coordinate ({tau}, {i}, {j}) outside time x [-1, 1]^2"
            )));
        }
        Ok(Self { tau, i, j })
    }

    fn axes(&self) -> [f64; 3] {
        [self.tau, self.i, self.j]
    }
}

impl std::ops::Sub for Coord3 {
    type Output = Coord3;
    fn sub(self, o: Coord3) -> Coord3 {
        Coord3::new(self.tau - o.tau, self.i - o.i, self.j - o.j)
    }
}

/// Center of patch `index` among `count`, mapped affinely onto `[-1, 1]`.
pub fn patch_center(index: usize, count: usize) -> f64 {
    -1.0 + (2 * index + 1) as f64 / count as f64
}

/// Rotates one head-dim vector.
pub fn rotate_token(v: &[f32], c: Coord3, cfg: &RopeConfig) -> Result<Vec<f32>> {
    cfg.validate()?;
    if v.len() != cfg.head_dim {
        return Err(shape(format!(
            "vector of length {} does not match head dim {}",
            v.len(),
            cfg.head_dim
        )));
    }
    let periods = cfg.periods()?;
    let mut out = v.to_vec();
    for (axis, coord) in c.axes().into_iter().enumerate() {
        let base = axis * cfg.axis_dims();
        for (k, w) in periods.iter().enumerate() {
            let (s, co) = (coord / w).sin_cos();
            let (x0, x1) = (v[base + 2 * k] as f64, v[base + 2 * k + 1] as f64);
            out[base + 2 * k] = (x0 * co - x1 * s) as f32;
            out[base + 2 * k + 1] = (x0 * s + x1 * co) as f32;
        }
    }
    Ok(out)
}

/// Precomputed cos/sin for a batch of token coordinates, shared by all heads.
#[derive(Debug, Clone)]
pub(crate) struct RopeTable {
    per_token: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(cfg: &RopeConfig, coords: &[Coord3]) -> Self {
        let periods = cfg.periods().expect("validated config");
        let per_token = 3 * periods.len();
        let mut cos = Vec::with_capacity(coords.len() * per_token);
        let mut sin = Vec::with_capacity(coords.len() * per_token);
        for c in coords {
            for coord in c.axes() {
                for w in &periods {
                    let (s, co) = (coord / w).sin_cos();
                    cos.push(co as f32);
                    sin.push(s as f32);
                }
            }
        }
        Self { per_token, cos, sin }
    }

    /// Rotates every head of every token in `x` (`tokens x heads*head_dim`).
    /// `inverse` applies the transpose rotation, which is what the backward
    /// pass needs.
    pub fn apply(&self, x: &mut [f32], heads: usize, cfg: &RopeConfig, inverse: bool) {
        let width = heads * cfg.head_dim;
        let n = cfg.num_periods;
        let sign = if inverse { -1.0f32 } else { 1.0 };
        for (t, row) in x.chunks_exact_mut(width).enumerate() {
            let cos = &self.cos[t * self.per_token..(t + 1) * self.per_token];
            let sin = &self.sin[t * self.per_token..(t + 1) * self.per_token];
            for head in row.chunks_exact_mut(cfg.head_dim) {
                for axis in 0..3 {
                    let base = axis * 2 * n;
                    for k in 0..n {
                        let (c, s) = (cos[axis * n + k], sign * sin[axis * n + k]);
                        let (x0, x1) = (head[base + 2 * k], head[base + 2 * k + 1]);
                        head[base + 2 * k] = x0 * c - x1 * s;
                        head[base + 2 * k + 1] = x0 * s + x1 * c;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_coord(rng: &mut ChaCha8Rng) -> Coord3 {
        Coord3::new(
            rng.random_range(0.0..5.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    #[test]
    fn ten_periods_span_four_decades() {
        let p = rope_periods(10).unwrap();
        assert!((p[0] - 0.01).abs() < 1e-15);
        assert!((p[9] - 100.0).abs() < 1e-12);
        let ratio = 10f64.powf(4.0 / 9.0);
        assert!((ratio - 2.7826).abs() < 1e-4);
        for w in p.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-12);
        }
        assert!((p[1] - 0.02783).abs() < 1e-5);
    }

    #[test]
    fn degenerate_period_counts() {
        assert_eq!(rope_periods(1).unwrap(), vec![0.01]);
        assert!(rope_periods(0).is_err());
    }

    #[test]
    fn base_layout_is_three_twenty_dim_chunks_plus_four() {
        let cfg = RopeConfig::base();
        cfg.validate().unwrap();
        assert_eq!(cfg.axis_dims(), 20);
        assert_eq!(cfg.unrotated_dims(), 4);
        assert_eq!(3 * cfg.axis_dims() + cfg.unrotated_dims(), 64);
    }

    #[test]
    fn zero_coordinate_is_identity() {
        let cfg = RopeConfig::base();
        let v = rand_vec(&mut ChaCha8Rng::seed_from_u64(0), 64);
        assert_eq!(rotate_token(&v, Coord3::default(), &cfg).unwrap(), v);
    }

    #[test]
    fn rotation_preserves_norm_and_trailing_dims() {
        let cfg = RopeConfig::base();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = rand_vec(&mut rng, 64);
            let r = rotate_token(&v, rand_coord(&mut rng), &cfg).unwrap();
            assert!((dot(&v, &v).sqrt() - dot(&r, &r).sqrt()).abs() < 1e-6);
            assert_eq!(&r[60..], &v[60..]);
        }
    }

    #[test]
    fn relative_position_identity() {
        let cfg = RopeConfig::base();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (q, k) = (rand_vec(&mut rng, 64), rand_vec(&mut rng, 64));
            let (a, b) = (rand_coord(&mut rng), rand_coord(&mut rng));
            let lhs = dot(
                &rotate_token(&q, a, &cfg).unwrap(),
                &rotate_token(&k, b, &cfg).unwrap(),
            );
            let rhs = dot(&rotate_token(&q, a - b, &cfg).unwrap(), &k);
            assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn chunks_are_isolated() {
        let cfg = RopeConfig::base();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = rand_vec(&mut rng, 64);
        let c = rand_coord(&mut rng);
        let a = rotate_token(&v, c, &cfg).unwrap();
        let b = rotate_token(&v, Coord3 { tau: c.tau + 1.7, ..c }, &cfg).unwrap();
        assert_ne!(a[..20], b[..20]);
        assert_eq!(a[20..], b[20..]);
        let b = rotate_token(&v, Coord3 { j: -c.j, ..c }, &cfg).unwrap();
        assert_eq!(a[..40], b[..40]);
    }

    #[test]
    fn table_matches_single_token_path_and_inverts() {
        let cfg = RopeConfig::for_head_dim(32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coords: Vec<Coord3> = (0..3).map(|_| rand_coord(&mut rng)).collect();
        let heads = 2;
        let x = rand_vec(&mut rng, 3 * heads * 32);
        let table = RopeTable::new(&cfg, &coords);
        let mut y = x.clone();
        table.apply(&mut y, heads, &cfg, false);
        for t in 0..3 {
            for h in 0..heads {
                let o = (t * heads + h) * 32;
                let want = rotate_token(&x[o..o + 32], coords[t], &cfg).unwrap();
                for (a, b) in y[o..o + 32].iter().zip(&want) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
        table.apply(&mut y, heads, &cfg, true);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(rotate_token(&[0.0; 10], Coord3::default(), &RopeConfig::base()).is_err());
    }

    #[test]
    fn patch_centers_cover_unit_square() {
        assert_eq!(patch_center(0, 1), 0.0);
        assert_eq!(patch_center(0, 4), -0.75);
        assert_eq!(patch_center(3, 4), 0.75);
    }
}

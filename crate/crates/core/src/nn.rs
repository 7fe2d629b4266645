//! Flat named parameter storage and the layers built on top of it.
//!
//! Every model keeps its weights in one contiguous `Vec<f32>`; layers only
//! remember offsets. Gradients live in a vector of the same length, which
//! keeps the optimizer, checkpointing and finite-difference checks trivial.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::matmul;

pub(crate) const LN_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Normal(f32),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    data: Vec<f32>,
    specs: Vec<TensorSpec>,
}

impl ParamSet {
    pub(crate) fn add<R: Rng + ?Sized>(
        &mut self,
        name: String,
        dims: Vec<usize>,
        init: Init,
        decay: bool,
        rng: &mut R,
    ) -> usize {
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate {name}");
        let offset = self.data.len();
        let n: usize = dims.iter().product();
        match init {
            Init::Zeros => self.data.resize(offset + n, 0.0),
            Init::Ones => self.data.resize(offset + n, 1.0),
            Init::Normal(std) => {
                let normal = Normal::new(0.0f32, std).expect("finite std");
                self.data.extend((0..n).map(|_| normal.sample(rng)));
            }
        }
        self.specs.push(TensorSpec {
            name,
            dims,
            offset,
            decay,
        });
        offset
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.spec(name).map(|s| &self.data[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let range = self.spec(name)?.range();
        Some(&mut self.data[range])
    }

    /// Per-element weight-decay mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.data.len()];
        for s in &self.specs {
            if s.decay {
                mask[s.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

/// `y = x W^T + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f32).sqrt();
        let w = ps.add(
            format!("{name}.weight"),
            vec![fan_out, fan_in],
            Init::Normal(std),
            true,
            rng,
        );
        let b = ps.add(format!("{name}.bias"), vec![fan_out], Init::Zeros, false, rng);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    fn weight<'a>(&self, p: &'a [f32]) -> &'a [f32] {
        &p[self.w..self.w + self.fan_in * self.fan_out]
    }

    pub fn forward(&self, p: &[f32], x: &[f32], rows: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), rows * self.fan_in);
        let mut y = vec![0.0f32; rows * self.fan_out];
        matmul(
            rows,
            self.fan_in,
            self.fan_out,
            x,
            false,
            self.weight(p),
            true,
            &mut y,
            false,
        );
        let bias = &p[self.b..self.b + self.fan_out];
        for row in y.chunks_exact_mut(self.fan_out) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        y
    }

    /// Accumulates weight/bias gradients into `g` and returns `dL/dx`.
    pub fn backward(
        &self,
        p: &[f32],
        g: &mut [f32],
        x: &[f32],
        dy: &[f32],
        rows: usize,
        want_dx: bool,
    ) -> Vec<f32> {
        let (fi, fo) = (self.fan_in, self.fan_out);
        matmul(
            fo,
            rows,
            fi,
            dy,
            true,
            x,
            false,
            &mut g[self.w..self.w + fi * fo],
            true,
        );
        let gb = &mut g[self.b..self.b + fo];
        for row in dy.chunks_exact(fo) {
            gb.iter_mut().zip(row).for_each(|(a, d)| *a += d);
        }
        if !want_dx {
            return Vec::new();
        }
        let mut dx = vec![0.0f32; rows * fi];
        matmul(rows, fo, fi, dy, false, self.weight(p), false, &mut dx, false);
        dx
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    w: usize,
    b: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LnCache {
    xhat: Vec<f32>,
    rstd: Vec<f32>,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, rng: &mut R) -> Self {
        let w = ps.add(format!("{name}.weight"), vec![dim], Init::Ones, false, rng);
        let b = ps.add(format!("{name}.bias"), vec![dim], Init::Zeros, false, rng);
        Self { w, b, dim }
    }

    pub fn forward(&self, p: &[f32], x: &[f32], keep: bool) -> (Vec<f32>, LnCache) {
        let d = self.dim;
        let rows = x.len() / d;
        let gamma = &p[self.w..self.w + d];
        let beta = &p[self.b..self.b + d];
        let mut y = vec![0.0f32; x.len()];
        let mut cache = LnCache::default();
        if keep {
            cache.xhat = vec![0.0; x.len()];
            cache.rstd = vec![0.0; rows];
        }
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS as f64).sqrt();
            let out = &mut y[r * d..(r + 1) * d];
            for c in 0..d {
                let xh = ((row[c] as f64 - mean) * rstd) as f32;
                out[c] = xh * gamma[c] + beta[c];
                if keep {
                    cache.xhat[r * d + c] = xh;
                }
            }
            if keep {
                cache.rstd[r] = rstd as f32;
            }
        }
        (y, cache)
    }

    pub fn backward(&self, p: &[f32], g: &mut [f32], cache: &LnCache, dy: &[f32]) -> Vec<f32> {
        let d = self.dim;
        let rows = dy.len() / d;
        let gamma = &p[self.w..self.w + d];
        let mut dx = vec![0.0f32; dy.len()];
        for r in 0..rows {
            let dyr = &dy[r * d..(r + 1) * d];
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let mut sum_dxh = 0.0f64;
            let mut sum_dxh_xh = 0.0f64;
            for c in 0..d {
                g[self.w + c] += dyr[c] * xh[c];
                g[self.b + c] += dyr[c];
                let dxh = (dyr[c] * gamma[c]) as f64;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[c] as f64;
            }
            let rstd = cache.rstd[r] as f64;
            let inv_d = 1.0 / d as f64;
            for c in 0..d {
                let dxh = (dyr[c] * gamma[c]) as f64;
                dx[r * d + c] =
                    (rstd * (dxh - inv_d * sum_dxh - xh[c] as f64 * inv_d * sum_dxh_xh)) as f32;
            }
        }
        dx
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

/// Branch-free `exp` (range reduction plus a degree-5 polynomial), a few
/// ulp from libm and auto-vectorizable. Inputs are clamped to `[-80, 80]`.
fn exp_poly(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.max(-80.0).min(80.0);
    // the low mantissa bits of `t` hold round(x / ln 2) in two's complement
    let t = x * std::f32::consts::LOG2_E + ROUND;
    let n = t - ROUND;
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 0.166_666_65;
    p = p * r + 0.5;
    let e = p * r * r + r + 1.0;
    e * f32::from_bits(t.to_bits().wrapping_add(127) << 23)
}

fn tanh_exp(u: f32) -> f32 {
    1.0 - 2.0 / (exp_poly(2.0 * u) + 1.0)
}

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh_exp(GELU_C * (x + 0.044715 * x * x * x)))
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = tanh_exp(inner);
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(y: &[f32], w: &[f32]) -> f64 {
        y.iter().zip(w).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    #[test]
    fn polynomial_exp_tracks_libm() {
        let mut x = -80.0f32;
        while x <= 80.0 {
            let (a, b) = (exp_poly(x), x.exp());
            assert!(((a - b) / b).abs() < 1e-6, "{x}: {a} vs {b}");
            assert!((tanh_exp(x) - x.tanh()).abs() < 1e-6, "{x}");
            x += 0.0137;
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0f32, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-3;
            let fd = (gelu(x + h) as f64 - gelu(x - h) as f64) / (2.0 * h as f64);
            assert!((fd - gelu_grad(x) as f64).abs() < 1e-3, "{x}");
        }
    }

    #[test]
    fn linear_and_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::default();
        let ln = LayerNorm::new(&mut ps, "ln", 5, &mut rng);
        let lin = Linear::new(&mut ps, "lin", 5, 3, &mut rng);
        // perturb norm params away from identity
        for v in ps.data_mut().iter_mut().take(10) {
            *v += rng.random_range(-0.5..0.5);
        }
        let rows = 4;
        let x: Vec<f32> = (0..rows * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let wts: Vec<f32> = (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |p: &[f32], x: &[f32]| {
            let (u, _) = ln.forward(p, x, false);
            loss(&lin.forward(p, &u, rows), &wts)
        };
        let p = ps.data().to_vec();
        let (u, cache) = ln.forward(&p, &x, true);
        let mut g = vec![0.0f32; p.len()];
        let du = lin.backward(&p, &mut g, &u, &wts, rows, true);
        let dx = ln.backward(&p, &mut g, &cache, &du);
        let h = 1e-2f32;
        for i in 0..p.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (run(&a, &x) - run(&b, &x)) / (2.0 * h as f64);
            assert!((fd - g[i] as f64).abs() < 2e-3 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += h;
            b[i] -= h;
            let fd = (run(&p, &a) - run(&p, &b)) / (2.0 * h as f64);
            assert!((fd - dx[i] as f64).abs() < 2e-3 * (1.0 + fd.abs()), "x {i}");
        }
    }

    #[test]
    fn decay_mask_follows_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::default();
        Linear::new(&mut ps, "l", 2, 2, &mut rng);
        let mask = ps.decay_mask();
        assert_eq!(mask, vec![true, true, true, true, false, false]);
        assert_eq!(ps.get("l.bias").unwrap(), &[0.0, 0.0]);
    }
}

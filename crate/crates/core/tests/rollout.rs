use std::cell::RefCell;

use lwm_core::data::LatentGrid;
use lwm_core::predictor::{Predictor, PredictorConfig, QuerySpec};
use lwm_core::rollout::*;
use lwm_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(seed: u64, t: usize, h: usize, w: usize, d: usize) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..t * h * w * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let ts = (0..t).map(|k| 0.1 * k as f64).collect();
    LatentGrid::new((t, h, w, d), data, ts).unwrap()
}

/// Records the context length it was called with and echoes the true frame.
struct Recorder<'a> {
    truth: &'a LatentGrid,
    seen: RefCell<Vec<(usize, f64)>>,
}

impl Forecaster for Recorder<'_> {
    fn predict_frame(&self, ctx: &LatentGrid, tau: f64) -> lwm_core::Result<Vec<f32>> {
        self.seen.borrow_mut().push((ctx.num_frames(), tau));
        let k = self.truth.timestamps().iter().position(|&t| t == tau).unwrap();
        Ok(self.truth.frame(k).to_vec())
    }
}

#[test]
fn single_target_matches_direct_prediction() {
    let p = Predictor::new(PredictorConfig::tiny(4, 16, 1, 2).unwrap(), 2).unwrap();
    let ctx = random_grid(1, 3, 2, 2, 4);
    let r = rollout_autoregressive(&p, &ctx, &[0.45]).unwrap();
    let direct = p.predict_direct(&ctx, &QuerySpec::grid(0.45)).unwrap();
    assert_eq!(r.predictions.len(), 1);
    let worst = r.predictions[0].data().iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1e-6);
}

#[test]
fn rollout_grows_the_context_by_one_per_target() {
    let truth = random_grid(2, 20, 2, 2, 3);
    let ctx = truth.select(&[1, 4, 7, 10]).unwrap();
    let rec = Recorder {
        truth: &truth,
        seen: RefCell::new(Vec::new()),
    };
    let targets: Vec<f64> = [13, 16, 19].iter().map(|&i| truth.timestamps()[i]).collect();
    let r = rollout_autoregressive(&rec, &ctx, &targets).unwrap();
    assert_eq!(r.context_lengths, vec![4, 5, 6]);
    assert_eq!(r.final_context_len, 7);
    assert_eq!(r.predictions.len(), 3);
    for (p, &tau) in r.predictions.iter().zip(&targets) {
        assert_eq!(p.timestamps(), &[tau]);
    }
    assert_eq!(rec.seen.borrow().iter().map(|s| s.0).collect::<Vec<_>>(), vec![4, 5, 6]);

    assert!(rollout_autoregressive(&rec, &ctx, &[1.5, 1.4]).is_err());
    assert!(rollout_autoregressive(&rec, &ctx, &[ctx.last_timestamp()]).is_err());
}

#[test]
fn exact_and_static_models_score_zero() {
    let truth = random_grid(3, 8, 2, 2, 3);
    let rec = Recorder {
        truth: &truth,
        seen: RefCell::new(Vec::new()),
    };
    let s = surprise_trace(&rec, &truth, 4).unwrap();
    assert_eq!(s.scores, vec![0.0; 4]);

    let frame = truth.frame(0).to_vec();
    let mut still = truth.slice(0..1).unwrap();
    for k in 1..8 {
        still.push_frame(&frame, 0.1 * k as f64).unwrap();
    }
    let s = surprise_trace(&CopyLast, &still, 4).unwrap();
    assert_eq!(s.scores, vec![0.0; 4]);
    assert!(surprise_trace(&CopyLast, &still, 8).is_err());
    assert!(surprise_trace(&CopyLast, &still, 0).is_err());
}

#[test]
fn accuracy_extremes() {
    let t = |v: &[f64]| SurpriseTrace {
        scores: v.to_vec(),
        context_len: 4,
    };
    let right = vec![(t(&[0.1, 0.2]), t(&[0.1, 0.5])); 3];
    assert_eq!(relative_accuracy(&right, Aggregator::Max).unwrap(), 1.0);
    let same = vec![(t(&[0.3]), t(&[0.3]))];
    assert_eq!(relative_accuracy(&same, Aggregator::Mean).unwrap(), 0.5);
    assert!(relative_accuracy(&[], Aggregator::Max).is_err());
    assert_eq!("max".parse::<Aggregator>().unwrap(), Aggregator::Max);
    assert!("median".parse::<Aggregator>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn surprise_is_non_negative(seed in any::<u64>(), ctx in 1usize..5) {
        let g = random_grid(seed, 6, 2, 2, 3);
        let p = Predictor::new(PredictorConfig::tiny(3, 16, 1, 2).unwrap(), seed).unwrap();
        let s = surprise_trace(&p, &g, ctx).unwrap();
        prop_assert_eq!(s.scores.len(), 6 - ctx);
        prop_assert!(s.scores.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn accuracy_ignores_monotone_transforms(
        pairs in proptest::collection::vec(
            (proptest::collection::vec(0.0f64..5.0, 1..6), proptest::collection::vec(0.0f64..5.0, 1..6)),
            1..20,
        ),
        max in any::<bool>(),
        a in 0.1f64..10.0,
        b in -3.0f64..3.0,
    ) {
        let agg = if max { Aggregator::Max } else { Aggregator::Mean };
        let wrap = |v: &Vec<f64>, f: &dyn Fn(f64) -> f64| SurpriseTrace {
            scores: v.iter().map(|x| f(*x)).collect(),
            context_len: 1,
        };
        let id = |x: f64| x;
        // affine maps commute with both the mean and the max
        let affine = |x: f64| a * x + b;
        let raw: Vec<_> = pairs.iter().map(|(p, q)| (wrap(p, &id), wrap(q, &id))).collect();
        let moved: Vec<_> = pairs.iter().map(|(p, q)| (wrap(p, &affine), wrap(q, &affine))).collect();
        let x = relative_accuracy(&raw, agg).unwrap();
        let y = relative_accuracy(&moved, agg).unwrap();
        prop_assert!((x - y).abs() < 1e-12 || pairs.iter().any(|(p, q)| (agg.apply(p) - agg.apply(q)).abs() < 1e-9));
        if max {
            // any strictly increasing map commutes with the max
            let cube = |x: f64| (x - 1.0).powi(3);
            let bent: Vec<_> = pairs.iter().map(|(p, q)| (wrap(p, &cube), wrap(q, &cube))).collect();
            prop_assert_eq!(relative_accuracy(&bent, agg).unwrap(), x);
        }
    }
}

/// Top eigenvalues of a symmetric matrix by power iteration with deflation.
fn power_eigenvalues(mut m: Vec<Vec<f64>>, k: usize) -> Vec<f64> {
    let n = m.len();
    let mut out = Vec::new();
    for c in 0..k {
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i * 7 + c * 3) as f64 % 5.0).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| m[i][j] * v[j]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            v = w.iter().map(|x| x / norm).collect();
        }
        for i in 0..n {
            for j in 0..n {
                m[i][j] -= lambda * v[i] * v[j];
            }
        }
        out.push(lambda);
    }
    out
}

#[test]
fn pca_matches_power_iteration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (t, h, w, d) = (3, 4, 4, 6);
    // anisotropic data so the spectrum is well separated
    let scales = [3.0f32, 2.0, 1.2, 0.5, 0.3, 0.1];
    let data: Vec<f32> = (0..t * h * w)
        .flat_map(|_| scales.iter().map(|s| s * rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>())
        .collect();
    let g = LatentGrid::new((t, h, w, d), data.clone(), vec![0.0, 0.1, 0.2]).unwrap();
    let pca = fit_pca(&g).unwrap();

    let n = (t * h * w) as f64;
    let mean: Vec<f64> = (0..d).map(|k| data.iter().skip(k).step_by(d).map(|&x| x as f64).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in data.chunks_exact(d) {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (row[a] as f64 - mean[a]) * (row[b] as f64 - mean[b]) / n;
            }
        }
    }
    let total: f64 = (0..d).map(|k| cov[k][k]).sum();
    let eig = power_eigenvalues(cov, 3);
    let ratio = pca.explained_ratio();
    for c in 0..3 {
        assert!((ratio[c] - eig[c] / total).abs() < 1e-4, "{c}: {} vs {}", ratio[c], eig[c] / total);
    }

    let frames = pca.render(&g).unwrap();
    assert_eq!(frames.len(), 3);
    assert_eq!((frames[0].height(), frames[0].width()), (4, 4));
}

#[test]
fn targets_use_the_reference_projection() {
    let a = random_grid(7, 2, 3, 3, 5);
    let mut shifted = a.data().to_vec();
    shifted.iter_mut().for_each(|v| *v = *v * 3.0 + 1.0);
    let b = LatentGrid::new(a.shape(), shifted, a.timestamps().to_vec()).unwrap();
    let ab = pca_visualize(&a, std::slice::from_ref(&b)).unwrap();
    let bb = pca_visualize(&b, std::slice::from_ref(&b)).unwrap();
    assert_ne!(ab, bb);

    let flat = LatentGrid::new((1, 2, 2, 4), vec![0.5; 16], vec![0.0]).unwrap();
    assert!(matches!(fit_pca(&flat), Err(Error::DegenerateRank)));
}

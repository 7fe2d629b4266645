use lwm_core::data::LatentGrid;
use lwm_core::predictor::{
    block_triangular_mask, init_predictor, smooth_l1, Predictor, PredictorConfig, QuerySpec,
};
use lwm_core::rope::{Coord3, RopeConfig};
use lwm_core::training::loss_and_grad;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, d: usize) -> LatentGrid {
    let data = (0..t * h * w * d).map(|_| rng.random_range(-1.5f32..1.5)).collect();
    let mut ts = Vec::with_capacity(t);
    let mut tau = rng.random_range(0.0..1.0);
    for _ in 0..t {
        ts.push(tau);
        tau += rng.random_range(0.05..0.5);
    }
    LatentGrid::new((t, h, w, d), data, ts).unwrap()
}

fn gradcheck_config() -> PredictorConfig {
    PredictorConfig {
        input_dim: 4,
        model_dim: 16,
        num_blocks: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
        rope: RopeConfig::for_head_dim(8).unwrap(),
    }
}

fn small_config(rng: &mut ChaCha8Rng) -> PredictorConfig {
    let heads = rng.random_range(1..=3);
    let head_dim = [6, 8, 12][rng.random_range(0..3)];
    PredictorConfig {
        input_dim: rng.random_range(2..=6),
        model_dim: heads * head_dim,
        num_blocks: rng.random_range(1..=2),
        num_heads: heads,
        mlp_ratio: 2.0,
        rope: RopeConfig::for_head_dim(head_dim).unwrap(),
    }
}

/// Randomizes every parameter so norms and biases are exercised too.
fn jitter(p: &mut Predictor, rng: &mut ChaCha8Rng, scale: f32) {
    for v in p.params_mut().data_mut() {
        *v += rng.random_range(-scale..scale);
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = init_predictor(gradcheck_config(), &mut rng).unwrap();
    assert!(p.num_params() <= 5000, "{}", p.num_params());
    jitter(&mut p, &mut rng, 0.2);
    let grids = vec![random_grid(&mut rng, 3, 2, 2, 4), random_grid(&mut rng, 3, 2, 2, 4)];
    let (_, grad) = loss_and_grad(&p, &grids).unwrap();
    let h = 2e-3f32;
    let gmax = grad.iter().fold(0.0f32, |m, g| m.max(g.abs())) as f64;
    let mut worst = 0.0f64;
    for i in 0..p.num_params() {
        let orig = p.params().data()[i];
        p.params_mut().data_mut()[i] = orig + h;
        let up = loss_and_grad(&p, &grids).unwrap().0;
        p.params_mut().data_mut()[i] = orig - h;
        let down = loss_and_grad(&p, &grids).unwrap().0;
        p.params_mut().data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h as f64);
        let an = grad[i] as f64;
        // entries far below the gradient scale are dominated by f32 noise
        let denom = an.abs().max(fd.abs()).max(1e-2 * gmax);
        let rel = (an - fd).abs() / denom;
        worst = worst.max(rel);
        assert!(rel <= 1e-2, "param {i}: analytic {an:.6e} fd {fd:.6e} rel {rel:.3e}");
    }
    eprintln!("gradient check: {} params, worst rel err {worst:.3e}", p.num_params());
}

#[test]
fn mask_counts() {
    let m = block_triangular_mask(3, 2).unwrap();
    assert_eq!(m.count(), 12);
    assert_eq!(m.row_sum(0), 2);
    assert_eq!(m.row_sum(1), 2);
    assert_eq!(m.row_sum(2), 4);
    for t in 2..=6 {
        for hw in 1..=4 {
            let m = block_triangular_mask(t, hw).unwrap();
            let mut brute = 0;
            for q in 0..m.queries {
                for k in 0..m.keys {
                    // query block q/hw predicts frame q/hw + 2 (1-based), sees frames 1..=q/hw+1
                    if k / hw <= q / hw {
                        brute += 1;
                        assert!(m.get(q, k));
                    } else {
                        assert!(!m.get(q, k));
                    }
                }
            }
            assert_eq!(brute, hw * hw * (t - 1) * t / 2);
            assert_eq!(m.count(), brute);
        }
    }
    assert!(block_triangular_mask(1, 4).is_err());
}

#[test]
fn forward_train_shape_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = Predictor::new(PredictorConfig::tiny(8, 24, 1, 2).unwrap(), 3).unwrap();
    let g = random_grid(&mut rng, 4, 3, 2, 8);
    let out = p.forward_train(&g).unwrap();
    assert_eq!(out.shape(), (3, 3, 2, 8));
    assert_eq!(out.timestamps(), &g.timestamps()[1..]);
    assert!(p.forward_train(&g.slice(0..1).unwrap()).is_err());
    let wrong_dim = random_grid(&mut rng, 3, 2, 2, 5);
    assert!(p.forward_train(&wrong_dim).is_err());
}

#[test]
fn perturbing_frame_three_keeps_earlier_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = Predictor::new(PredictorConfig::desk(), 5).unwrap();
    let g = random_grid(&mut rng, 4, 4, 4, 32);
    let mut data = g.data().to_vec();
    let fl = g.frame_len();
    for v in &mut data[2 * fl..3 * fl] {
        *v += rng.random_range(-3.0..3.0);
    }
    let g2 = LatentGrid::new(g.shape(), data, g.timestamps().to_vec()).unwrap();
    let a = p.forward_train(&g).unwrap();
    let b = p.forward_train(&g2).unwrap();
    // predictions for frames 2 and 3 are slices 0 and 1
    for (x, y) in a.data()[..2 * fl].iter().zip(&b.data()[..2 * fl]) {
        assert!((x - y).abs() <= 1e-6);
    }
    assert!(a.data()[2 * fl..] != b.data()[2 * fl..]);
}

#[test]
fn direct_prediction_matches_teacher_forced_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = Predictor::new(PredictorConfig::desk(), 6).unwrap();
    jitter(&mut p, &mut rng, 0.05);
    let g = random_grid(&mut rng, 4, 4, 4, 32);
    let tf = p.forward_train(&g).unwrap();
    for t in 1..4 {
        let ctx = g.slice(0..t).unwrap();
        let q = QuerySpec::grid(g.timestamps()[t]);
        let direct = p.predict_direct(&ctx, &q).unwrap();
        let slice = tf.frame(t - 1);
        for (x, y) in direct.iter().zip(slice) {
            assert!((x - y).abs() <= 1e-5, "{x} {y}");
        }
        let single = p
            .predict_direct(&ctx, &QuerySpec::single(g.timestamps()[t], 2, 1))
            .unwrap();
        let d = 32;
        let idx = (2 * 4 + 1) * d;
        for (x, y) in single.iter().zip(&slice[idx..idx + d]) {
            assert!((x - y).abs() <= 1e-5);
        }
        assert_eq!(direct, p.predict_direct(&ctx, &q).unwrap());
    }
    let ctx = g.slice(0..2).unwrap();
    let last = ctx.last_timestamp();
    assert!(p.predict_direct(&ctx, &QuerySpec::grid(last)).is_err());
    assert!(p.predict_direct(&ctx, &QuerySpec::grid(last - 1.0)).is_err());
    assert!(p.predict_direct(&ctx, &QuerySpec::single(last + 1.0, 4, 0)).is_err());
}

#[test]
fn permuting_context_tokens_with_coordinates_is_invisible() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = PredictorConfig::tiny(6, 24, 2, 2).unwrap();
    let mut p = Predictor::new(cfg, 1).unwrap();
    jitter(&mut p, &mut rng, 0.05);
    let n = 12;
    let tokens: Vec<f32> = (0..n * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let coords: Vec<Coord3> = (0..n)
        .map(|_| Coord3::new(rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let queries = vec![Coord3::new(1.5, 0.25, -0.75), Coord3::new(1.7, -1.0, 1.0)];
    let base = p.predict_points(&tokens, &coords, &queries).unwrap();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let ptok: Vec<f32> = order.iter().flat_map(|&i| tokens[i * 6..(i + 1) * 6].to_vec()).collect();
    let pco: Vec<Coord3> = order.iter().map(|&i| coords[i]).collect();
    let perm = p.predict_points(&ptok, &pco, &queries).unwrap();
    for (x, y) in base.iter().zip(&perm) {
        assert!((x - y).abs() <= 1e-5, "{x} {y}");
    }
}

#[test]
fn batched_queries_match_single_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = Predictor::new(PredictorConfig::tiny(6, 24, 2, 2).unwrap(), 1).unwrap();
    jitter(&mut p, &mut rng, 0.05);
    let g = random_grid(&mut rng, 3, 3, 3, 6);
    let tau = g.last_timestamp() + 0.2;
    let full = p.predict_direct(&g, &QuerySpec::grid(tau)).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let one = p.predict_direct(&g, &QuerySpec::single(tau, i, j)).unwrap();
            let o = (i * 3 + j) * 6;
            for (x, y) in one.iter().zip(&full[o..o + 6]) {
                assert!((x - y).abs() <= 1e-5);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causality_holds_for_random_models(seed in any::<u64>(), t in 2usize..6, cut in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_config(&mut rng);
        let p = init_predictor(cfg.clone(), &mut rng).unwrap();
        let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
        let g = random_grid(&mut rng, t, h, w, cfg.input_dim);
        let cut = cut % t; // perturb frames with 0-based index > cut
        let fl = g.frame_len();
        let mut data = g.data().to_vec();
        for v in &mut data[(cut + 1) * fl..] {
            *v = rng.random_range(-4.0..4.0);
        }
        let g2 = LatentGrid::new(g.shape(), data, g.timestamps().to_vec()).unwrap();
        let a = p.forward_train(&g).unwrap();
        let b = p.forward_train(&g2).unwrap();
        // predictions of 0-based frames 1..=cut+1 are output slices 0..=cut
        let keep = ((cut + 1).min(t - 1)) * fl;
        for (x, y) in a.data()[..keep].iter().zip(&b.data()[..keep]) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn same_seed_same_weights(seed in any::<u64>()) {
        let cfg = PredictorConfig::tiny(4, 12, 1, 2).unwrap();
        let a = Predictor::new(cfg.clone(), seed).unwrap();
        let b = Predictor::new(cfg, seed).unwrap();
        let ab: Vec<u32> = a.params().data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.params().data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(ab, bb);
    }
}

#[test]
fn smooth_l1_reference_values() {
    assert_eq!(smooth_l1(&[0.3, -1.0], &[0.3, -1.0], 0.1).unwrap(), 0.0);
    let inside = smooth_l1(&[0.05], &[0.0], 0.1).unwrap();
    assert!((inside - 0.05f64 * 0.05 / 0.2).abs() < 1e-9);
    let outside = smooth_l1(&[0.0], &[1.0], 0.1).unwrap();
    assert!((outside - 0.95).abs() < 1e-9);
    // continuity at |d| = beta from both branches
    let below = 0.1f64 * 0.1 / 0.2;
    let above = 0.1 - 0.05;
    assert!((below - above).abs() < 1e-12);
    let at = smooth_l1(&[0.1], &[0.0], 0.1).unwrap();
    assert!((at - 0.05).abs() < 1e-8);
}

use lwm_core::action::*;
use lwm_core::data::LatentGrid;
use lwm_core::encoder::{EncoderSpec, ToyEncoder};
use lwm_core::env::{generate_trajectories, EnvSpec};
use lwm_core::planner::encode_trajectory;
use lwm_core::predictor::{Predictor, PredictorConfig, QuerySpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn random_grid(rng: &mut ChaCha8Rng, t: usize, d: usize) -> LatentGrid {
    let data = (0..t * 2 * 3 * d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let ts = (0..t).map(|k| 0.2 * k as f64 + rng.random_range(0.0..0.1)).collect();
    LatentGrid::new((t, 2, 3, d), data, ts).unwrap()
}

fn random_actions(rng: &mut ChaCha8Rng, n: usize, a: usize, scale: f32) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..a).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

fn digest(v: &[f32]) -> Vec<u8> {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    Sha256::digest(bytes).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fresh_blocks_are_an_identity(seed in any::<u64>(), t in 2usize..5, a in 1usize..6, scale in 0.0f32..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Predictor::new(PredictorConfig::tiny(6, 12, 2, 2).unwrap(), seed).unwrap();
        let grid = random_grid(&mut rng, t, 6);
        let plain = base.forward_train(&grid).unwrap();
        let cp = attach_action_blocks(base, a, &mut rng).unwrap();
        let acts = random_actions(&mut rng, t - 1, a, scale);
        let cond = cp.forward_conditioned(&grid, &acts).unwrap();
        let worst = plain.data().iter().zip(cond.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        prop_assert!(worst <= 1e-6, "{}", worst);
    }
}

#[test]
fn opening_one_scale_makes_actions_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = Predictor::new(PredictorConfig::tiny(6, 12, 2, 2).unwrap(), 1).unwrap();
    let mut cp = attach_action_blocks(base, 2, &mut rng).unwrap();
    let grid = random_grid(&mut rng, 3, 6);
    let zero = vec![vec![0.0f32; 2]; 2];
    let push = vec![vec![0.7f32, -0.4]; 2];
    assert_eq!(
        cp.forward_conditioned(&grid, &zero).unwrap(),
        cp.forward_conditioned(&grid, &push).unwrap()
    );
    cp.action_params_mut().get_mut("action.blocks.0.scale").unwrap()[0] = 1.0;
    let a = cp.forward_conditioned(&grid, &zero).unwrap();
    let b = cp.forward_conditioned(&grid, &push).unwrap();
    assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
}

#[test]
fn shape_guards() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = Predictor::new(PredictorConfig::tiny(6, 12, 1, 2).unwrap(), 1).unwrap();
    let cp = attach_action_blocks(base.clone(), 4, &mut rng).unwrap();
    let grid = random_grid(&mut rng, 3, 6);
    assert!(cp.forward_conditioned(&grid, &vec![vec![0.0; 3]; 2]).is_err());
    assert!(cp.forward_conditioned(&grid, &vec![vec![0.0; 4]; 3]).is_err());
    assert!(attach_action_blocks(base, 0, &mut rng).is_err());
    let q = QuerySpec::grid(grid.last_timestamp());
    assert!(cp.predict_direct(&grid, &q, &[0.0; 4]).is_err());
}

#[test]
fn frameskip_grouping_matches_conditioned_width() {
    let acts: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32, 0.5]).collect();
    let g = embed_action_sequence(&acts, 5).unwrap();
    assert_eq!(g.len(), 2);
    assert!(g.iter().all(|v| v.len() == 10));
}

#[test]
fn base_config_adds_about_twenty_two_million() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = Predictor::new(PredictorConfig::base(), 0).unwrap();
    let cp = attach_action_blocks(base, 10, &mut rng).unwrap();
    let added = cp.added_params() as f64;
    assert!((21.0e6..=22.5e6).contains(&added), "{added}");
}

fn toy_clips() -> Vec<ActionClip> {
    let spec = EnvSpec {
        agent_radius: 0.11,
        door_span: 0.3,
        ..EnvSpec::wall()
    };
    let enc = ToyEncoder::new(EncoderSpec {
        patch_size: 16,
        embed_dim: 8,
        seed: 1,
        standardize: true,
    })
    .unwrap();
    let ds = generate_trajectories(&spec, 20, 30, 5).unwrap();
    ds.trajectories
        .iter()
        .map(|t| encode_trajectory(&spec, t, &enc, 5).unwrap())
        .collect()
}

#[test]
fn every_mode_lowers_heldout_loss_and_action_only_freezes_base() {
    let clips = toy_clips();
    let cfg = FinetuneConfig {
        steps: 150,
        batch_size: 8,
        warmup_steps: 10,
        heldout_fraction: 0.2,
        seed: 4,
        ..FinetuneConfig::default()
    };
    let mut trained = None;
    for mode in [FinetuneMode::ActionOnly, FinetuneMode::Full, FinetuneMode::Scratch] {
        let base = Predictor::new(PredictorConfig::tiny(8, 32, 1, 2).unwrap(), 2).unwrap();
        let before = digest(base.params().data());
        let cp = attach_action_blocks(base, 10, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let rep = finetune(cp, &clips, mode, &cfg).unwrap();
        assert_eq!(rep.heldout_trajectories, 4);
        assert!(
            rep.heldout_after < rep.heldout_before,
            "{mode}: {} -> {}",
            rep.heldout_before,
            rep.heldout_after
        );
        let after = digest(rep.model.base().params().data());
        assert_eq!(before == after, mode == FinetuneMode::ActionOnly, "{mode}");
        if mode == FinetuneMode::Full {
            trained = Some(rep.model);
        }
    }

    // a trained model responds to the action it is given
    let model = trained.unwrap();
    let ctx = clips[0].grid.slice(0..2).unwrap();
    let q = QuerySpec::grid(clips[0].grid.timestamps()[2]);
    let right = model.predict_direct(&ctx, &q, &[1.0, 0.0].repeat(5)).unwrap();
    let left = model.predict_direct(&ctx, &q, &[-1.0, 0.0].repeat(5)).unwrap();
    let gap: f32 = right.iter().zip(&left).map(|(a, b)| (a - b).powi(2)).sum();
    assert!(gap > 0.0);
}

#[test]
fn conditioned_checkpoint_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = Predictor::new(PredictorConfig::tiny(6, 12, 1, 2).unwrap(), 1).unwrap();
    let mut cp = attach_action_blocks(base, 4, &mut rng).unwrap();
    cp.action_params_mut().data_mut().iter_mut().for_each(|v| *v += 0.25);
    let bytes = cp.to_checkpoint(7).to_bytes().unwrap();
    let back = ConditionedPredictor::from_checkpoint(&lwm_core::checkpoint::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.action_params().data(), cp.action_params().data());
    assert_eq!(back.base().params().data(), cp.base().params().data());
    assert_eq!(back.action_dim(), 4);
}

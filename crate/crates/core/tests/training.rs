use lwm_core::checkpoint::Checkpoint;
use lwm_core::data::{LatentGrid, SamplerSpec};
use lwm_core::encoder::{EncoderSpec, ToyEncoder};
use lwm_core::env::{generate_with_policy, EnvSpec, Policy};
use lwm_core::predictor::{Predictor, PredictorConfig};
use lwm_core::scenarios::encode_videos;
use lwm_core::training::*;
use lwm_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn videos(n: usize, seed: u64) -> Vec<LatentGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = 12;
            let data = (0..t * 2 * 2 * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let ts = (0..t).map(|k| k as f64 * 0.1).collect();
            LatentGrid::new((t, 2, 2, 4), data, ts).unwrap()
        })
        .collect()
}

fn tiny_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        total_steps: steps,
        warmup_steps: 2,
        base_lr: 3e-3,
        seed: 11,
        sampler: SamplerSpec {
            num_frames: 3,
            delta_min: 0.1,
            delta_max: 0.3,
        },
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn tiny_model() -> Predictor {
    Predictor::new(PredictorConfig::tiny(4, 16, 1, 2).unwrap(), 4).unwrap()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let pool = VideoPool::new(videos(5, 1), tiny_cfg(0).sampler).unwrap();
    let mut full = Trainer::new(tiny_model(), tiny_cfg(10)).unwrap();
    let full_rows = pretrain(&mut full, &pool, &RunOutput::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(tiny_model(), tiny_cfg(4)).unwrap();
    pretrain(&mut first, &pool, &RunOutput::in_dir(dir.path())).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("last.lwmc")).unwrap();
    let mut resumed = Trainer::resume(&ckpt, tiny_cfg(10)).unwrap();
    let rest = pretrain(&mut resumed, &pool, &RunOutput::in_dir(dir.path())).unwrap();

    assert_eq!(rest.len(), 6);
    assert_eq!(&full_rows[4..], &rest[..]);
    assert_eq!(full.model.params().data(), resumed.model.params().data());

    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 11);
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let pool = VideoPool::new(videos(2, 1), tiny_cfg(0).sampler).unwrap();
    let cfg = TrainConfig { warmup_steps: 0, ..tiny_cfg(0) };
    let mut t = Trainer::new(tiny_model(), cfg).unwrap();
    let rows = pretrain(&mut t, &pool, &RunOutput::default()).unwrap();
    assert!(rows.is_empty());
    assert_eq!(t.model.params().data(), tiny_model().params().data());
}

#[test]
fn same_batch_same_weights() {
    let clips = videos(3, 2);
    let run = || {
        let mut t = Trainer::new(tiny_model(), tiny_cfg(2)).unwrap();
        t.step(&clips).unwrap();
        t.step(&clips).unwrap();
        t.model.params().data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trips_and_guards() {
    let p = tiny_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lwmc");
    p.to_checkpoint(0).save(&path).unwrap();
    let back = Predictor::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.params().data(), p.params().data());
    assert_eq!(back.config(), p.config());

    let bytes = std::fs::read(&path).unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());

    let other = PredictorConfig::tiny(4, 16, 2, 2).unwrap();
    let err = Predictor::load_checkpoint(other, &p.to_checkpoint(0)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("blocks.1"), "{msg}");
}

#[test]
fn non_finite_loss_is_reported_with_step() {
    let mut bad = videos(1, 3);
    let mut t = Trainer::new(tiny_model(), tiny_cfg(2)).unwrap();
    t.model.params_mut().data_mut()[0] = f32::INFINITY;
    match t.step(&bad) {
        Err(Error::NonFiniteLoss { step: 0, clip: 0, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    bad.clear();
    assert!(t.step(&bad).is_err());
}

#[test]
fn desk_run_beats_copy_last_on_heldout_clips() {
    let spec = EnvSpec {
        agent_radius: 0.11,
        door_span: 0.3,
        resolution: 32,
        ..EnvSpec::wall()
    };
    let enc = ToyEncoder::new(EncoderSpec {
        patch_size: 8,
        embed_dim: 32,
        seed: 1,
        standardize: true,
    })
    .unwrap();
    let train = encode_videos(&generate_with_policy(&spec, 24, 30, Policy::Bounce, 1).unwrap(), &enc).unwrap();
    let held = encode_videos(&generate_with_policy(&spec, 8, 30, Policy::Bounce, 2).unwrap(), &enc).unwrap();
    let sampler = SamplerSpec {
        num_frames: 4,
        delta_min: 0.04,
        delta_max: 0.12,
    };
    let cfg = TrainConfig {
        batch_size: 8,
        total_steps: 1500,
        warmup_steps: 50,
        weight_decay: 0.0,
        resolution: 32,
        sampler,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let model = Predictor::new(PredictorConfig::desk(), 0).unwrap();
    let mut t = Trainer::new(model, cfg).unwrap();
    pretrain(&mut t, &VideoPool::new(train, sampler).unwrap(), &RunOutput::default()).unwrap();
    let clips = VideoPool::new(held, sampler).unwrap().batch(99, 0, 32).unwrap();
    let ours = evaluate_loss(&t.model, &clips).unwrap();
    let copy = copy_last_loss(&clips).unwrap();
    assert!(ours < copy, "model {ours} vs copy-last {copy}");
}

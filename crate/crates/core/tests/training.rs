mod common;

use common::reduced_tiny;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscaf_core::audio::{generate_synthetic_dataset, load_wav, Split, SynthConfig};
use sscaf_core::autograd::{Adam, AdamConfig};
use sscaf_core::container::Container;
use sscaf_core::features::FeaturePair;
use sscaf_core::model::{DcnnCafConfig, Model, ModelKind, Prediction};
use sscaf_core::training::{
    checkpoint_container, feature_cache_path, history_csv, load_checkpoint, load_clip_features, load_dataset,
    make_batches, mixed_dataset, model_from_container, predict_dataset, prediction_loss, save_checkpoint,
    save_clip_features, train, train_step, CacheOptions, CheckpointInfo, ClipFeatures, Dataset, TrainConfig,
    TrainError, HISTORY_HEADER,
};

/// Random features shaped for `c`, with annoyance tied to mean RMS and label 0 to early loudness.
fn toy_dataset(c: &DcnnCafConfig, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut annoyance = Vec::new();
    for _ in 0..n {
        let gain: f32 = rng.gen_range(0.02..0.3);
        let rms: Vec<f32> = (0..c.n_frames).map(|_| gain * rng.gen_range(0.8..1.2)).collect();
        let mel: Vec<f32> = (0..c.n_frames * c.n_mels).map(|_| rng.gen_range(-8.0..-2.0)).collect();
        let mut l = vec![false; c.n_classes];
        l[0] = gain > 0.15;
        l[c.n_classes - 1] = rng.gen_bool(0.3);
        labels.push(l);
        annoyance.push(2.0 + 20.0 * f64::from(gain));
        features.push(FeaturePair { mel, rms });
    }
    Dataset {
        split: Split::Train,
        clip_ids: (0..n).map(|i| format!("toy_{i}")).collect(),
        features,
        labels,
        annoyance,
        laeq_db: vec![-30.0; n],
    }
}

fn bits(m: &Model<f32>) -> Vec<u32> {
    m.params
        .entries()
        .iter()
        .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn batches_partition_and_reshuffle() {
    let b = make_batches(10, 4, 3, 1);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    let mut all: Vec<usize> = b.concat();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert_eq!(b, make_batches(10, 4, 3, 1));
    assert_ne!(b, make_batches(10, 4, 3, 2));
    assert_ne!(b, make_batches(10, 4, 4, 1));
    assert_eq!(make_batches(3, 8, 0, 1).len(), 1);
}

#[test]
fn one_adam_step_moves_each_weight_at_most_lr() {
    let c = reduced_tiny();
    let data = toy_dataset(&c, 4, 0);
    let mut m = Model::<f64>::build(ModelKind::DcnnCaf, &c, 0).unwrap();
    let before = m.params.clone();
    let lr = 1e-2;
    let mut opt = Adam::new(
        &m.params,
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
    );
    let batch = data.batch::<f64>(&[0, 1, 2, 3], &c).unwrap();
    let loss = train_step(&mut m, &mut opt, &batch, 1.0, 1.0).unwrap();
    assert!(loss.joint.is_finite() && (loss.joint - loss.bce - loss.mse).abs() < 1e-9);
    let mut moved = 0;
    for id in m.params.ids() {
        let e = m.params.entry(id);
        if !e.trainable {
            continue;
        }
        for (a, b) in e.value.data().iter().zip(before.get(id).data()) {
            assert!((a - b).abs() <= lr * (1.0 + 1e-6), "{}", e.name);
            moved += usize::from(a != b);
        }
    }
    assert!(moved > 0);
}

#[test]
fn training_history_is_bitwise_repeatable() {
    let c = reduced_tiny();
    let data = toy_dataset(&c, 12, 1);
    let val = toy_dataset(&c, 6, 2);
    let cfg = TrainConfig {
        batch_size: 4,
        lr: 3e-3,
        epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Model::<f32>::build(ModelKind::DcnnCaf, &c, 5).unwrap();
        let o = train(&mut m, &data, Some(&val), &cfg, |_| {}).unwrap();
        (history_csv(&o.history), bits(&m), bits(&o.best), o.best_epoch)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let csv = a.0;
    assert_eq!(csv.lines().next().unwrap(), HISTORY_HEADER);
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn best_epoch_has_the_lowest_selection_score() {
    let c = reduced_tiny();
    let data = toy_dataset(&c, 12, 3);
    let val = toy_dataset(&c, 8, 4);
    let cfg = TrainConfig {
        batch_size: 4,
        lr: 1e-2,
        epochs: 4,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut m = Model::<f32>::build(ModelKind::DcnnCaf, &c, 0).unwrap();
    let mut seen = 0;
    let o = train(&mut m, &data, Some(&val), &cfg, |_| seen += 1).unwrap();
    assert_eq!(seen, 4);
    let scores: Vec<f64> = o
        .history
        .iter()
        .map(|r| r.val.as_ref().unwrap().selection_score())
        .collect();
    let best = o.best_metrics().unwrap().selection_score();
    assert!(scores.iter().all(|&s| best <= s));
    assert_eq!(scores.iter().position(|&s| s == best).unwrap() + 1, o.best_epoch);
    // the retained model reproduces its recorded validation loss
    let preds = predict_dataset(&o.best, &val, 32).unwrap();
    let recorded = o.history[o.best_epoch - 1].val_loss.unwrap();
    assert!((prediction_loss(&preds, &val, 1.0, 1.0) - recorded).abs() < 1e-12);
}

#[test]
fn prediction_loss_matches_hand_computation() {
    let mut d = toy_dataset(
        &DcnnCafConfig {
            n_classes: 2,
            ..reduced_tiny()
        },
        2,
        0,
    );
    d.labels = vec![vec![true, false], vec![false, false]];
    d.annoyance = vec![3.0, 5.0];
    let preds = vec![
        Prediction {
            source_probs: vec![0.8, 0.1],
            annoyance: 4.0,
            attention_maps: None,
        },
        Prediction {
            source_probs: vec![0.5, 0.0],
            annoyance: 5.0,
            attention_maps: None,
        },
    ];
    let bce = -(0.8f64.ln() + 0.9f64.ln() + 0.5f64.ln() + (1.0f64 - 1e-7).ln()) / 4.0;
    let got = prediction_loss(&preds, &d, 1.0, 2.0);
    assert!((got - (bce + 2.0 * 0.5)).abs() < 1e-6, "{got}");
}

#[test]
fn non_finite_features_abort_with_location() {
    let c = reduced_tiny();
    let mut data = toy_dataset(&c, 8, 5);
    let bad = 6;
    data.features[bad].mel[3] = f32::NAN;
    let cfg = TrainConfig {
        batch_size: 3,
        lr: 1e-3,
        epochs: 2,
        seed: 2,
        ..TrainConfig::default()
    };
    let expected = make_batches(8, 3, 2, 1).iter().position(|b| b.contains(&bad)).unwrap() + 1;
    let mut m = Model::<f32>::build(ModelKind::DcnnCaf, &c, 0).unwrap();
    match train(&mut m, &data, None, &cfg, |_| {}) {
        Err(TrainError::NonFinite { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, expected)),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.best_epoch)),
    }
}

#[test]
fn invalid_train_configs_are_rejected() {
    let c = reduced_tiny();
    let data = toy_dataset(&c, 2, 0);
    let mut m = Model::<f32>::build(ModelKind::DcnnCaf, &c, 0).unwrap();
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: f64::NAN,
            ..TrainConfig::default()
        },
        TrainConfig {
            w_arp: -1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(
            train(&mut m, &data, None, &cfg, |_| {}),
            Err(TrainError::Config(_))
        ));
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let c = DcnnCafConfig::tiny();
    for kind in ModelKind::ALL {
        let m = Model::<f32>::build(kind, &c, 11).unwrap();
        let path = dir.path().join(format!("{kind}.ckpt"));
        save_checkpoint(&m, &CheckpointInfo::new(7, None), &path).unwrap();
        let (back, info) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(info.epoch, 7);
        assert_eq!(back.kind(), kind);
        assert_eq!(bits(&back), bits(&m), "{kind}");
        let stored = Container::load(&path).unwrap();
        assert_eq!(stored.tensors.len(), m.params.len());
        assert_eq!(stored.meta["tensor_count"], m.params.len().to_string());
    }
}

#[test]
fn checkpoint_preserves_inference_outputs() {
    let c = reduced_tiny();
    let data = toy_dataset(&c, 5, 6);
    let mut m = Model::<f32>::build(ModelKind::DcnnCaf, &c, 2).unwrap();
    let cfg = TrainConfig {
        batch_size: 5,
        lr: 1e-2,
        epochs: 2,
        ..TrainConfig::default()
    };
    train(&mut m, &data, None, &cfg, |_| {}).unwrap();
    let (back, _) = model_from_container::<f32>(&checkpoint_container(&m, &CheckpointInfo::new(2, None))).unwrap();
    assert_eq!(
        predict_dataset(&m, &data, 2).unwrap(),
        predict_dataset(&back, &data, 2).unwrap()
    );
}

#[test]
fn damaged_checkpoints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::<f32>::build(ModelKind::MelOnly, &reduced_tiny(), 0).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &CheckpointInfo::new(1, None), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    for len in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&cut, &bytes[..len]).unwrap();
        assert!(load_checkpoint::<f32>(&cut).is_err(), "truncated to {len}");
    }

    let good = checkpoint_container(&m, &CheckpointInfo::new(1, None));
    let mut fewer = good.clone();
    fewer.tensors.pop();
    assert!(model_from_container::<f32>(&fewer).is_err());
    let mut reshaped = good.clone();
    let t = &mut reshaped.tensors[0];
    t.shape = vec![t.data.len()];
    assert!(model_from_container::<f32>(&reshaped).is_err());
    let mut ledger = good.clone();
    let key = ledger.meta.keys().find(|k| k.starts_with("ledger.")).unwrap().clone();
    ledger.insert_meta(key, "1,2,3");
    assert!(model_from_container::<f32>(&ledger).is_err());
    let mut kind = good;
    kind.insert_meta("model_kind", "rms-only");
    assert!(model_from_container::<f32>(&kind).is_err());
}

#[test]
fn f64_models_checkpoint_at_single_precision() {
    let m = Model::<f64>::build(ModelKind::RmsOnly, &reduced_tiny(), 3).unwrap();
    let (back, _) = model_from_container::<f64>(&checkpoint_container(&m, &CheckpointInfo::new(1, None))).unwrap();
    for (a, b) in m.params.entries().iter().zip(back.params.entries()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(*y, f64::from(*x as f32));
        }
    }
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        clip_seconds: 2.0,
        clips_train: 3,
        clips_val: 1,
        clips_test: 2,
        event_min_s: 0.5,
        event_max_s: 1.5,
        noise_clips_per_source: 1,
        ..SynthConfig::default()
    }
}

#[test]
fn feature_cache_round_trip_and_reuse() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate_synthetic_dataset(&small_synth(), 3, dir.path()).unwrap();
    let cache = dir.path().join("cache");
    let write = CacheOptions {
        read: None,
        write: Some(&cache),
        recompute: true,
    };
    let fresh = load_dataset(&out.train, write).unwrap();
    let id = &fresh.clip_ids[0];
    let cached = load_clip_features(id, &feature_cache_path(&cache, id)).unwrap();
    assert_eq!(cached.features, fresh.features[0]);
    assert_eq!(cached.laeq_db, fresh.laeq_db[0]);
    assert!(load_clip_features("someone_else", &feature_cache_path(&cache, id)).is_err());

    // a doctored cache entry is what gets read back
    let mut doctored = cached.clone();
    doctored.features.rms[0] = 9.0;
    save_clip_features(&doctored, id, &feature_cache_path(&cache, id)).unwrap();
    let read = CacheOptions {
        read: Some(&cache),
        write: None,
        recompute: false,
    };
    assert_eq!(load_dataset(&out.train, read).unwrap().features[0].rms[0], 9.0);
    let recompute = CacheOptions {
        read: Some(&cache),
        write: None,
        recompute: true,
    };
    assert_eq!(load_dataset(&out.train, recompute).unwrap().features, fresh.features);

    let ClipFeatures { features, .. } = cached;
    assert_eq!(features.rms.len(), sscaf_core::features::N_FRAMES);
}

#[test]
fn missing_audio_names_the_clip() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate_synthetic_dataset(&small_synth(), 4, dir.path()).unwrap();
    let victim = &out.test.records[1];
    std::fs::remove_file(out.test.audio_path(victim)).unwrap();
    let err = load_dataset(&out.test, CacheOptions::NONE).unwrap_err().to_string();
    assert!(err.contains(&victim.clip_id), "{err}");
}

#[test]
fn infinite_snr_mix_leaves_features_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    // noise segments are five seconds long
    let config = SynthConfig {
        clip_seconds: 6.0,
        ..small_synth()
    };
    let out = generate_synthetic_dataset(&config, 5, dir.path()).unwrap();
    let pool: Vec<_> = out.noise["engine"].iter().map(|p| load_wav(p).unwrap()).collect();
    let clean = load_dataset(&out.test, CacheOptions::NONE).unwrap();
    let mixed = mixed_dataset(&out.test, &pool, f64::INFINITY, 1).unwrap();
    assert_eq!(mixed.features, clean.features);
    assert_eq!(mixed.annoyance, clean.annoyance);
    let loud = mixed_dataset(&out.test, &pool, 0.0, 1).unwrap();
    assert_ne!(loud.features, clean.features);
    assert_eq!(loud.labels, clean.labels);
    assert_eq!(mixed_dataset(&out.test, &pool, 0.0, 1).unwrap().features, loud.features);
}

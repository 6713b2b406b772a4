#![allow(dead_code)]

pub mod ops;
pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscaf_core::autograd::{grad_check, GradCheckOptions, GradCheckReport, Tensor};
use sscaf_core::model::{DcnnCafConfig, Mode, Model, ModelInput, ModelKind};
use sscaf_core::Scalar;

/// Log-mel-like values around -5 and RMS values in (0, 0.3).
pub fn random_input<T: Scalar>(c: &DcnnCafConfig, batch: usize, seed: u64) -> ModelInput<T> {
    input_in_range(c, batch, seed, -8.0..-2.0)
}

fn input_in_range<T: Scalar>(
    c: &DcnnCafConfig,
    batch: usize,
    seed: u64,
    mel_range: std::ops::Range<f64>,
) -> ModelInput<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mel: Vec<f64> = (0..batch * c.n_frames * c.n_mels)
        .map(|_| rng.gen_range(mel_range.clone()))
        .collect();
    let rms: Vec<f64> = (0..batch * c.n_frames).map(|_| rng.gen_range(0.01..0.3)).collect();
    ModelInput {
        mel: Tensor::from_f64(&[batch, 1, c.n_frames, c.n_mels], &mel).unwrap(),
        rms: Tensor::from_f64(&[batch, 1, c.n_frames, 1], &rms).unwrap(),
    }
}

pub fn random_targets<T: Scalar>(c: &DcnnCafConfig, batch: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let ys: Vec<f64> = (0..batch * c.n_classes)
        .map(|_| f64::from(u8::from(rng.gen_bool(0.2))))
        .collect();
    // near the initial output so the loss, and with it the finite-difference roundoff, stays small
    let ya: Vec<f64> = (0..batch).map(|_| rng.gen_range(5.0..6.0)).collect();
    (
        Tensor::from_f64(&[batch, c.n_classes], &ys).unwrap(),
        Tensor::from_f64(&[batch], &ya).unwrap(),
    )
}

/// Joint-loss gradient check of a freshly built model in training mode.
pub fn model_grad_check(
    kind: ModelKind,
    c: &DcnnCafConfig,
    seed: u64,
    batch: usize,
    max_per_param: Option<usize>,
) -> GradCheckReport {
    let mut model = Model::<f64>::build(kind, c, seed).unwrap();
    // zero biases put units exactly on the ReLU kink when an input is one-signed
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for id in model.params.ids().collect::<Vec<_>>() {
        let e = model.params.entry(id);
        if e.trainable && (e.name.ends_with(".bias") || e.name.ends_with(".beta")) {
            for v in model.params.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }
    // unit-scale input keeps the un-normalized baselines out of sigmoid saturation
    let input = input_in_range::<f64>(c, batch, seed, -1.0..1.0);
    let (ys, ya) = random_targets::<f64>(c, batch, seed);
    let arch = model.arch.clone();
    grad_check(
        &mut model.params,
        |tape, store| {
            let out = arch.forward(tape, store, &input, Mode::Train).map_err(|e| match e {
                sscaf_core::model::ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let bce = tape.bce_loss(out.probs, &ys)?;
            let mse = tape.mse_loss(out.annoyance, &ya)?;
            tape.joint_loss(bce, mse, 1.0, 1.0)
        },
        &GradCheckOptions {
            max_per_param,
            seed,
            ..GradCheckOptions::default()
        },
    )
    .unwrap()
}

/// Tiny widths on a short, narrow input so that every coordinate can be checked.
pub fn reduced_tiny() -> DcnnCafConfig {
    DcnnCafConfig {
        n_frames: 48,
        n_mels: 8,
        ..DcnnCafConfig::tiny()
    }
}

mod common;

use common::{model_grad_check, random_input, reduced_tiny};
use proptest::prelude::*;
use sscaf_core::autograd::{MhaWeights, Tape, Tensor};
use sscaf_core::model::{cross_attention, shape_ledger, DcnnCafConfig, Mode, Model, ModelKind};

fn ledger_entry(kind: ModelKind, c: &DcnnCafConfig, name: &str) -> Vec<usize> {
    shape_ledger(kind, c).into_iter().find(|(n, _)| n == name).unwrap().1
}

#[test]
fn ledger_matches_configured_widths() {
    let d = DcnnCafConfig::default();
    assert_eq!(ledger_entry(ModelKind::DcnnCaf, &d, "r_mel"), vec![30, 512]);
    assert_eq!(ledger_entry(ModelKind::DcnnCaf, &d, "r_rms"), vec![30, 512]);
    assert_eq!(ledger_entry(ModelKind::DcnnCaf, &d, "mha1.attention"), vec![8, 30, 30]);
    assert_eq!(ledger_entry(ModelKind::DcnnCaf, &d, "mel.block1"), vec![64, 240, 64]);
    assert_eq!(ledger_entry(ModelKind::DcnnCaf, &d, "rms.block4"), vec![512, 30, 1]);
    assert_eq!(d.dnn_widths, vec![64, 128, 256, 512]);
    assert_eq!(d.cnn_filters, vec![32, 64]);
    assert!(shape_ledger(ModelKind::MelOnly, &d)
        .iter()
        .all(|(n, _)| !n.starts_with("rms") && !n.starts_with("mha")));
}

#[test]
fn tiny_forward_shapes() {
    let c = DcnnCafConfig::tiny();
    let m = Model::<f32>::build(ModelKind::DcnnCaf, &c, 0).unwrap();
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, &random_input(&c, 2, 1), Mode::Infer).unwrap();
    assert_eq!(tape.shape(out.r_mel.unwrap()), &[2, 30, 32]);
    assert_eq!(tape.shape(out.r_rms.unwrap()), &[2, 30, 32]);
    assert_eq!(tape.shape(out.attention[0]), &[2, 8, 30, 30]);
    assert_eq!(tape.shape(out.probs), &[2, 24]);
    assert_eq!(tape.shape(out.annoyance), &[2]);
}

#[test]
fn build_is_deterministic_in_seed() {
    let c = reduced_tiny();
    for kind in ModelKind::ALL {
        let a = Model::<f64>::build(kind, &c, 4).unwrap();
        let b = Model::<f64>::build(kind, &c, 4).unwrap();
        let other = Model::<f64>::build(kind, &c, 5).unwrap();
        let bits = |m: &Model<f64>| -> Vec<u64> {
            m.params
                .entries()
                .iter()
                .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b), "{kind}");
        assert_ne!(bits(&a), bits(&other), "{kind}");
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let c = reduced_tiny();
    let m = Model::<f64>::build(ModelKind::DcnnCaf, &c, 0).unwrap();
    let wide = DcnnCafConfig {
        n_mels: 16,
        ..c.clone()
    };
    let mut tape = Tape::new();
    assert!(m.forward(&mut tape, &random_input(&wide, 1, 0), Mode::Infer).is_err());
}

fn random_mha(d: usize, seed: u64) -> (Vec<Tensor<f64>>, u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ws = (0..4)
        .map(|_| Tensor::new(&[d, d], (0..d * d).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap())
        .collect();
    (ws, seed)
}

#[test]
fn swapping_fusion_inputs_swaps_roles() {
    let (d, t, h) = (8, 5, 2);
    let x = Tensor::new(
        &[1, t, d],
        (0..t * d).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect(),
    )
    .unwrap();
    let y = Tensor::new(
        &[1, t, d],
        (0..t * d).map(|i| ((i * 5 % 13) as f64 - 6.0) / 5.0).collect(),
    )
    .unwrap();
    let (w1, _) = random_mha(d, 1);
    let (w2, _) = random_mha(d, 2);
    let run = |a: &Tensor<f64>, b: &Tensor<f64>, first: &[Tensor<f64>], second: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone(), false);
        let vb = tape.leaf(b.clone(), false);
        let mk = |tape: &mut Tape<f64>, w: &[Tensor<f64>]| MhaWeights {
            w_q: tape.leaf(w[0].clone(), false),
            w_k: tape.leaf(w[1].clone(), false),
            w_v: tape.leaf(w[2].clone(), false),
            w_o: tape.leaf(w[3].clone(), false),
        };
        let m1 = mk(&mut tape, first);
        let m2 = mk(&mut tape, second);
        let f = cross_attention(&mut tape, va, vb, &m1, &m2, h).unwrap();
        (tape.value(f.out1).clone(), tape.value(f.out2).clone())
    };
    let (o1, o2) = run(&x, &y, &w1, &w2);
    let (s1, s2) = run(&y, &x, &w2, &w1);
    assert_eq!(o1, s2);
    assert_eq!(o2, s1);
    // identical inputs: both blocks are self-attention, differing only by weights
    let (a1, a2) = run(&x, &x, &w1, &w1);
    assert_eq!(a1, a2);
}

#[test]
fn zeroed_output_layers_give_neutral_predictions() {
    let c = reduced_tiny();
    let mut m = Model::<f64>::build(ModelKind::DcnnCaf, &c, 3).unwrap();
    for name in ["ssc.classifier.weight", "ssc.classifier.bias", "arp.weight", "arp.bias"] {
        let id = m.params.id(name).unwrap();
        let shape = m.params.get(id).shape().to_vec();
        m.params.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, &random_input(&c, 3, 9), Mode::Infer).unwrap();
    assert!(tape.value(out.probs).data().iter().all(|&p| p == 0.5));
    assert!(tape.value(out.annoyance).data().iter().all(|&a| a == 0.0));
}

#[test]
fn inference_is_bitwise_repeatable() {
    let c = reduced_tiny();
    for kind in ModelKind::ALL {
        let m = Model::<f32>::build(kind, &c, 1).unwrap();
        let input = random_input::<f32>(&c, 2, 2);
        let run = || {
            let mut tape = Tape::new();
            let o = m.forward(&mut tape, &input, Mode::Infer).unwrap();
            (tape.value(o.probs).clone(), tape.value(o.annoyance).clone())
        };
        assert_eq!(run(), run(), "{kind}");
    }
}

#[test]
fn ablations_are_smaller() {
    let c = DcnnCafConfig::tiny();
    let full = Model::<f32>::build(ModelKind::DcnnCaf, &c, 0).unwrap();
    let mel = Model::<f32>::build(ModelKind::MelOnly, &c, 0).unwrap();
    let rms = Model::<f32>::build(ModelKind::RmsOnly, &c, 0).unwrap();
    assert!(mel.param_count() < full.param_count());
    assert!(rms.param_count() < full.param_count());
    assert_eq!(mel.ssc_branch_param_count(), full.ssc_branch_param_count());
}

#[test]
fn rms_only_ignores_mel_and_flattens_constant_input() {
    let c = DcnnCafConfig::tiny();
    let m = Model::<f64>::build(ModelKind::RmsOnly, &c, 2).unwrap();
    let mut a = random_input::<f64>(&c, 1, 0);
    a.rms = Tensor::full(&[1, 1, c.n_frames, 1], 0.1);
    let mut b = random_input::<f64>(&c, 1, 1);
    b.rms = a.rms.clone();
    let mut tape = Tape::new();
    let oa = m.forward(&mut tape, &a, Mode::Infer).unwrap();
    let ob = m.forward(&mut tape, &b, Mode::Infer).unwrap();
    assert_eq!(tape.value(oa.probs), tape.value(ob.probs));
    let r = tape.value(oa.r_rms.unwrap()).data();
    // away from the zero-padded ends every time step sees the same input
    let d = c.d_model;
    for t in 8..22 {
        for k in 0..d {
            assert!((r[t * d + k] - r[8 * d + k]).abs() < 1e-12);
        }
    }
}

#[test]
fn ablation_gradients_match_finite_differences() {
    for kind in [ModelKind::MelOnly, ModelKind::RmsOnly] {
        let r = model_grad_check(kind, &reduced_tiny(), 0, 2, None);
        assert!(r.max_rel_error < 1e-4, "{kind}: {r:?}");
        assert!(r.skipped_kinks * 50 < r.checked, "{kind}: {r:?}");
    }
}

#[test]
fn baseline_gradients_match_finite_differences() {
    let c = DcnnCafConfig {
        dnn_widths: vec![4, 8],
        cnn_filters: vec![2, 4],
        encoder_ff: 8,
        ..reduced_tiny()
    };
    for kind in [ModelKind::Dnn, ModelKind::Cnn, ModelKind::CnnTransformer] {
        let r = model_grad_check(kind, &c, 1, 2, None);
        assert!(r.max_rel_error < 1e-4, "{kind}: {r:?}");
        assert!(r.skipped_kinks * 50 < r.checked, "{kind}: {r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn probabilities_strictly_inside_unit_interval(seed in any::<u64>()) {
        let c = reduced_tiny();
        let m = Model::<f64>::build(ModelKind::DcnnCaf, &c, seed).unwrap();
        let mut tape = Tape::new();
        let o = m.forward(&mut tape, &random_input(&c, 2, seed), Mode::Train).unwrap();
        for &p in tape.value(o.probs).data() {
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }
}

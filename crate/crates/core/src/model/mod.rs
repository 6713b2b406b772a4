//! DCNN-CaF, its single-branch ablations and the DNN / CNN / CNN-Transformer
//! baselines, built on the autograd tape.

mod config;
mod net;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{DcnnCafConfig, ModelKind};
pub use net::{cross_attention, FuseOutput, ARP_BIAS_INIT};

use crate::autograd::{BnStats, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use crate::features::FeaturePair;
use crate::Scalar;
use net::{Fwd, Init, Net};

/// Momentum of batch-norm running statistics (weight of the old value).
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model input: {0}")]
    Input(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running-statistic updates are returned.
    Train,
    /// Running statistics in batch norm.
    Infer,
}

/// Batch statistics to fold into one batch norm's running buffers.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BnStats<T>,
}

/// A batch of model inputs: `mel` is `[B, 1, n_frames, n_mels]`, `rms` is `[B, 1, n_frames, 1]`.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    pub mel: Tensor<T>,
    pub rms: Tensor<T>,
}

impl<T: Scalar> ModelInput<T> {
    pub fn from_features(features: &[&FeaturePair], config: &DcnnCafConfig) -> Result<Self, ModelError> {
        if features.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let (t, f) = (config.n_frames, config.n_mels);
        let mut mel = Vec::with_capacity(features.len() * t * f);
        let mut rms = Vec::with_capacity(features.len() * t);
        for fp in features {
            if fp.mel.len() != t * f || fp.rms.len() != t {
                return Err(ModelError::Input(format!(
                    "features {}x{} / {}, expected {t}x{f} / {t}",
                    fp.rms.len(),
                    fp.mel.len() / fp.rms.len().max(1),
                    fp.rms.len()
                )));
            }
            mel.extend(fp.mel.iter().map(|&v| T::lit(v as f64)));
            rms.extend(fp.rms.iter().map(|&v| T::lit(v as f64)));
        }
        let b = features.len();
        Ok(Self {
            mel: Tensor::new(&[b, 1, t, f], mel)?,
            rms: Tensor::new(&[b, 1, t, 1], rms)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.mel.shape()[0]
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `[B, n_classes]` sigmoid probabilities.
    pub probs: Var,
    /// `[B]` raw annoyance.
    pub annoyance: Var,
    /// `[B, T', d_model]` branch representations, when the kind has them.
    pub r_mel: Option<Var>,
    pub r_rms: Option<Var>,
    /// MHA1 then MHA2 attention, each `[B, heads, T', T']` (DCNN-CaF only).
    pub attention: Vec<Var>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Per-clip model output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub source_probs: Vec<f64>,
    /// Unclamped regression output.
    pub annoyance: f64,
    /// `[2][heads][T'][T']` flattened per block when requested.
    pub attention_maps: Option<Vec<Vec<f64>>>,
}

impl Prediction {
    /// Annoyance clamped to the rating scale.
    pub fn reported_annoyance(&self) -> f64 {
        self.annoyance.clamp(1.0, 10.0)
    }
}

/// Parameter layout of a model, independent of the scalar type.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub kind: ModelKind,
    pub config: DcnnCafConfig,
    net: Net,
}

/// Expected per-sample shapes along the forward pass.
pub fn shape_ledger(kind: ModelKind, c: &DcnnCafConfig) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    let t_out = c.out_frames();
    match kind {
        ModelKind::DcnnCaf | ModelKind::MelOnly | ModelKind::RmsOnly => {
            for (branch, width) in [("mel", c.n_mels), ("rms", 1)] {
                if (branch == "mel" && !kind.uses_mel()) || (branch == "rms" && !kind.uses_rms()) {
                    continue;
                }
                v.push((format!("{branch}.input"), vec![1, c.n_frames, width]));
                for (i, &f) in c.conv_filters.iter().enumerate() {
                    v.push((
                        format!("{branch}.block{}", i + 1),
                        vec![f, c.n_frames >> (i + 1), width],
                    ));
                }
                v.push((format!("r_{branch}"), vec![t_out, c.d_model]));
            }
            if kind == ModelKind::DcnnCaf {
                v.push(("mha1.attention".into(), vec![c.heads, t_out, t_out]));
                v.push(("mha2.attention".into(), vec![c.heads, t_out, t_out]));
                v.push(("fusion".into(), vec![t_out, c.fusion_dim]));
            }
            v.push(("ssc.embedding".into(), vec![c.embedding_dim]));
        }
        ModelKind::Dnn => {
            let w = *c.dnn_widths.last().expect("validated");
            v.push(("mel.frames".into(), vec![c.n_frames, w]));
            v.push(("rms.frames".into(), vec![c.n_frames, w]));
        }
        ModelKind::Cnn | ModelKind::CnnTransformer => {
            let d = *c.cnn_filters.last().expect("validated");
            let t = c.n_frames >> c.cnn_filters.len();
            v.push(("mel.sequence".into(), vec![t, d]));
            v.push(("rms.sequence".into(), vec![t, d]));
        }
    }
    v.push(("probs".into(), vec![c.n_classes]));
    v.push(("annoyance".into(), vec![]));
    v
}

fn expect_shape<T: Scalar>(tape: &Tape<T>, v: Var, batch: usize, want: &[usize], what: &str) -> Result<(), ModelError> {
    let got = tape.shape(v);
    if got.len() != want.len() + 1 || got[0] != batch || got[1..] != *want {
        return Err(ModelError::Tensor(TensorError::Shape {
            op: "shape_ledger",
            detail: format!("{what}: got {got:?}, expected [{batch}, {want:?}]"),
        }));
    }
    Ok(())
}

impl Architecture {
    pub fn ledger(&self) -> Vec<(String, Vec<usize>)> {
        shape_ledger(self.kind, &self.config)
    }

    fn ledger_shape(&self, name: &str) -> Vec<usize> {
        self.ledger()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .expect("ledger entry")
    }

    /// Records a forward pass of `input` reading parameters from `store`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &ModelInput<T>,
        mode: Mode,
    ) -> Result<ForwardOutput<T>, ModelError> {
        let c = &self.config;
        let b = input.batch();
        if input.mel.shape() != [b, 1, c.n_frames, c.n_mels] || input.rms.shape() != [b, 1, c.n_frames, 1] {
            return Err(ModelError::Input(format!(
                "mel {:?} / rms {:?} for a {}x{} model",
                input.mel.shape(),
                input.rms.shape(),
                c.n_frames,
                c.n_mels
            )));
        }
        let mut f = Fwd {
            tape,
            store,
            mode,
            bn_updates: Vec::new(),
        };
        let mel_in = f.tape.leaf(input.mel.clone(), false);
        let rms_in = f.tape.leaf(input.rms.clone(), false);
        let mut out = match &self.net {
            Net::Caf {
                mel,
                rms,
                cross,
                arp,
                embedding,
                classifier,
            } => {
                let seq = |f: &mut Fwd<'_, T>,
                           x: Var,
                           blocks: &Option<Vec<_>>,
                           name: &str|
                 -> Result<Option<Var>, ModelError> {
                    let Some(blocks) = blocks else { return Ok(None) };
                    let y = f.branch(x, blocks)?;
                    let r = f.sequence(y)?;
                    expect_shape(f.tape, r, b, &self.ledger_shape(name), name)?;
                    Ok(Some(r))
                };
                let r_mel = seq(&mut f, mel_in, mel, "r_mel")?;
                let r_rms = seq(&mut f, rms_in, rms, "r_rms")?;
                let primary = r_mel.or(r_rms).expect("at least one branch");
                let pooled = f.tape.mean_axis(primary, 1)?;
                let probs = f.ssc_head(pooled, embedding, classifier)?;
                let mut attention = Vec::new();
                let arp_in = match (cross, r_mel, r_rms) {
                    (Some((m1, m2, fusion)), Some(rm), Some(rr)) => {
                        let w1 = f.mha_weights(m1);
                        let w2 = f.mha_weights(m2);
                        let fused = cross_attention(f.tape, rm, rr, &w1, &w2, c.heads)?;
                        expect_shape(
                            f.tape,
                            fused.attention1,
                            b,
                            &self.ledger_shape("mha1.attention"),
                            "mha1",
                        )?;
                        expect_shape(
                            f.tape,
                            fused.attention2,
                            b,
                            &self.ledger_shape("mha2.attention"),
                            "mha2",
                        )?;
                        attention = vec![fused.attention1, fused.attention2];
                        let cat = f.tape.concat(&[fused.out1, fused.out2], 2)?;
                        let h = f.dense(cat, fusion)?;
                        let h = f.tape.relu(h)?;
                        f.tape.mean_axis(h, 1)?
                    }
                    _ => pooled,
                };
                let annoyance = f.arp_head(arp_in, arp)?;
                ForwardOutput {
                    probs,
                    annoyance,
                    r_mel,
                    r_rms,
                    attention,
                    bn_updates: Vec::new(),
                }
            }
            Net::Dnn { mel, rms, ssc, arp } => {
                let xm = f.tape.reshape(mel_in, &[b, c.n_frames, c.n_mels])?;
                let xr = f.tape.reshape(rms_in, &[b, c.n_frames, 1])?;
                let hm = f.mlp(xm, mel)?;
                let hr = f.mlp(xr, rms)?;
                let pm = f.tape.mean_axis(hm, 1)?;
                let pr = f.tape.mean_axis(hr, 1)?;
                let cat = f.tape.concat(&[pm, pr], 1)?;
                self.baseline_heads(&mut f, cat, ssc, arp)?
            }
            Net::Cnn {
                mel,
                rms,
                encoders,
                ssc,
                arp,
            } => {
                let mut pooled = Vec::new();
                for (i, (x, blocks)) in [(mel_in, mel), (rms_in, rms)].into_iter().enumerate() {
                    let y = f.branch(x, blocks)?;
                    let mut s = f.sequence(y)?;
                    if let Some(enc) = encoders {
                        let e = if i == 0 { &enc.0 } else { &enc.1 };
                        s = f.encoder(s, e, c.encoder_heads)?;
                    }
                    pooled.push(f.tape.mean_axis(s, 1)?);
                }
                let cat = f.tape.concat(&pooled, 1)?;
                self.baseline_heads(&mut f, cat, ssc, arp)?
            }
        };
        expect_shape(f.tape, out.probs, b, &[c.n_classes], "probs")?;
        expect_shape(f.tape, out.annoyance, b, &[], "annoyance")?;
        out.bn_updates = f.bn_updates;
        Ok(out)
    }

    fn baseline_heads<T: Scalar>(
        &self,
        f: &mut Fwd<'_, T>,
        cat: Var,
        ssc: &net::Dense,
        arp: &net::Dense,
    ) -> Result<ForwardOutput<T>, ModelError> {
        let logits = f.dense(cat, ssc)?;
        let probs = f.tape.sigmoid(logits)?;
        let annoyance = f.arp_head(cat, arp)?;
        Ok(ForwardOutput {
            probs,
            annoyance,
            r_mel: None,
            r_rms: None,
            attention: Vec::new(),
            bn_updates: Vec::new(),
        })
    }
}

/// An architecture together with its parameters and buffers.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Kaiming-uniform weights, zero biases (the annoyance output starts at
    /// [`ARP_BIAS_INIT`]), unit BN scale and zero shift; deterministic in `seed`.
    pub fn build(kind: ModelKind, config: &DcnnCafConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
        .build(kind, config);
        Ok(Self {
            arch: Architecture {
                kind,
                config: config.clone(),
                net,
            },
            params,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind
    }

    pub fn config(&self) -> &DcnnCafConfig {
        &self.arch.config
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: &ModelInput<T>,
        mode: Mode,
    ) -> Result<ForwardOutput<T>, ModelError> {
        self.arch.forward(tape, &self.params, input, mode)
    }

    /// `running = m·running + (1 − m)·batch` with `m = BN_MOMENTUM`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::lit(BN_MOMENTUM);
        let one_m = T::one() - m;
        for u in updates {
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let run = self.params.get_mut(id);
                for (r, &v) in run.data_mut().iter_mut().zip(batch.data()) {
                    *r = m * *r + one_m * v;
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Trainable weights on the SSC path of DCNN-CaF or an ablation: the
    /// branch feeding the classifier plus the embedding and classifier layers.
    pub fn ssc_branch_param_count(&self) -> usize {
        let branch = if self.kind().uses_mel() { "mel." } else { "rms." };
        self.params
            .entries()
            .iter()
            .filter(|e| e.trainable && (e.name.starts_with(branch) || e.name.starts_with("ssc.")))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Inference-mode predictions, `chunk` clips per forward pass.
    pub fn predict(
        &self,
        features: &[&FeaturePair],
        with_attention: bool,
        chunk: usize,
    ) -> Result<Vec<Prediction>, ModelError> {
        let mut out = Vec::with_capacity(features.len());
        for part in features.chunks(chunk.max(1)) {
            let input = ModelInput::from_features(part, self.config())?;
            let mut tape = Tape::new();
            let fo = self.forward(&mut tape, &input, Mode::Infer)?;
            let nc = self.config().n_classes;
            let probs = tape.value(fo.probs).to_f64_vec();
            let ann = tape.value(fo.annoyance).to_f64_vec();
            let maps: Vec<Vec<f64>> = fo.attention.iter().map(|&a| tape.value(a).to_f64_vec()).collect();
            for i in 0..part.len() {
                let attention_maps = (with_attention && !maps.is_empty()).then(|| {
                    maps.iter()
                        .map(|m| {
                            let per = m.len() / part.len();
                            m[i * per..(i + 1) * per].to_vec()
                        })
                        .collect()
                });
                out.push(Prediction {
                    source_probs: probs[i * nc..(i + 1) * nc].to_vec(),
                    annoyance: ann[i],
                    attention_maps,
                });
            }
        }
        Ok(out)
    }
}

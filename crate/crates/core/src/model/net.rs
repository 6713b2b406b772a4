//! Parameter layout and forward wiring for every model kind.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BnUpdate, DcnnCafConfig, Mode, ModelError, ModelKind};
use crate::autograd::{mha, BnMode, MhaOutput, MhaWeights, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Scalar;

/// Initial bias of the annoyance output: the midpoint of the 1..10 scale.
pub const ARP_BIAS_INIT: f64 = 5.5;

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvUnit {
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvBlock {
    pub units: Vec<ConvUnit>,
    pub pool: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct MhaIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    pub attn: MhaIds,
    pub ln1: (ParamId, ParamId),
    pub ff1: Dense,
    pub ff2: Dense,
    pub ln2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub(crate) enum Net {
    Caf {
        mel: Option<Vec<ConvBlock>>,
        rms: Option<Vec<ConvBlock>>,
        cross: Option<(MhaIds, MhaIds, Dense)>,
        arp: Dense,
        embedding: Dense,
        classifier: Dense,
    },
    Dnn {
        mel: Vec<Dense>,
        rms: Vec<Dense>,
        ssc: Dense,
        arp: Dense,
    },
    Cnn {
        mel: Vec<ConvBlock>,
        rms: Vec<ConvBlock>,
        encoders: Option<(Encoder, Encoder)>,
        ssc: Dense,
        arp: Dense,
    },
}

pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    /// Kaiming-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.gen_range(-bound..bound))).collect();
        self.store.add(name, Tensor::new(shape, data).expect("init shape"))
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> Dense {
        self.dense_with_bias(name, din, dout, T::zero())
    }

    fn dense_with_bias(&mut self, name: &str, din: usize, dout: usize, bias: T) -> Dense {
        Dense {
            w: self.kaiming(&format!("{name}.weight"), &[din, dout], din),
            b: self.store.add(&format!("{name}.bias"), Tensor::full(&[dout], bias)),
        }
    }

    /// Regression output, biased to the middle of the rating scale.
    fn arp(&mut self, din: usize) -> Dense {
        self.dense_with_bias("arp", din, 1, T::lit(ARP_BIAS_INIT))
    }

    fn conv_unit(&mut self, name: &str, cin: usize, cout: usize) -> ConvUnit {
        ConvUnit {
            w: self.kaiming(&format!("{name}.weight"), &[cout, cin, 3, 3], cin * 9),
            gamma: self
                .store
                .add(&format!("{name}.bn.gamma"), Tensor::full(&[cout], T::one())),
            beta: self.store.add(&format!("{name}.bn.beta"), Tensor::zeros(&[cout])),
            running_mean: self
                .store
                .add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(&[cout])),
            running_var: self
                .store
                .add_buffer(&format!("{name}.bn.running_var"), Tensor::full(&[cout], T::one())),
        }
    }

    /// `units_per_block` conv units per block, each block pooled by `pool`
    /// (clipped to the input width).
    fn branch(
        &mut self,
        name: &str,
        filters: &[usize],
        units_per_block: usize,
        pool: (usize, usize),
        width: usize,
    ) -> Vec<ConvBlock> {
        let mut cin = 1;
        let mut w = width;
        filters
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let units = (0..units_per_block)
                    .map(|u| {
                        let unit = self.conv_unit(&format!("{name}.block{}.conv{}", i + 1, u + 1), cin, c);
                        cin = c;
                        unit
                    })
                    .collect();
                let kw = pool.1.min(w);
                w /= kw;
                ConvBlock {
                    units,
                    pool: (pool.0, kw),
                }
            })
            .collect()
    }

    fn mha(&mut self, name: &str, d: usize) -> MhaIds {
        MhaIds {
            w_q: self.kaiming(&format!("{name}.w_q"), &[d, d], d),
            w_k: self.kaiming(&format!("{name}.w_k"), &[d, d], d),
            w_v: self.kaiming(&format!("{name}.w_v"), &[d, d], d),
            w_o: self.kaiming(&format!("{name}.w_o"), &[d, d], d),
        }
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> (ParamId, ParamId) {
        (
            self.store.add(&format!("{name}.gamma"), Tensor::full(&[d], T::one())),
            self.store.add(&format!("{name}.beta"), Tensor::zeros(&[d])),
        )
    }

    fn encoder(&mut self, name: &str, d: usize, ff: usize) -> Encoder {
        Encoder {
            attn: self.mha(&format!("{name}.attn"), d),
            ln1: self.layer_norm(&format!("{name}.ln1"), d),
            ff1: self.dense(&format!("{name}.ff1"), d, ff),
            ff2: self.dense(&format!("{name}.ff2"), ff, d),
            ln2: self.layer_norm(&format!("{name}.ln2"), d),
        }
    }

    pub fn build(&mut self, kind: ModelKind, c: &DcnnCafConfig) -> Net {
        match kind {
            ModelKind::DcnnCaf | ModelKind::MelOnly | ModelKind::RmsOnly => {
                let mel = kind
                    .uses_mel()
                    .then(|| self.branch("mel", &c.conv_filters, 2, (2, 1), c.n_mels));
                let rms = kind
                    .uses_rms()
                    .then(|| self.branch("rms", &c.conv_filters, 2, (2, 1), 1));
                let cross = (kind == ModelKind::DcnnCaf).then(|| {
                    (
                        self.mha("mha1", c.d_model),
                        self.mha("mha2", c.d_model),
                        self.dense("fusion", 2 * c.d_model, c.fusion_dim),
                    )
                });
                let arp_in = if cross.is_some() { c.fusion_dim } else { c.d_model };
                let embedding = self.dense("ssc.embedding", c.d_model, c.embedding_dim);
                let classifier = self.dense("ssc.classifier", c.embedding_dim, c.n_classes);
                let arp = self.arp(arp_in);
                Net::Caf {
                    mel,
                    rms,
                    cross,
                    arp,
                    embedding,
                    classifier,
                }
            }
            ModelKind::Dnn => {
                let mut stack = |name: &str, din: usize| {
                    let mut d = din;
                    c.dnn_widths
                        .iter()
                        .enumerate()
                        .map(|(i, &w)| {
                            let l = self.dense(&format!("{name}.fc{}", i + 1), d, w);
                            d = w;
                            l
                        })
                        .collect::<Vec<_>>()
                };
                let mel = stack("mel", c.n_mels);
                let rms = stack("rms", 1);
                let width = 2 * c.dnn_widths.last().expect("validated");
                Net::Dnn {
                    mel,
                    rms,
                    ssc: self.dense("ssc", width, c.n_classes),
                    arp: self.arp(width),
                }
            }
            ModelKind::Cnn | ModelKind::CnnTransformer => {
                let mel = self.branch("mel", &c.cnn_filters, 1, (2, 2), c.n_mels);
                let rms = self.branch("rms", &c.cnn_filters, 1, (2, 2), 1);
                let d = *c.cnn_filters.last().expect("validated");
                let encoders = (kind == ModelKind::CnnTransformer).then(|| {
                    (
                        self.encoder("mel.encoder", d, c.encoder_ff),
                        self.encoder("rms.encoder", d, c.encoder_ff),
                    )
                });
                Net::Cnn {
                    mel,
                    rms,
                    encoders,
                    ssc: self.dense("ssc", 2 * d, c.n_classes),
                    arp: self.arp(2 * d),
                }
            }
        }
    }
}

/// Outputs of one cross-attention fusion.
#[derive(Clone, Copy, Debug)]
pub struct FuseOutput {
    /// `MHA1(q = R_m, k = v = R_r)`.
    pub out1: Var,
    /// `MHA2(q = R_r, k = v = R_m)`.
    pub out2: Var,
    pub attention1: Var,
    pub attention2: Var,
}

/// The two cross-attention blocks, before concatenation and the fusion layer.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    r_mel: Var,
    r_rms: Var,
    mha1: &MhaWeights,
    mha2: &MhaWeights,
    heads: usize,
) -> Result<FuseOutput, ModelError> {
    let MhaOutput {
        output: out1,
        attention: attention1,
    } = mha(tape, r_mel, r_rms, r_rms, mha1, heads)?;
    let MhaOutput {
        output: out2,
        attention: attention2,
    } = mha(tape, r_rms, r_mel, r_mel, mha2, heads)?;
    Ok(FuseOutput {
        out1,
        out2,
        attention1,
        attention2,
    })
}

pub(crate) struct Fwd<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate<T>>,
}

type R<T> = Result<T, ModelError>;

impl<T: Scalar> Fwd<'_, T> {
    fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn dense(&mut self, x: Var, d: &Dense) -> R<Var> {
        let (w, b) = (self.p(d.w), self.p(d.b));
        Ok(self.tape.linear(x, w, Some(b))?)
    }

    fn dense_relu(&mut self, x: Var, d: &Dense) -> R<Var> {
        let y = self.dense(x, d)?;
        Ok(self.tape.relu(y)?)
    }

    fn conv_unit(&mut self, x: Var, u: &ConvUnit) -> R<Var> {
        let w = self.p(u.w);
        let y = self.tape.conv2d(x, w, None)?;
        let (g, b) = (self.p(u.gamma), self.p(u.beta));
        let (y, stats) = match self.mode {
            Mode::Train => self.tape.batch_norm(y, g, b, BnMode::Train)?,
            Mode::Infer => self.tape.batch_norm(
                y,
                g,
                b,
                BnMode::Infer {
                    mean: self.store.get(u.running_mean),
                    var: self.store.get(u.running_var),
                },
            )?,
        };
        if let Some(stats) = stats {
            self.bn_updates.push(BnUpdate {
                mean: u.running_mean,
                var: u.running_var,
                stats,
            });
        }
        Ok(self.tape.relu(y)?)
    }

    /// `[B, 1, T, F]` → `[B, C, T', F']`.
    pub fn branch(&mut self, mut x: Var, blocks: &[ConvBlock]) -> R<Var> {
        for b in blocks {
            for u in &b.units {
                x = self.conv_unit(x, u)?;
            }
            x = self.tape.avg_pool2d(x, b.pool.0, b.pool.1)?;
        }
        Ok(x)
    }

    /// Frequency mean then `[B, T', C]`.
    pub fn sequence(&mut self, x: Var) -> R<Var> {
        let x = self.tape.mean_axis(x, 3)?;
        Ok(self.tape.permute(x, &[0, 2, 1])?)
    }

    pub fn mha_weights(&mut self, ids: &MhaIds) -> MhaWeights {
        MhaWeights {
            w_q: self.p(ids.w_q),
            w_k: self.p(ids.w_k),
            w_v: self.p(ids.w_v),
            w_o: self.p(ids.w_o),
        }
    }

    /// Post-norm encoder block on `[B, T, d]`.
    pub fn encoder(&mut self, x: Var, e: &Encoder, heads: usize) -> R<Var> {
        let w = self.mha_weights(&e.attn);
        let a = mha(self.tape, x, x, x, &w, heads)?.output;
        let x = self.tape.add(x, a)?;
        let (g, b) = (self.p(e.ln1.0), self.p(e.ln1.1));
        let x = self.tape.layer_norm(x, g, b)?;
        let h = self.dense_relu(x, &e.ff1)?;
        let h = self.dense(h, &e.ff2)?;
        let x = self.tape.add(x, h)?;
        let (g, b) = (self.p(e.ln2.0), self.p(e.ln2.1));
        Ok(self.tape.layer_norm(x, g, b)?)
    }

    pub fn mlp(&mut self, mut x: Var, layers: &[Dense]) -> R<Var> {
        for l in layers {
            x = self.dense_relu(x, l)?;
        }
        Ok(x)
    }

    pub fn ssc_head(&mut self, pooled: Var, embedding: &Dense, classifier: &Dense) -> R<Var> {
        let e = self.dense_relu(pooled, embedding)?;
        let logits = self.dense(e, classifier)?;
        Ok(self.tape.sigmoid(logits)?)
    }

    pub fn arp_head(&mut self, pooled: Var, arp: &Dense) -> R<Var> {
        let y = self.dense(pooled, arp)?;
        let b = self.tape.shape(y)[0];
        Ok(self.tape.reshape(y, &[b])?)
    }
}

//! Batching, the joint training loop, evaluation and checkpoints.

mod checkpoint;
mod data;

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{checkpoint_container, load_checkpoint, model_from_container, save_checkpoint, CheckpointInfo};
pub use data::{
    clip_features, feature_cache_path, load_canonical, load_clip_features, load_dataset, make_batches, mixed_dataset,
    save_clip_features, Batch, CacheOptions, ClipFeatures, Dataset, FEATURE_EXT,
};

use crate::audio::AudioError;
use crate::autograd::{Adam, AdamConfig, Tape, TensorError, BCE_CLAMP};
use crate::container::ContainerError;
use crate::eval::{mae_rmse, ssc_metrics, EvalError, EvalMetrics};
use crate::features::FeatureError;
use crate::model::{Mode, Model, ModelError, Prediction};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("clip {clip_id}: {detail}")]
    Clip { clip_id: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite training value at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "float32" => Ok(Self::F32),
            "f64" | "float64" => Ok(Self::F64),
            _ => Err(TrainError::Config(format!("unknown precision {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Shuffle seed.
    pub seed: u64,
    pub w_ssc: f64,
    pub w_arp: f64,
    /// Score the validation set after every epoch.
    pub eval_every_epoch: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            epochs: 100,
            seed: 0,
            w_ssc: 1.0,
            w_arp: 1.0,
            eval_every_epoch: true,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr {}", self.lr)));
        }
        if !(self.w_ssc.is_finite() && self.w_arp.is_finite() && self.w_ssc >= 0.0 && self.w_arp >= 0.0) {
            return Err(TrainError::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean joint loss over the epoch.
    pub train_loss: f64,
    pub train_bce: f64,
    pub train_mse: f64,
    pub val: Option<EvalMetrics>,
    /// Weighted BCE + MSE on the validation set, unclamped annoyance.
    pub val_loss: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_mae,val_rmse,val_auc,val_f1,val_acc,val_loss";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = write!(s, "{},{:?}", r.epoch, r.train_loss);
        match &r.val {
            Some(v) => {
                let auc = v.ssc.auc.map_or_else(String::new, |a| format!("{a:?}"));
                let _ = write!(
                    s,
                    ",{:?},{:?},{auc},{:?},{:?}",
                    v.arp.mae, v.arp.rmse, v.ssc.f_score, v.ssc.acc
                );
            }
            None => s.push_str(",,,,,"),
        }
        match r.val_loss {
            Some(l) => {
                let _ = writeln!(s, ",{l:?}");
            }
            None => s.push_str(",\n"),
        }
    }
    s
}

pub struct TrainOutcome<T> {
    pub history: Vec<EpochRecord>,
    /// Epoch of the retained model; the last epoch without validation.
    pub best_epoch: usize,
    pub best: Model<T>,
}

impl<T> TrainOutcome<T> {
    pub fn best_metrics(&self) -> Option<&EvalMetrics> {
        self.history.get(self.best_epoch - 1).and_then(|r| r.val.as_ref())
    }
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub joint: f64,
    pub bce: f64,
    pub mse: f64,
}

/// Forward, backward and one Adam update on `batch`; BN running statistics
/// are folded in afterwards.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    batch: &Batch<T>,
    w_ssc: f64,
    w_arp: f64,
) -> Result<StepLoss, TensorError> {
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, &batch.input, Mode::Train)
        .map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => TensorError::Input {
                op: "forward",
                detail: other.to_string(),
            },
        })?;
    let bce = tape.bce_loss(out.probs, &batch.y_s)?;
    let mse = tape.mse_loss(out.annoyance, &batch.y_a)?;
    let loss = tape.joint_loss(bce, mse, T::lit(w_ssc), T::lit(w_arp))?;
    let value = |v| tape.value(v).item().to_f64().unwrap_or(f64::NAN);
    let step = StepLoss {
        joint: value(loss),
        bce: value(bce),
        mse: value(mse),
    };
    if !step.joint.is_finite() {
        return Err(TensorError::NonFinite { op: "joint_loss" });
    }
    let grads = tape.backward(loss)?;
    let grads = grads.param_grads(model.params.len());
    opt.step(&mut model.params, &grads)?;
    model.apply_bn_updates(&out.bn_updates);
    Ok(step)
}

/// Inference predictions for a whole dataset.
pub fn predict_dataset<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    chunk: usize,
) -> Result<Vec<Prediction>, TrainError> {
    Ok(model.predict(&data.feature_refs(), false, chunk)?)
}

/// SSC and ARP metrics of predictions against the dataset targets;
/// annoyance is clamped to the rating scale before scoring.
pub fn score_predictions(preds: &[Prediction], data: &Dataset) -> Result<EvalMetrics, TrainError> {
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.source_probs.clone()).collect();
    let ann: Vec<f64> = preds.iter().map(Prediction::reported_annoyance).collect();
    Ok(EvalMetrics {
        ssc: ssc_metrics(&probs, &data.labels)?,
        arp: mae_rmse(&ann, &data.annoyance)?,
    })
}

/// `w_ssc·BCE + w_arp·MSE` of predictions, with the training loss's clamping of probabilities.
pub fn prediction_loss(preds: &[Prediction], data: &Dataset, w_ssc: f64, w_arp: f64) -> f64 {
    let (mut bce, mut cells, mut mse) = (0.0, 0usize, 0.0);
    for ((p, labels), &y) in preds.iter().zip(&data.labels).zip(&data.annoyance) {
        for (&q, &l) in p.source_probs.iter().zip(labels) {
            let q = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            bce -= if l { q.ln() } else { (1.0 - q).ln() };
            cells += 1;
        }
        mse += (p.annoyance - y).powi(2);
    }
    w_ssc * bce / cells.max(1) as f64 + w_arp * mse / preds.len().max(1) as f64
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<EvalMetrics, TrainError> {
    score_predictions(&predict_dataset(model, data, 32)?, data)
}

/// Joint-loss training with Adam. With a validation set the model with the
/// lowest `MAE + (1 − AUC)` is retained, ties going to the earlier epoch.
/// `on_epoch` sees every history row as it is produced.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut opt = Adam::new(
        &model.params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model<T>)> = None;
    for epoch in 1..=config.epochs {
        let (mut joint, mut bce, mut mse) = (0.0, 0.0, 0.0);
        for (bi, idx) in make_batches(train_set.len(), config.batch_size, config.seed, epoch)
            .iter()
            .enumerate()
        {
            let batch = train_set.batch::<T>(idx, model.config())?;
            let step = train_step(model, &mut opt, &batch, config.w_ssc, config.w_arp).map_err(|e| match e {
                TensorError::NonFinite { op } => TrainError::NonFinite {
                    epoch,
                    batch: bi + 1,
                    detail: format!("produced by {op}"),
                },
                other => TrainError::Tensor(other),
            })?;
            let w = idx.len() as f64;
            joint += step.joint * w;
            bce += step.bce * w;
            mse += step.mse * w;
        }
        let n = train_set.len() as f64;
        let (val, val_loss) = match val_set {
            Some(v) if config.eval_every_epoch || epoch == config.epochs => {
                let preds = predict_dataset(model, v, 32)?;
                (
                    Some(score_predictions(&preds, v)?),
                    Some(prediction_loss(&preds, v, config.w_ssc, config.w_arp)),
                )
            }
            _ => (None, None),
        };
        if let Some(m) = &val {
            let score = m.selection_score();
            if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
                best = Some((score, epoch, model.clone()));
            }
        }
        let record = EpochRecord {
            epoch,
            train_loss: joint / n,
            train_bce: bce / n,
            train_mse: mse / n,
            val,
            val_loss,
        };
        on_epoch(&record);
        history.push(record);
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (config.epochs, model.clone()),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best,
    })
}

use std::collections::BTreeMap;
use std::path::Path;

use super::TrainError;
use crate::autograd::Tensor;
use crate::container::Container;
use crate::eval::EvalMetrics;
use crate::model::{DcnnCafConfig, Model, ModelKind};
use crate::Scalar;

/// Header fields of a checkpoint besides the tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointInfo {
    pub epoch: usize,
    /// `metrics.*` header entries.
    pub metrics: BTreeMap<String, String>,
}

impl CheckpointInfo {
    pub fn new(epoch: usize, metrics: Option<&EvalMetrics>) -> Self {
        let mut m = BTreeMap::new();
        if let Some(e) = metrics {
            m.insert("val_mae".into(), format!("{:?}", e.arp.mae));
            m.insert("val_rmse".into(), format!("{:?}", e.arp.rmse));
            if let Some(a) = e.ssc.auc {
                m.insert("val_auc".into(), format!("{a:?}"));
            }
            m.insert("val_f1".into(), format!("{:?}", e.ssc.f_score));
            m.insert("val_acc".into(), format!("{:?}", e.ssc.acc));
        }
        Self { epoch, metrics: m }
    }
}

fn dims(s: &[usize]) -> String {
    if s.is_empty() {
        return "scalar".into();
    }
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Every parameter and buffer as float32, with kind, config, epoch, metrics
/// and the shape ledger in the header.
pub fn checkpoint_container<T: Scalar>(model: &Model<T>, info: &CheckpointInfo) -> Container {
    let mut c = Container::new();
    c.insert_meta("model_kind", model.kind().name());
    c.insert_meta("epoch", info.epoch);
    c.insert_meta("tensor_count", model.params.len());
    for (k, v) in model.config().to_pairs() {
        c.insert_meta(format!("config.{k}"), v);
    }
    for (k, v) in &info.metrics {
        c.insert_meta(format!("metrics.{k}"), v);
    }
    for (name, shape) in model.arch.ledger() {
        c.insert_meta(format!("ledger.{name}"), dims(&shape));
    }
    for e in model.params.entries() {
        let data = e.value.data().iter().map(|v| v.to_f32().expect("finite")).collect();
        c.push(e.name.clone(), e.value.shape(), data);
    }
    c
}

pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    info: &CheckpointInfo,
    path: impl AsRef<Path>,
) -> Result<(), TrainError> {
    checkpoint_container(model, info).save(path)?;
    Ok(())
}

pub fn model_from_container<T: Scalar>(c: &Container) -> Result<(Model<T>, CheckpointInfo), TrainError> {
    let bad = |m: String| TrainError::Checkpoint(m);
    let kind: ModelKind = c
        .meta
        .get("model_kind")
        .ok_or_else(|| bad("missing model_kind".into()))?
        .parse()?;
    let pairs: BTreeMap<String, String> = c
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
        .collect();
    let config = DcnnCafConfig::from_pairs(&pairs)?;
    let mut model = Model::<T>::build(kind, &config, 0)?;
    for (name, shape) in model.arch.ledger() {
        let key = format!("ledger.{name}");
        match c.meta.get(&key) {
            Some(v) if *v == dims(&shape) => {}
            other => return Err(bad(format!("{key}: stored {other:?}, model expects {}", dims(&shape)))),
        }
    }
    if c.tensors.len() != model.params.len() {
        return Err(bad(format!(
            "{} tensors stored, model has {}",
            c.tensors.len(),
            model.params.len()
        )));
    }
    let mut seen = vec![false; model.params.len()];
    for t in &c.tensors {
        let id = model
            .params
            .id(&t.name)
            .ok_or_else(|| bad(format!("unknown tensor {}", t.name)))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(bad(format!("tensor {} stored twice", t.name)));
        }
        let value = Tensor::new(&t.shape, t.data.iter().map(|&v| T::lit(v as f64)).collect())?;
        model
            .params
            .set(id, value)
            .map_err(|e| bad(format!("shape mismatch: {e}")))?;
    }
    let epoch = c
        .meta
        .get("epoch")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing epoch".into()))?;
    let metrics = c
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("metrics.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok((model, CheckpointInfo { epoch, metrics }))
}

/// Loads and validates a checkpoint; nothing is returned on any mismatch.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, CheckpointInfo), TrainError> {
    let c = Container::load(path)?;
    model_from_container(&c)
}

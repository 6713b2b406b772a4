//! `key = value` run configuration: file values first, flags on top.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sscaf_core::model::{DcnnCafConfig, ModelKind};
use sscaf_core::training::{Precision, TrainConfig};

pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut kv = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value", no + 1);
        };
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(kv)
}

pub fn read_pairs(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_pairs(&text).with_context(|| format!("in {}", path.display()))
}

/// Fully resolved settings of a `train` run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub arch: DcnnCafConfig,
    pub train: TrainConfig,
}

/// Flag values; `None` leaves the file value (or default) in place.
#[derive(Clone, Debug, Default)]
pub struct TrainFlags {
    pub model: Option<ModelKind>,
    pub tiny: bool,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().ok().with_context(|| format!("{key}: cannot parse {v:?}"))
}

impl RunConfig {
    pub fn resolve(mut file: BTreeMap<String, String>, flags: &TrainFlags) -> Result<Self> {
        let mut take = |k: &str| file.remove(k);
        let mut model: ModelKind = match take("model") {
            Some(v) => v.parse()?,
            None => ModelKind::DcnnCaf,
        };
        let mut tiny = match take("tiny") {
            Some(v) => parse("tiny", &v)?,
            None => false,
        };
        let mut t = TrainConfig::default();
        if let Some(v) = take("epochs") {
            t.epochs = parse("epochs", &v)?;
        }
        if let Some(v) = take("batch_size") {
            t.batch_size = parse("batch_size", &v)?;
        }
        if let Some(v) = take("lr") {
            t.lr = parse("lr", &v)?;
        }
        if let Some(v) = take("seed") {
            t.seed = parse("seed", &v)?;
        }
        if let Some(v) = take("w_ssc") {
            t.w_ssc = parse("w_ssc", &v)?;
        }
        if let Some(v) = take("w_arp") {
            t.w_arp = parse("w_arp", &v)?;
        }
        if let Some(v) = take("eval_every_epoch") {
            t.eval_every_epoch = parse("eval_every_epoch", &v)?;
        }
        if let Some(v) = take("precision") {
            t.precision = v.parse()?;
        }
        if let Some(m) = flags.model {
            model = m;
        }
        tiny |= flags.tiny;
        t.epochs = flags.epochs.unwrap_or(t.epochs);
        t.batch_size = flags.batch_size.unwrap_or(t.batch_size);
        t.lr = flags.lr.unwrap_or(t.lr);
        t.seed = flags.seed.unwrap_or(t.seed);
        t.precision = flags.precision.unwrap_or(t.precision);

        let base = if tiny {
            DcnnCafConfig::tiny()
        } else {
            DcnnCafConfig::default()
        };
        let mut pairs = base.to_pairs();
        for (k, v) in std::mem::take(&mut file) {
            match k.strip_prefix("arch.") {
                Some(a) if pairs.contains_key(a) => {
                    pairs.insert(a.to_string(), v);
                }
                _ => bail!("unknown config key {k:?}"),
            }
        }
        let arch = DcnnCafConfig::from_pairs(&pairs)?;
        t.validate()?;
        Ok(Self { model, arch, train: t })
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = format!(
            "model = {}\nepochs = {}\nbatch_size = {}\nlr = {:?}\nseed = {}\nw_ssc = {:?}\nw_arp = {:?}\neval_every_epoch = {}\nprecision = {}\n",
            self.model.name(),
            t.epochs,
            t.batch_size,
            t.lr,
            t.seed,
            t.w_ssc,
            t.w_arp,
            t.eval_every_epoch,
            match t.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
        );
        for (k, v) in self.arch.to_pairs() {
            s.push_str(&format!("arch.{k} = {v}\n"));
        }
        s
    }
}

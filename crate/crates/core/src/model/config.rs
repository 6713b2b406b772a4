use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::ModelError;
use crate::audio::N_CLASSES;
use crate::features::{N_FRAMES, N_MELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    DcnnCaf,
    MelOnly,
    RmsOnly,
    Dnn,
    Cnn,
    CnnTransformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        Self::DcnnCaf,
        Self::MelOnly,
        Self::RmsOnly,
        Self::Dnn,
        Self::Cnn,
        Self::CnnTransformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::DcnnCaf => "dcnn-caf",
            Self::MelOnly => "mel-only",
            Self::RmsOnly => "rms-only",
            Self::Dnn => "dnn",
            Self::Cnn => "cnn",
            Self::CnnTransformer => "cnn-transformer",
        }
    }

    pub fn uses_mel(self) -> bool {
        self != Self::RmsOnly
    }

    pub fn uses_rms(self) -> bool {
        self != Self::MelOnly
    }

    /// Whether forward passes produce cross-attention maps.
    pub fn has_cross_attention(self) -> bool {
        self == Self::DcnnCaf
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown model kind {s:?}")))
    }
}

/// Widths and input geometry shared by all model kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct DcnnCafConfig {
    pub conv_filters: Vec<usize>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_classes: usize,
    pub embedding_dim: usize,
    pub fusion_dim: usize,
    /// Fully connected widths of the DNN baseline.
    pub dnn_widths: Vec<usize>,
    /// Filter counts of the CNN baselines.
    pub cnn_filters: Vec<usize>,
    /// Heads and feed-forward width of the CNN-Transformer encoder.
    pub encoder_heads: usize,
    pub encoder_ff: usize,
    pub tiny: bool,
}

impl Default for DcnnCafConfig {
    fn default() -> Self {
        Self {
            conv_filters: vec![64, 128, 256, 512],
            n_mels: N_MELS,
            n_frames: N_FRAMES,
            d_model: 512,
            heads: 8,
            n_classes: N_CLASSES,
            embedding_dim: 128,
            fusion_dim: 512,
            dnn_widths: vec![64, 128, 256, 512],
            cnn_filters: vec![32, 64],
            encoder_heads: 8,
            encoder_ff: 128,
            tiny: false,
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, ModelError> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| ModelError::Config(format!("{key}: bad entry {x:?}")))
        })
        .collect()
}

impl DcnnCafConfig {
    /// All widths divided by 16.
    pub fn tiny() -> Self {
        let d = Self::default();
        let s = |v: &[usize]| v.iter().map(|x| (x / 16).max(1)).collect::<Vec<_>>();
        Self {
            conv_filters: s(&d.conv_filters),
            d_model: d.d_model / 16,
            embedding_dim: d.embedding_dim / 16,
            fusion_dim: d.fusion_dim / 16,
            dnn_widths: s(&d.dnn_widths),
            cnn_filters: s(&d.cnn_filters),
            encoder_heads: 2,
            encoder_ff: d.encoder_ff / 16,
            tiny: true,
            ..d
        }
    }

    /// Number of ×2 time poolings in each convolutional branch.
    pub fn blocks(&self) -> usize {
        self.conv_filters.len()
    }

    /// Time steps surviving the convolutional branch.
    pub fn out_frames(&self) -> usize {
        self.n_frames >> self.blocks()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return bad(format!("conv_filters {:?}", self.conv_filters));
        }
        if self.conv_filters.last() != Some(&self.d_model) {
            return bad(format!(
                "last conv width {:?} must equal d_model {}",
                self.conv_filters.last(),
                self.d_model
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.n_frames == 0 || !self.n_frames.is_multiple_of(1 << self.blocks()) {
            return bad(format!(
                "n_frames {} not divisible by 2^{}",
                self.n_frames,
                self.blocks()
            ));
        }
        if self.n_mels == 0 || self.n_classes == 0 || self.embedding_dim == 0 || self.fusion_dim == 0 {
            return bad("zero width".into());
        }
        if self.dnn_widths.is_empty() || self.dnn_widths.contains(&0) {
            return bad(format!("dnn_widths {:?}", self.dnn_widths));
        }
        if self.cnn_filters.is_empty() || self.cnn_filters.contains(&0) {
            return bad(format!("cnn_filters {:?}", self.cnn_filters));
        }
        let enc_d = *self.cnn_filters.last().expect("nonempty");
        if self.encoder_heads == 0 || !enc_d.is_multiple_of(self.encoder_heads) || self.encoder_ff == 0 {
            return bad(format!("encoder width {enc_d} with {} heads", self.encoder_heads));
        }
        if self.n_frames >> self.cnn_filters.len() == 0 {
            return bad("too few frames for the CNN baseline".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("conv_filters".into(), list(&self.conv_filters));
        m.insert("n_mels".into(), self.n_mels.to_string());
        m.insert("n_frames".into(), self.n_frames.to_string());
        m.insert("d_model".into(), self.d_model.to_string());
        m.insert("heads".into(), self.heads.to_string());
        m.insert("n_classes".into(), self.n_classes.to_string());
        m.insert("embedding_dim".into(), self.embedding_dim.to_string());
        m.insert("fusion_dim".into(), self.fusion_dim.to_string());
        m.insert("dnn_widths".into(), list(&self.dnn_widths));
        m.insert("cnn_filters".into(), list(&self.cnn_filters));
        m.insert("encoder_heads".into(), self.encoder_heads.to_string());
        m.insert("encoder_ff".into(), self.encoder_ff.to_string());
        m.insert("tiny".into(), self.tiny.to_string());
        m
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        let get = |k: &str| {
            pairs
                .get(k)
                .ok_or_else(|| ModelError::Config(format!("missing model key {k}")))
        };
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::Config(format!("bad value for {k}")))
        };
        let c = Self {
            conv_filters: parse_list("conv_filters", get("conv_filters")?)?,
            n_mels: num("n_mels")?,
            n_frames: num("n_frames")?,
            d_model: num("d_model")?,
            heads: num("heads")?,
            n_classes: num("n_classes")?,
            embedding_dim: num("embedding_dim")?,
            fusion_dim: num("fusion_dim")?,
            dnn_widths: parse_list("dnn_widths", get("dnn_widths")?)?,
            cnn_filters: parse_list("cnn_filters", get("cnn_filters")?)?,
            encoder_heads: num("encoder_heads")?,
            encoder_ff: num("encoder_ff")?,
            tiny: get("tiny")? == "true",
        };
        c.validate()?;
        Ok(c)
    }
}

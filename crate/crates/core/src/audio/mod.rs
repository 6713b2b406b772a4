//! Audio clips, WAV files, dataset manifests, noise mixing and the synthetic
//! soundscape generator.

mod manifest;
mod mix;
pub mod synth;
mod wav;

use std::path::PathBuf;

use thiserror::Error;

pub use manifest::{load_manifest, save_manifest, ClipRecord, DatasetManifest, Split};
pub use mix::{mix_at_snr, random_mix_spec, MixOutcome, MixSpec};
pub use synth::{generate_synthetic_dataset, SynthConfig, SynthOutput};
pub use wav::{load_wav, write_wav};

/// Sample rate every feature and model assumes.
pub const CANONICAL_RATE: u32 = 16_000;
/// Clip length in seconds.
pub const CLIP_SECONDS: f64 = 15.0;
/// Length of a mixing insertion in seconds.
pub const NOISE_SECONDS: f64 = 5.0;

/// The 24 source classes in manifest column order.
pub const SOURCE_LABELS: [&str; 24] = [
    "Aircraft",
    "Bells",
    "Bird tweets",
    "Bus",
    "Car",
    "Children",
    "Construction",
    "Dog bark",
    "Footsteps",
    "General traffic",
    "Horn",
    "Laughter",
    "Motorcycle",
    "Music",
    "Non-identifiable",
    "Rail",
    "Rustling leaves",
    "Screeching brakes",
    "Shouting",
    "Siren",
    "Speech",
    "Ventilation",
    "Water",
    "Other",
];

pub const N_CLASSES: usize = SOURCE_LABELS.len();

pub fn label_index(name: &str) -> Option<usize> {
    SOURCE_LABELS.iter().position(|&l| l == name)
}

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed wav {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("unsupported wav encoding in {path}: {detail}")]
    Unsupported { path: PathBuf, detail: String },
    #[error("manifest {path}, row {row}: {detail}")]
    Manifest { path: PathBuf, row: usize, detail: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
}

/// Mono sample buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn silence(seconds: f64, sample_rate: u32) -> Self {
        let n = (seconds * sample_rate as f64).round() as usize;
        Self::new(vec![0.0; n], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self::new(self.samples.iter().map(|s| s * gain).collect(), self.sample_rate)
    }
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Linear-interpolation resampling; output length is `round(n * target / source)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 || clip.sample_rate == 0 {
        return Err(AudioError::Input("sample rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let n = clip.samples.len();
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let m = (n as f64 * target_rate as f64 / clip.sample_rate as f64).round() as usize;
    let x = &clip.samples;
    let out = (0..m)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            if j + 1 >= n {
                return x.get(n.saturating_sub(1)).copied().unwrap_or(0.0);
            }
            let frac = pos - j as f64;
            x[j] + (x[j + 1] - x[j]) * frac
        })
        .collect();
    Ok(AudioClip::new(out, target_rate))
}

//! Deterministic front end: STFT power spectra, log-Mel bands, frame RMS and
//! A-weighted equivalent level.

mod aweight;
mod mel;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio::{AudioClip, CANONICAL_RATE};

pub use aweight::{a_weighted_leq, a_weighting_db, LevelSummary, LEQ_FLOOR_DB};
pub use mel::{hz_to_mel, log_mel, mel_to_hz, MelFilterbank, LOG_EPS};

pub const WINDOW_MS: f64 = 46.0;
pub const OVERLAP: f64 = 1.0 / 3.0;
pub const N_MELS: usize = 64;
pub const F_LO: f64 = 50.0;
/// Frames kept per clip.
pub const N_FRAMES: usize = 480;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
}

/// Frame geometry in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub window: usize,
    pub hop: usize,
}

impl Framing {
    /// Window of `window_ms` rounded to samples; hop is the window times
    /// `1 - overlap`, rounded down (736 and 490 at 16 kHz).
    pub fn from_ms(sample_rate: u32, window_ms: f64, overlap: f64) -> Result<Self, FeatureError> {
        if !(0.0..1.0).contains(&overlap) || window_ms <= 0.0 {
            return Err(FeatureError::Config(format!(
                "window {window_ms} ms, overlap {overlap}"
            )));
        }
        let window = (window_ms * 1e-3 * sample_rate as f64).round() as usize;
        let hop = ((window as f64 * (1.0 - overlap)) + 1e-9).floor() as usize;
        if window < 2 || hop == 0 {
            return Err(FeatureError::Config("window too short".into()));
        }
        Ok(Self { window, hop })
    }

    pub fn canonical() -> Self {
        Self::from_ms(CANONICAL_RATE, WINDOW_MS, OVERLAP).expect("canonical framing")
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.window {
            0
        } else {
            (n_samples - self.window) / self.hop + 1
        }
    }

    pub fn bins(&self) -> usize {
        self.window / 2 + 1
    }
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Power spectrogram, row-major `[frames × bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub power: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub sample_rate: u32,
    pub framing: Framing,
}

impl Spectrogram {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.power[i * self.bins..(i + 1) * self.bins]
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.framing.hop as f64
    }
}

pub(crate) struct FrameFft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl FrameFft {
    pub(crate) fn new(n: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n);
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        Self {
            fft,
            window: hamming(n),
            buf: vec![Complex::default(); n],
            scratch,
        }
    }

    /// Full complex spectrum of the windowed frame.
    pub(crate) fn spectrum(&mut self, frame: &[f64]) -> &[Complex<f64>] {
        for ((b, &x), &w) in self.buf.iter_mut().zip(frame).zip(&self.window) {
            *b = Complex::new(x * w, 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        &self.buf
    }

    pub(crate) fn window(&self) -> &[f64] {
        &self.window
    }
}

/// Hamming-windowed power spectrogram with bins `0..=window/2`.
pub fn stft(clip: &AudioClip, framing: Framing) -> Result<Spectrogram, FeatureError> {
    let frames = framing.n_frames(clip.len());
    if frames == 0 {
        return Err(FeatureError::Input(format!(
            "clip of {} samples is shorter than one {}-sample window",
            clip.len(),
            framing.window
        )));
    }
    let bins = framing.bins();
    let mut fft = FrameFft::new(framing.window);
    let mut power = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * framing.hop;
        let spec = fft.spectrum(&clip.samples[start..start + framing.window]);
        power.extend(spec[..bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(Spectrogram {
        power,
        frames,
        bins,
        sample_rate: clip.sample_rate,
        framing,
    })
}

/// RMS of each unwindowed frame, framed like [`stft`].
pub fn frame_rms(clip: &AudioClip, framing: Framing) -> Result<Vec<f64>, FeatureError> {
    let frames = framing.n_frames(clip.len());
    if frames == 0 {
        return Err(FeatureError::Input("clip shorter than one window".into()));
    }
    Ok((0..frames)
        .map(|f| {
            let s = &clip.samples[f * framing.hop..f * framing.hop + framing.window];
            (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt()
        })
        .collect())
}

/// Model input for one clip: `mel` is `[N_FRAMES × N_MELS]` row-major, `rms` is `[N_FRAMES]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    pub mel: Vec<f32>,
    pub rms: Vec<f32>,
}

impl FeaturePair {
    pub fn n_frames(&self) -> usize {
        self.rms.len()
    }
}

/// Reusable extractor for canonical-rate clips.
pub struct FeatureExtractor {
    framing: Framing,
    filterbank: MelFilterbank,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let framing = Framing::canonical();
        let filterbank = MelFilterbank::new(
            N_MELS,
            framing.window,
            CANONICAL_RATE,
            F_LO,
            CANONICAL_RATE as f64 / 2.0,
        )
        .expect("canonical filterbank");
        Self { framing, filterbank }
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    /// Log-Mel and RMS streams cropped (or padded with floor values) to 480 frames.
    pub fn extract(&self, clip: &AudioClip) -> Result<FeaturePair, FeatureError> {
        if clip.sample_rate != CANONICAL_RATE {
            return Err(FeatureError::Input(format!(
                "clip at {} Hz, expected {CANONICAL_RATE} Hz",
                clip.sample_rate
            )));
        }
        let spec = stft(clip, self.framing)?;
        let mel = log_mel(&spec, &self.filterbank)?;
        let rms = frame_rms(clip, self.framing)?;
        let keep = spec.frames.min(N_FRAMES);
        let floor = LOG_EPS.ln() as f32;
        let mut mel_out = vec![floor; N_FRAMES * N_MELS];
        for (o, &v) in mel_out.iter_mut().zip(&mel[..keep * N_MELS]) {
            *o = v as f32;
        }
        let mut rms_out = vec![0.0f32; N_FRAMES];
        for (o, &v) in rms_out.iter_mut().zip(&rms[..keep]) {
            *o = v as f32;
        }
        Ok(FeaturePair {
            mel: mel_out,
            rms: rms_out,
        })
    }
}

pub fn extract_features(clip: &AudioClip) -> Result<FeaturePair, FeatureError> {
    FeatureExtractor::new().extract(clip)
}

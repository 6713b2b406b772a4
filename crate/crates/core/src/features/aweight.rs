use super::{FrameFft, Framing};
use crate::audio::AudioClip;

/// Level reported for silent clips.
pub const LEQ_FLOOR_DB: f64 = -120.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelSummary {
    /// A-weighted equivalent level in dB relative to digital full scale.
    pub laeq_db: f64,
}

fn ra(f: f64) -> f64 {
    let f2 = f * f;
    let (p1, p2, p3, p4) = (20.6f64.powi(2), 107.7f64.powi(2), 737.9f64.powi(2), 12194f64.powi(2));
    p4 * f2 * f2 / ((f2 + p1) * ((f2 + p2) * (f2 + p3)).sqrt() * (f2 + p4))
}

/// A-weighting gain in dB, normalized to 0 dB at 1 kHz.
pub fn a_weighting_db(f: f64) -> f64 {
    20.0 * (ra(f) / ra(1000.0)).log10()
}

fn a_power_gain(f: f64) -> f64 {
    let g = ra(f) / ra(1000.0);
    g * g
}

/// A-weighted equivalent level from per-frame Hamming-windowed spectra.
///
/// Each frame's weighted power is normalized by the window energy so an
/// unweighted frame reads its window-weighted mean square. Clips shorter than
/// one canonical window are analysed as a single frame of their own length.
pub fn a_weighted_leq(clip: &AudioClip) -> LevelSummary {
    if clip.is_empty() {
        return LevelSummary { laeq_db: LEQ_FLOOR_DB };
    }
    let rate = clip.sample_rate;
    let framing = Framing::from_ms(rate, super::WINDOW_MS, super::OVERLAP)
        .ok()
        .filter(|f| f.window <= clip.len())
        .unwrap_or(Framing {
            window: clip.len(),
            hop: clip.len(),
        });
    let n = framing.window;
    let gains: Vec<f64> = (0..n)
        .map(|k| {
            let kk = k.min(n - k);
            a_power_gain(kk as f64 * rate as f64 / n as f64)
        })
        .collect();
    let mut fft = FrameFft::new(n);
    let wenergy: f64 = fft.window().iter().map(|w| w * w).sum();
    let frames = framing.n_frames(clip.len());
    let mut total = 0.0;
    for f in 0..frames {
        let start = f * framing.hop;
        let spec = fft.spectrum(&clip.samples[start..start + n]);
        let p: f64 = spec.iter().zip(&gains).map(|(c, g)| c.norm_sqr() * g).sum();
        total += p / (n as f64 * wenergy);
    }
    let mean = total / frames as f64;
    let laeq_db = if mean > 0.0 {
        (10.0 * mean.log10()).max(LEQ_FLOOR_DB)
    } else {
        LEQ_FLOOR_DB
    };
    LevelSummary { laeq_db }
}

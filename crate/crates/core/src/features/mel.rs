use super::{FeatureError, Spectrogram};

/// Log floor added before taking the natural log.
pub const LOG_EPS: f64 = 1e-10;

/// HTK Mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK Mel scale, each normalized to unit weight sum.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// Row-major `[n_mels × bins]`.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub bins: usize,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_lo: f64, f_hi: f64) -> Result<Self, FeatureError> {
        if n_mels < 1 {
            return Err(FeatureError::Config("n_mels must be at least 1".into()));
        }
        if !(f_lo >= 0.0 && f_lo < f_hi && f_hi <= sample_rate as f64 / 2.0 + 1e-9) {
            return Err(FeatureError::Config(format!("band edges {f_lo}..{f_hi} Hz")));
        }
        let bins = n_fft / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * bins..(m + 1) * bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
            }
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|w| *w /= sum);
            } else {
                // narrower than one bin: take the bin nearest the centre
                let k = ((mid / bin_hz).round() as usize).min(bins - 1);
                row[k] = 1.0;
            }
        }
        Ok(Self { weights, n_mels, bins })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }
}

/// `ln(filterbank · power + ε)`, row-major `[frames × n_mels]`.
pub fn log_mel(spec: &Spectrogram, fb: &MelFilterbank) -> Result<Vec<f64>, FeatureError> {
    if spec.bins != fb.bins {
        return Err(FeatureError::Input(format!(
            "spectrogram has {} bins, filterbank {}",
            spec.bins, fb.bins
        )));
    }
    let mut out = Vec::with_capacity(spec.frames * fb.n_mels);
    for f in 0..spec.frames {
        let p = spec.frame(f);
        for m in 0..fb.n_mels {
            let e: f64 = fb.row(m).iter().zip(p).map(|(w, v)| w * v).sum();
            out.push((e + LOG_EPS).ln());
        }
    }
    Ok(out)
}

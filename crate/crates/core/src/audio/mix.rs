use rand::Rng;

use super::{rms, AudioClip, AudioError};

/// Noise insertions into one base clip.
#[derive(Clone, Debug)]
pub struct MixSpec {
    /// One to three noise segments at the base clip's rate.
    pub noise_clips: Vec<AudioClip>,
    /// Start of each segment, in seconds.
    pub insert_offsets: Vec<f64>,
    /// Target `20·log10(rms_base_region / rms_noise)`; `f64::INFINITY` disables mixing.
    pub snr_db: f64,
}

#[derive(Clone, Debug)]
pub struct MixOutcome {
    pub clip: AudioClip,
    /// Gain applied to each segment.
    pub gains: Vec<f64>,
    /// Output samples outside [-1, 1].
    pub clipped: usize,
}

/// Adds each noise segment at its offset, scaled against the RMS of the base
/// region it overlaps. The result is not renormalized.
pub fn mix_at_snr(base: &AudioClip, spec: &MixSpec) -> Result<MixOutcome, AudioError> {
    let k = spec.noise_clips.len();
    if !(1..=3).contains(&k) {
        return Err(AudioError::Input(format!("{k} noise segments, expected 1 to 3")));
    }
    if spec.insert_offsets.len() != k {
        return Err(AudioError::Input("one offset per noise segment required".into()));
    }
    if spec.snr_db.is_nan() {
        return Err(AudioError::Input("snr_db is NaN".into()));
    }
    let mut out = base.samples.clone();
    let mut gains = Vec::with_capacity(k);
    for (noise, &offset) in spec.noise_clips.iter().zip(&spec.insert_offsets) {
        if noise.sample_rate != base.sample_rate {
            return Err(AudioError::Input(format!(
                "noise at {} Hz, base at {} Hz",
                noise.sample_rate, base.sample_rate
            )));
        }
        if offset < 0.0 || !offset.is_finite() {
            return Err(AudioError::Input(format!("offset {offset}")));
        }
        let start = (offset * base.sample_rate as f64).round() as usize;
        let end = start + noise.len();
        if end > base.len() {
            return Err(AudioError::Input(format!(
                "insertion at {offset} s overruns the base clip"
            )));
        }
        let noise_rms = noise.rms();
        if noise_rms == 0.0 {
            return Err(AudioError::Degenerate("noise segment has zero RMS".into()));
        }
        if spec.snr_db == f64::INFINITY {
            gains.push(0.0);
            continue;
        }
        let base_rms = rms(&base.samples[start..end]);
        let gain = base_rms / (noise_rms * 10f64.powf(spec.snr_db / 20.0));
        for (o, &n) in out[start..end].iter_mut().zip(&noise.samples) {
            *o += gain * n;
        }
        gains.push(gain);
    }
    let clipped = out.iter().filter(|v| v.abs() > 1.0).count();
    Ok(MixOutcome {
        clip: AudioClip::new(out, base.sample_rate),
        gains,
        clipped,
    })
}

/// Draws 1 to 3 segments from `pool` with uniform offsets (overlaps allowed).
pub fn random_mix_spec<R: Rng>(
    rng: &mut R,
    pool: &[AudioClip],
    base_len: usize,
    snr_db: f64,
) -> Result<MixSpec, AudioError> {
    if pool.is_empty() {
        return Err(AudioError::Input("empty noise pool".into()));
    }
    let k = rng.gen_range(1..=3);
    let mut noise_clips = Vec::with_capacity(k);
    let mut insert_offsets = Vec::with_capacity(k);
    for _ in 0..k {
        let seg = &pool[rng.gen_range(0..pool.len())];
        if seg.len() > base_len {
            return Err(AudioError::Input("noise segment longer than base clip".into()));
        }
        let start = rng.gen_range(0..=base_len - seg.len());
        noise_clips.push(seg.clone());
        insert_offsets.push(start as f64 / seg.sample_rate as f64);
    }
    Ok(MixSpec {
        noise_clips,
        insert_offsets,
        snr_db,
    })
}

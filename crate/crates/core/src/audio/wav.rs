use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioClip, AudioError};

const FULL_SCALE: f64 = 32768.0;

fn format_err(path: &Path, e: impl std::fmt::Display) -> AudioError {
    AudioError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Reads a PCM16 or float32 WAV file, downmixing stereo to mono by channel mean.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = WavReader::new(std::io::BufReader::new(file)).map_err(|e| format_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(AudioError::Unsupported {
            path: path.to_path_buf(),
            detail: format!("{channels} channels"),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / FULL_SCALE))
            .collect::<Result<_, _>>()
            .map_err(|e| format_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| format_err(path, e))?,
        (fmt, bits) => {
            return Err(AudioError::Unsupported {
                path: path.to_path_buf(),
                detail: format!("{fmt:?} {bits}-bit"),
            })
        }
    };
    if !interleaved.len().is_multiple_of(channels) {
        return Err(format_err(path, "partial sample frame"));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(2).map(|f| 0.5 * (f[0] + f[1])).collect()
    };
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(format_err(path, "non-finite sample"));
    }
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Quantizes to 16-bit PCM, clipping to [-1, 1] first.
pub(crate) fn quantize(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * FULL_SCALE)
        .round()
        .clamp(-FULL_SCALE, FULL_SCALE - 1.0) as i16
}

/// Writes a mono 16-bit PCM WAV file.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    if clip.samples.iter().any(|v| !v.is_finite()) {
        return Err(AudioError::Input("non-finite sample".into()));
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let io = |e: hound::Error| match e {
        hound::Error::IoError(source) => AudioError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => format_err(path, other),
    };
    let mut w = WavWriter::create(path, spec).map_err(io)?;
    {
        let mut w16 = w.get_i16_writer(clip.samples.len() as u32);
        for &s in &clip.samples {
            w16.write_sample(quantize(s));
        }
        w16.flush().map_err(io)?;
    }
    w.finalize().map_err(io)
}

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::TrainError;
use crate::audio::synth::clip_seed;
use crate::audio::{
    load_wav, mix_at_snr, random_mix_spec, resample, AudioClip, DatasetManifest, Split, CANONICAL_RATE,
};
use crate::autograd::Tensor;
use crate::container::Container;
use crate::features::{a_weighted_leq, FeatureExtractor, FeaturePair, N_FRAMES, N_MELS};
use crate::model::{DcnnCafConfig, ModelInput};
use crate::Scalar;

/// Extension of cached feature files.
pub const FEATURE_EXT: &str = "feat";

/// Features and targets of one manifest, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub clip_ids: Vec<String>,
    pub features: Vec<FeaturePair>,
    pub labels: Vec<Vec<bool>>,
    pub annoyance: Vec<f64>,
    pub laeq_db: Vec<f64>,
}

/// Features of one clip plus its A-weighted level.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    pub features: FeaturePair,
    pub laeq_db: f64,
}

pub fn feature_cache_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join(format!("{clip_id}.{FEATURE_EXT}"))
}

pub fn save_clip_features(f: &ClipFeatures, clip_id: &str, path: &Path) -> Result<(), TrainError> {
    let mut c = Container::new();
    c.insert_meta("clip_id", clip_id);
    c.insert_meta("laeq_db", format!("{:?}", f.laeq_db));
    c.push("mel", &[N_FRAMES, N_MELS], f.features.mel.clone());
    c.push("rms", &[N_FRAMES], f.features.rms.clone());
    c.save(path)?;
    Ok(())
}

pub fn load_clip_features(clip_id: &str, path: &Path) -> Result<ClipFeatures, TrainError> {
    let bad = |detail: String| TrainError::Clip {
        clip_id: clip_id.to_string(),
        detail,
    };
    let c = Container::load(path).map_err(|e| bad(e.to_string()))?;
    if c.meta.get("clip_id").map(String::as_str) != Some(clip_id) {
        return Err(bad(format!("{} holds features of another clip", path.display())));
    }
    let laeq_db = c
        .meta
        .get("laeq_db")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("cached level missing".into()))?;
    let (Some(mel), Some(rms)) = (c.get("mel"), c.get("rms")) else {
        return Err(bad("cached tensors missing".into()));
    };
    if mel.shape != [N_FRAMES, N_MELS] || rms.shape != [N_FRAMES] {
        return Err(bad(format!("cached shapes {:?} / {:?}", mel.shape, rms.shape)));
    }
    Ok(ClipFeatures {
        features: FeaturePair {
            mel: mel.data.clone(),
            rms: rms.data.clone(),
        },
        laeq_db,
    })
}

/// Reads a clip and resamples it to the canonical rate.
pub fn load_canonical(path: &Path) -> Result<AudioClip, TrainError> {
    let clip = load_wav(path)?;
    Ok(resample(&clip, CANONICAL_RATE)?)
}

pub fn clip_features(clip: &AudioClip, extractor: &FeatureExtractor) -> Result<ClipFeatures, TrainError> {
    Ok(ClipFeatures {
        features: extractor.extract(clip)?,
        laeq_db: a_weighted_leq(clip).laeq_db,
    })
}

/// Where [`load_dataset`] looks for and stores cached features.
#[derive(Clone, Copy, Debug)]
pub struct CacheOptions<'a> {
    /// Cache read from unless `recompute`.
    pub read: Option<&'a Path>,
    /// Freshly extracted features are written here.
    pub write: Option<&'a Path>,
    pub recompute: bool,
}

impl CacheOptions<'_> {
    pub const NONE: CacheOptions<'static> = CacheOptions {
        read: None,
        write: None,
        recompute: true,
    };
}

/// Features for every record, extracted in parallel; failures name the clip.
pub fn load_dataset(manifest: &DatasetManifest, cache: CacheOptions<'_>) -> Result<Dataset, TrainError> {
    if let Some(dir) = cache.write {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let extractor = FeatureExtractor::new();
    let clips = manifest
        .records
        .par_iter()
        .map(|r| {
            if !cache.recompute {
                if let Some(p) = cache
                    .read
                    .map(|d| feature_cache_path(d, &r.clip_id))
                    .filter(|p| p.exists())
                {
                    return load_clip_features(&r.clip_id, &p);
                }
            }
            let named = |e: TrainError| TrainError::Clip {
                clip_id: r.clip_id.clone(),
                detail: e.to_string(),
            };
            let clip = load_canonical(&manifest.audio_path(r)).map_err(named)?;
            let f = clip_features(&clip, &extractor).map_err(named)?;
            if let Some(dir) = cache.write {
                save_clip_features(&f, &r.clip_id, &feature_cache_path(dir, &r.clip_id))?;
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let (features, laeq_db) = clips.into_iter().map(|c| (c.features, c.laeq_db)).unzip();
    Ok(Dataset {
        split: manifest.split,
        clip_ids: manifest.records.iter().map(|r| r.clip_id.clone()).collect(),
        features,
        labels: manifest.records.iter().map(|r| r.labels.to_vec()).collect(),
        annoyance: manifest.records.iter().map(|r| r.annoyance).collect(),
        laeq_db,
    })
}

/// Features of every clip after mixing 1 to 3 segments drawn from `pool` at
/// `snr_db`. Offsets and segments come from `clip_seed(seed, clip_id)`; labels
/// and ratings are copied from the manifest.
pub fn mixed_dataset(
    manifest: &DatasetManifest,
    pool: &[AudioClip],
    snr_db: f64,
    seed: u64,
) -> Result<Dataset, TrainError> {
    let extractor = FeatureExtractor::new();
    let clips = manifest
        .records
        .par_iter()
        .map(|r| {
            let named = |e: TrainError| TrainError::Clip {
                clip_id: r.clip_id.clone(),
                detail: e.to_string(),
            };
            let base = load_canonical(&manifest.audio_path(r)).map_err(named)?;
            let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(seed, &r.clip_id));
            let spec = random_mix_spec(&mut rng, pool, base.len(), snr_db).map_err(|e| named(e.into()))?;
            let mixed = mix_at_snr(&base, &spec).map_err(|e| named(e.into()))?;
            clip_features(&mixed.clip, &extractor).map_err(named)
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let (features, laeq_db) = clips.into_iter().map(|c| (c.features, c.laeq_db)).unzip();
    Ok(Dataset {
        split: manifest.split,
        clip_ids: manifest.records.iter().map(|r| r.clip_id.clone()).collect(),
        features,
        labels: manifest.records.iter().map(|r| r.labels.to_vec()).collect(),
        annoyance: manifest.records.iter().map(|r| r.annoyance).collect(),
        laeq_db,
    })
}

/// One training batch: model inputs, `y_s` `[B, n_classes]` and `y_a` `[B]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub input: ModelInput<T>,
    pub y_s: Tensor<T>,
    pub y_a: Tensor<T>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_refs(&self) -> Vec<&FeaturePair> {
        self.features.iter().collect()
    }

    /// Keeps the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick = |v: &Vec<_>| indices.iter().map(|&i| Clone::clone(&v[i])).collect();
        Dataset {
            split: self.split,
            clip_ids: indices.iter().map(|&i| self.clip_ids[i].clone()).collect(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            annoyance: pick(&self.annoyance),
            laeq_db: pick(&self.laeq_db),
        }
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize], config: &DcnnCafConfig) -> Result<Batch<T>, TrainError> {
        let feats: Vec<&FeaturePair> = indices.iter().map(|&i| &self.features[i]).collect();
        let input = ModelInput::from_features(&feats, config).map_err(|e| TrainError::Clip {
            clip_id: indices.first().map_or_else(String::new, |&i| self.clip_ids[i].clone()),
            detail: e.to_string(),
        })?;
        let nc = config.n_classes;
        let mut ys = Vec::with_capacity(indices.len() * nc);
        for &i in indices {
            if self.labels[i].len() != nc {
                return Err(TrainError::Clip {
                    clip_id: self.clip_ids[i].clone(),
                    detail: format!("{} labels for {nc} classes", self.labels[i].len()),
                });
            }
            ys.extend(self.labels[i].iter().map(|&b| if b { T::one() } else { T::zero() }));
        }
        let ya = indices.iter().map(|&i| T::lit(self.annoyance[i])).collect();
        Ok(Batch {
            indices: indices.to_vec(),
            input,
            y_s: Tensor::new(&[indices.len(), nc], ys)?,
            y_a: Tensor::new(&[indices.len()], ya)?,
        })
    }
}

/// Shuffled partition of `0..n` into batches; the order depends only on
/// `(seed, epoch)` and the short final batch is kept.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

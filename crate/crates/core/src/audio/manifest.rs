use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use super::{AudioError, N_CLASSES, SOURCE_LABELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Self::Train),
            "val" => Some(Self::Val),
            "test" => Some(Self::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Audio path, relative to the manifest directory unless absolute.
    pub path: PathBuf,
    pub labels: [bool; N_CLASSES],
    pub annoyance: f64,
}

impl ClipRecord {
    pub fn label_vec(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    fn validate(&self) -> Result<(), String> {
        if self.clip_id.is_empty() {
            return Err("empty clip_id".into());
        }
        if !(1.0..=10.0).contains(&self.annoyance) {
            return Err(format!("annoyance {} outside [1, 10]", self.annoyance));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub records: Vec<ClipRecord>,
    /// Directory relative audio paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(split: Split, records: Vec<ClipRecord>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            split,
            records,
            base_dir: base_dir.into(),
        }
    }

    pub fn audio_path(&self, record: &ClipRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.base_dir.join(&record.path)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn header() -> Vec<String> {
    let mut h = vec!["clip_id".to_string(), "path".into(), "annoyance".into()];
    h.extend(SOURCE_LABELS.iter().map(|s| s.to_string()));
    h
}

/// Writes `clip_id,path,annoyance,<24 labels>` with 0/1 labels.
pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    let io = |e: csv::Error| AudioError::Manifest {
        path: path.to_path_buf(),
        row: 0,
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header()).map_err(io)?;
    for r in &manifest.records {
        let mut row = vec![
            r.clip_id.clone(),
            r.path.to_string_lossy().into_owned(),
            format!("{:.6}", r.annoyance),
        ];
        row.extend(r.labels.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads and validates a manifest. The split is taken from the file stem
/// (`train`, `val`, `test`), defaulting to `test`.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, AudioError> {
    let path = path.as_ref();
    let err = |row: usize, detail: String| AudioError::Manifest {
        path: path.to_path_buf(),
        row,
        detail,
    };
    let file = std::fs::File::open(path).map_err(|source| AudioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let head = rdr.headers().map_err(|e| err(0, e.to_string()))?.clone();
    let want = header();
    if head.len() != want.len() || head.iter().zip(&want).any(|(a, b)| a.trim() != b) {
        return Err(err(
            0,
            "header does not match clip_id,path,annoyance,<24 labels>".into(),
        ));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| err(row_no, e.to_string()))?;
        if row.len() != want.len() {
            return Err(err(
                row_no,
                format!("expected {} columns, found {}", want.len(), row.len()),
            ));
        }
        let annoyance: f64 = row[2]
            .trim()
            .parse()
            .map_err(|_| err(row_no, format!("bad annoyance {:?}", &row[2])))?;
        let mut labels = [false; N_CLASSES];
        for (k, slot) in labels.iter_mut().enumerate() {
            *slot = match row[3 + k].trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(err(
                        row_no,
                        format!("label {} = {other:?}, expected 0 or 1", SOURCE_LABELS[k]),
                    ))
                }
            };
        }
        let rec = ClipRecord {
            clip_id: row[0].trim().to_string(),
            path: PathBuf::from(row[1].trim()),
            labels,
            annoyance,
        };
        rec.validate().map_err(|d| err(row_no, d))?;
        if !seen.insert(rec.clip_id.clone()) {
            return Err(err(row_no, format!("duplicate clip_id {}", rec.clip_id)));
        }
        records.push(rec);
    }
    let split = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(Split::from_name)
        .unwrap_or(Split::Test);
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(DatasetManifest {
        split,
        records,
        base_dir,
    })
}

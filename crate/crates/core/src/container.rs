//! Binary tensor container shared by checkpoints and feature caches.
//!
//! Layout: the 8-byte magic `DCAFCKPT`, a little-endian `u64` header length,
//! a UTF-8 header of `key = value` lines, then the float32 little-endian
//! payloads back to back. Each tensor is described by a header line
//! `tensor = <name> <dtype> <d0,d1,..> <byte offset>`, offsets counted from
//! the start of the payload.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"DCAFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: not a container (bad magic)")]
    Magic(PathBuf),
    #[error("{path}: unsupported format version {found}")]
    Version { path: PathBuf, found: String },
    #[error("{path}: truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("{path}: bad header: {detail}")]
    Header { path: PathBuf, detail: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Header metadata plus tensors, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '=')
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        let name = name.into();
        assert!(valid_token(&name), "tensor name {name:?} must be a single token");
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor {name}");
        self.tensors.push(NamedTensor {
            name,
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("format_version = {FORMAT_VERSION}\n");
        for (k, v) in &self.meta {
            assert!(
                valid_token(k) && k != "tensor" && k != "format_version",
                "meta key {k:?}"
            );
            assert!(!v.contains('\n'), "meta value for {k} spans lines");
            header.push_str(&format!("{k} = {v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor = {} f32 {} {offset}\n", t.name, dims.join(",")));
            offset += 4 * t.data.len();
        }
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, ContainerError> {
        let trunc = |detail: String| ContainerError::Truncated {
            path: path.to_path_buf(),
            detail,
        };
        let bad = |detail: String| ContainerError::Header {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(ContainerError::Magic(path.to_path_buf()));
        }
        if bytes.len() < 16 {
            return Err(trunc("missing header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| trunc(format!("header of {hlen} bytes")))?;
        let header = std::str::from_utf8(&bytes[16..payload_start]).map_err(|e| bad(e.to_string()))?;
        let payload = &bytes[payload_start..];

        let mut meta = BTreeMap::new();
        let mut tensors = Vec::new();
        let mut version = None;
        let mut expected_offset = 0usize;
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(" = ").ok_or_else(|| bad(format!("line {line:?}")))?;
            match k {
                "format_version" => version = Some(v.to_string()),
                "tensor" => {
                    let parts: Vec<&str> = v.split(' ').collect();
                    let [name, dtype, dims, off] = parts[..] else {
                        return Err(bad(format!("tensor line {v:?}")));
                    };
                    if dtype != "f32" {
                        return Err(bad(format!("{name}: dtype {dtype}")));
                    }
                    let shape = dims
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("{name}: shape {dims}")))?;
                    let off: usize = off.parse().map_err(|_| bad(format!("{name}: offset {off}")))?;
                    if off != expected_offset {
                        return Err(bad(format!("{name}: offset {off}, expected {expected_offset}")));
                    }
                    let n: usize = shape.iter().product();
                    let end = off + 4 * n;
                    if end > payload.len() {
                        return Err(trunc(format!("{name} needs bytes {off}..{end} of {}", payload.len())));
                    }
                    let data = payload[off..end]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    expected_offset = end;
                    tensors.push(NamedTensor {
                        name: name.to_string(),
                        shape,
                        data,
                    });
                }
                _ => {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
        }
        match version.as_deref() {
            Some(v) if v == FORMAT_VERSION.to_string() => {}
            other => {
                return Err(ContainerError::Version {
                    path: path.to_path_buf(),
                    found: other.unwrap_or("missing").to_string(),
                })
            }
        }
        if expected_offset != payload.len() {
            return Err(bad(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let path = path.as_ref();
        let io = |source| ContainerError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

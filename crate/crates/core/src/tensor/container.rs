//! `LGTC` binary tensor container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LGTC"
//! 4       4     format version, u32 little-endian (1)
//! 8       8     header length H, u64 little-endian
//! 16      H     UTF-8 JSON header, space padded so that 16 + H is a multiple of 64
//! 16 + H  P     payload: little-endian tensor data, every tensor 64-byte aligned,
//!               zero padding between tensors and after the last one
//! ```
//!
//! The header records `payload_len` (P) so that a short file is detected
//! before any tensor is decoded. Offsets in the header are relative to the
//! payload start. See `docs/container.md` for a worked hex dump.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"LGTC";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGNMENT: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic bytes {0:?}, expected \"LGTC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("container truncated: need {needed} bytes, have {actual}")]
    Truncated { needed: u64, actual: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {name:?}: {reason}")]
    Entry { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ContainerError {
    /// Stable machine-readable code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            ContainerError::BadMagic(_) => "bad_magic",
            ContainerError::UnsupportedVersion(_) => "unsupported_version",
            ContainerError::Truncated { .. } => "truncated",
            ContainerError::TrailingBytes(_) => "trailing_bytes",
            ContainerError::DuplicateName(_) => "duplicate_name",
            ContainerError::Header(_) => "bad_header",
            ContainerError::Entry { .. } => "bad_entry",
            ContainerError::Io(_) => "io",
        }
    }
}

/// A tensor of either supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_scalar<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    fn byte_len(&self) -> usize {
        self.shape().iter().product::<usize>() * self.dtype().size()
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            AnyTensor::F64(t) => t
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: Map<String, Value>,
    payload_len: u64,
    tensors: Vec<EntryHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// Named tensors plus a free-form JSON metadata object.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub metadata: Map<String, Value>,
    tensors: Vec<(String, AnyTensor)>,
}

fn align_up(v: usize) -> usize {
    v.div_ceil(ALIGNMENT) * ALIGNMENT
}

impl TensorContainer {
    pub fn new(metadata: Map<String, Value>) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor; names must be unique.
    pub fn push(
        &mut self,
        name: impl Into<String>,
        tensor: impl Into<AnyTensor>,
    ) -> Result<(), ContainerError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(ContainerError::DuplicateName(name));
        }
        self.tensors.push((name, tensor.into()));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> &[(String, AnyTensor)] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut cursor = 0usize;
        for (name, tensor) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(ContainerError::DuplicateName(name.clone()));
            }
            let nbytes = tensor.byte_len();
            entries.push(EntryHeader {
                name: name.clone(),
                dtype: tensor.dtype(),
                shape: tensor.shape().to_vec(),
                offset: cursor as u64,
                nbytes: nbytes as u64,
            });
            cursor = align_up(cursor + nbytes);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            payload_len: cursor as u64,
            tensors: entries,
        };
        let mut json =
            serde_json::to_vec(&header).map_err(|e| ContainerError::Header(e.to_string()))?;
        json.resize(align_up(PREAMBLE + json.len()) - PREAMBLE, b' ');

        let mut out = Vec::with_capacity(PREAMBLE + json.len() + cursor);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let payload_start = out.len();
        for ((_, tensor), entry) in self.tensors.iter().zip(&header.tensors) {
            out.resize(payload_start + entry.offset as usize, 0);
            tensor.write_le(&mut out);
        }
        out.resize(payload_start + cursor, 0);
        Ok(out)
    }

    /// Parses and validates a container. Every structural check runs before
    /// any tensor payload is decoded.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let total = bytes.len() as u64;
        if bytes.len() < PREAMBLE {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(ContainerError::BadMagic(
                    bytes[..4].try_into().expect("4 bytes"),
                ));
            }
            return Err(ContainerError::Truncated {
                needed: PREAMBLE as u64,
                actual: total,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(ContainerError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let payload_start = (PREAMBLE as u64)
            .checked_add(header_len)
            .ok_or_else(|| ContainerError::Header("header length overflows".into()))?;
        if payload_start > total {
            return Err(ContainerError::Truncated {
                needed: payload_start,
                actual: total,
            });
        }
        if payload_start % ALIGNMENT as u64 != 0 {
            return Err(ContainerError::Header(
                "payload start is not 64-byte aligned".into(),
            ));
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start as usize])
            .map_err(|e| ContainerError::Header(e.to_string()))?;
        if header.format_version != version {
            return Err(ContainerError::Header(format!(
                "header version {} disagrees with preamble version {version}",
                header.format_version
            )));
        }
        let needed = payload_start
            .checked_add(header.payload_len)
            .ok_or_else(|| ContainerError::Header("payload length overflows".into()))?;
        if needed > total {
            return Err(ContainerError::Truncated {
                needed,
                actual: total,
            });
        }
        if needed < total {
            return Err(ContainerError::TrailingBytes(total - needed));
        }

        let mut seen = HashSet::new();
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let bad = |reason: String| ContainerError::Entry {
                name: e.name.clone(),
                reason,
            };
            if !seen.insert(e.name.as_str()) {
                return Err(ContainerError::DuplicateName(e.name.clone()));
            }
            if e.shape.is_empty() || e.shape.contains(&0) {
                return Err(bad(format!("invalid shape {:?}", e.shape)));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| bad("shape overflows".into()))?;
            if numel.checked_mul(e.dtype.size() as u64) != Some(e.nbytes) {
                return Err(bad(format!(
                    "nbytes {} does not match shape {:?}",
                    e.nbytes, e.shape
                )));
            }
            if e.offset % ALIGNMENT as u64 != 0 {
                return Err(bad(format!("offset {} is not 64-byte aligned", e.offset)));
            }
            match e.offset.checked_add(e.nbytes) {
                Some(end) if end <= header.payload_len => spans.push((e.offset, end, &e.name)),
                _ => return Err(bad("extends past the payload".into())),
            }
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(ContainerError::Entry {
                    name: pair[1].2.to_string(),
                    reason: format!("overlaps tensor {:?}", pair[0].2),
                });
            }
        }

        let payload = &bytes[payload_start as usize..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
            let tensor = match e.dtype {
                DType::F32 => AnyTensor::F32(
                    Tensor::new(
                        e.shape.clone(),
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                            .collect(),
                    )
                    .map_err(|err| ContainerError::Entry {
                        name: e.name.clone(),
                        reason: err.to_string(),
                    })?,
                ),
                DType::F64 => AnyTensor::F64(
                    Tensor::new(
                        e.shape.clone(),
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect(),
                    )
                    .map_err(|err| ContainerError::Entry {
                        name: e.name.clone(),
                        reason: err.to_string(),
                    })?,
                ),
            };
            tensors.push((e.name, tensor));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

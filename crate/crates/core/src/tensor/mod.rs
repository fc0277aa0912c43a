//! Named tensors, the parameter map, and the FTNS serialization format.

mod ftns;
mod spec;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ftns::{
    decode_entry_header, deserialize_model, encode_entry_header, read_model, serialize_model,
    write_model, header_bytes as ftns_prefix, EntryHeader, FTNS_HEADER_LEN, FTNS_MAGIC, FTNS_VERSION,
};
pub use spec::{build_synthetic_model, LayerSpec, ModelSpec, SpecError, LLAMA_3_2_1B_JSON};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("data length {actual} does not match shape {shape:?} x {dtype} ({expected} bytes)")]
    LengthMismatch {
        dtype: DType,
        shape: Vec<u64>,
        expected: u64,
        actual: u64,
    },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor names must be non-empty and at most 65535 bytes")]
    BadName,
    #[error("tensor {0:?} is unmaterialized")]
    Unmaterialized(String),
    #[error("expected {expected} tensor, found {found}")]
    WrongDType { expected: DType, found: DType },
}

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Fp32,
    Fp16,
    Bf16,
    U8,
}

impl DType {
    pub const fn width(self) -> usize {
        match self {
            DType::Fp32 => 4,
            DType::Fp16 | DType::Bf16 => 2,
            DType::U8 => 1,
        }
    }

    pub const fn tag(self) -> u8 {
        match self {
            DType::Fp32 => 0,
            DType::Fp16 => 1,
            DType::Bf16 => 2,
            DType::U8 => 3,
        }
    }

    pub const fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::Fp32),
            1 => Some(DType::Fp16),
            2 => Some(DType::Bf16),
            3 => Some(DType::U8),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::Fp32 => "fp32",
            DType::Fp16 => "fp16",
            DType::Bf16 => "bf16",
            DType::U8 => "u8",
        })
    }
}

/// A dense tensor stored as contiguous little-endian bytes.
///
/// An unmaterialized tensor carries only dtype and shape; it exists so that
/// size accounting on full-scale models does not need the weights in RAM.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<u64>,
    data: Option<Vec<u8>>,
}

pub fn element_count(shape: &[u64]) -> u64 {
    shape.iter().product()
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<u64>, data: Vec<u8>) -> Result<Self, TensorError> {
        let expected = element_count(&shape) * dtype.width() as u64;
        if data.len() as u64 != expected {
            return Err(TensorError::LengthMismatch {
                dtype,
                shape,
                expected,
                actual: data.len() as u64,
            });
        }
        Ok(Self {
            dtype,
            shape,
            data: Some(data),
        })
    }

    pub fn unmaterialized(dtype: DType, shape: Vec<u64>) -> Self {
        Self {
            dtype,
            shape,
            data: None,
        }
    }

    /// FP32 tensor from values; panics if `values.len()` disagrees with `shape`.
    pub fn from_f32(shape: Vec<u64>, values: &[f32]) -> Self {
        assert_eq!(element_count(&shape), values.len() as u64, "shape/value count");
        let mut data = Vec::with_capacity(values.len() * 4);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            dtype: DType::Fp32,
            shape,
            data: Some(data),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn element_count(&self) -> u64 {
        element_count(&self.shape)
    }

    pub fn byte_len(&self) -> u64 {
        self.element_count() * self.dtype.width() as u64
    }

    pub fn is_materialized(&self) -> bool {
        self.data.is_some()
    }

    pub fn data(&self) -> Option<&[u8]> {
        self.data.as_deref()
    }

    pub fn into_data(self) -> Option<Vec<u8>> {
        self.data
    }

    /// Decodes an FP32 tensor into values.
    pub fn to_f32_vec(&self) -> Result<Vec<f32>, TensorError> {
        if self.dtype != DType::Fp32 {
            return Err(TensorError::WrongDType {
                expected: DType::Fp32,
                found: self.dtype,
            });
        }
        let data = self
            .data
            .as_deref()
            .ok_or_else(|| TensorError::Unmaterialized(String::new()))?;
        Ok(data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Ordered map of uniquely named tensors (the "parameter dict").
#[derive(Debug, Clone, Default)]
pub struct ParameterMap {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl PartialEq for ParameterMap {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParameterMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(TensorError::BadName);
        }
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Entry at position `i` in insertion order.
    pub fn entry(&self, i: usize) -> Option<(&str, &Tensor)> {
        self.entries.get(i).map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn is_materialized(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_materialized())
    }

    /// Total tensor data bytes; works on unmaterialized maps.
    pub fn size_bytes(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.byte_len()).sum()
    }

    pub fn max_entry_bytes(&self) -> u64 {
        self.entries
            .iter()
            .map(|(_, t)| t.byte_len())
            .max()
            .unwrap_or(0)
    }

    pub fn total_elements(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.element_count()).sum()
    }
}

impl IntoIterator for ParameterMap {
    type Item = (String, Tensor);
    type IntoIter = std::vec::IntoIter<(String, Tensor)>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.into_iter()
    }
}

/// Sum of element count x dtype width over all entries.
pub fn model_size_bytes(model: &ParameterMap) -> u64 {
    model.size_bytes()
}

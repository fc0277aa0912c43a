//! Message quantization: fp16/bf16 casting and blockwise 8-bit, fp4 and nf4
//! codecs, with exact size accounting.

mod blockwise;
mod bundle;
mod cast;
mod codebook;
mod size;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::DType;

pub use blockwise::{
    dequantize_tensor, dequantize_values, quantize_tensor_blockwise, quantize_values,
    QuantizedTensor,
};
pub use bundle::{
    decode_bundle_entry_header, dequantize_message, deserialize_bundle, encode_bundle_entry_header,
    quantize_message, read_bundle, read_bundle_prefix, serialize_bundle, write_bundle, BundleDecodeError,
    BundleEntry, BundlePrefix, EntryPrefix, QuantizedBundle, FTQB_MAGIC, FTQB_VERSION,
    PASSTHROUGH_CODEBOOK,
};
pub use cast::{cast_16, cast_values, uncast_16, HalfKind};
pub use codebook::{Codebook, CodebookId};
pub use size::{size_report, size_report_with_block, SizeReport};

/// Block size used by the 8-bit codec.
pub const BLOCKWISE8_BLOCK: u32 = 4096;
/// Block size used by the 4-bit codecs.
pub const FOUR_BIT_BLOCK: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodecErrorKind {
    WrongDType { expected: DType, found: DType },
    NonFinite { index: u64 },
    CodeOutOfRange { code: u8, len: usize },
    CodebookMismatch { expected: CodebookId, found: CodebookId },
    Malformed(String),
    Unmaterialized,
}

impl fmt::Display for CodecErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::WrongDType { expected, found } => {
                write!(f, "expected {expected} input, found {found}")
            }
            Self::NonFinite { index } => write!(f, "non-finite value at element {index}"),
            Self::CodeOutOfRange { code, len } => {
                write!(f, "code {code} outside codebook of {len} levels")
            }
            Self::CodebookMismatch { expected, found } => {
                write!(f, "tensor uses codebook {expected:?}, got {found:?}")
            }
            Self::Malformed(why) => write!(f, "malformed quantized tensor: {why}"),
            Self::Unmaterialized => write!(f, "tensor has no data"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub struct CodecError {
    /// Parameter-map entry being processed, when known.
    pub entry: Option<String>,
    pub kind: CodecErrorKind,
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.entry {
            Some(name) => write!(f, "entry {name:?}: {}", self.kind),
            None => self.kind.fmt(f),
        }
    }
}

impl From<CodecErrorKind> for CodecError {
    fn from(kind: CodecErrorKind) -> Self {
        Self { entry: None, kind }
    }
}

impl CodecError {
    pub fn in_entry(mut self, name: &str) -> Self {
        self.entry.get_or_insert_with(|| name.to_owned());
        self
    }
}

/// Wire precision for quantized messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp16,
    Bf16,
    Blockwise8,
    Float4,
    NormFloat4,
}

impl Precision {
    pub const ALL: [Precision; 5] = [
        Precision::Fp16,
        Precision::Bf16,
        Precision::Blockwise8,
        Precision::Float4,
        Precision::NormFloat4,
    ];

    pub const fn bits(self) -> u32 {
        match self {
            Precision::Fp16 | Precision::Bf16 => 16,
            Precision::Blockwise8 => 8,
            Precision::Float4 | Precision::NormFloat4 => 4,
        }
    }

    pub const fn codebook(self) -> Option<CodebookId> {
        match self {
            Precision::Fp16 | Precision::Bf16 => None,
            Precision::Blockwise8 => Some(CodebookId::Linear256),
            Precision::Float4 => Some(CodebookId::Fp4E2M1),
            Precision::NormFloat4 => Some(CodebookId::Nf4),
        }
    }

    pub const fn block_size(self) -> Option<u32> {
        match self {
            Precision::Fp16 | Precision::Bf16 => None,
            Precision::Blockwise8 => Some(BLOCKWISE8_BLOCK),
            Precision::Float4 | Precision::NormFloat4 => Some(FOUR_BIT_BLOCK),
        }
    }

    pub const fn half_kind(self) -> Option<HalfKind> {
        match self {
            Precision::Fp16 => Some(HalfKind::Fp16),
            Precision::Bf16 => Some(HalfKind::Bf16),
            _ => None,
        }
    }

    pub const fn tag(self) -> u8 {
        match self {
            Precision::Fp16 => 0,
            Precision::Bf16 => 1,
            Precision::Blockwise8 => 2,
            Precision::Float4 => 3,
            Precision::NormFloat4 => 4,
        }
    }

    pub const fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::Fp16),
            1 => Some(Precision::Bf16),
            2 => Some(Precision::Blockwise8),
            3 => Some(Precision::Float4),
            4 => Some(Precision::NormFloat4),
            _ => None,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Precision::Fp16 => "fp16",
            Precision::Bf16 => "bf16",
            Precision::Blockwise8 => "blockwise8",
            Precision::Float4 => "float4",
            Precision::NormFloat4 => "normfloat4",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" => Ok(Precision::Fp16),
            "bf16" => Ok(Precision::Bf16),
            "blockwise8" | "int8" => Ok(Precision::Blockwise8),
            "float4" | "fp4" => Ok(Precision::Float4),
            "normfloat4" | "nf4" => Ok(Precision::NormFloat4),
            other => Err(format!(
                "unknown precision {other:?} (expected fp16, bf16, blockwise8, float4 or normfloat4)"
            )),
        }
    }
}

//! Federated-learning communication toolkit.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: named-tensor containers, the FTNS binary format and a
//!   synthetic model generator.
//! * [`quant`]: fp16/bf16 casting and blockwise 8-bit / fp4 / nf4 codecs,
//!   plus analytic message-size accounting.
//! * [`filter`]: the four filter points and the two-way quantization
//!   filter configuration.
//! * [`sfm`]: the streamable framed message layer (frames, drivers,
//!   chunking and reassembly).
//! * [`streaming`]: regular, container and file transfer modes, the pull
//!   based object retriever and the logical [`streaming::MemoryMeter`].
//! * [`runtime`]: controller/executor simulation with FedAvg over a toy
//!   least-squares task, and the benchmark drivers used by the CLI.

pub mod clock;
pub mod filter;
pub mod meter;
pub mod quant;
pub mod runtime;
pub mod sfm;
pub mod streaming;
pub mod tensor;
pub mod wire;

pub use filter::{FilterChain, FilterPoint, Message, MessageKind, Payload};
pub use quant::{Precision, QuantizedBundle, SizeReport};
pub use tensor::{DType, ModelSpec, ParameterMap, Tensor};

/// Bytes per mebibyte; all reported "MB" figures are MiB.
pub const MIB: u64 = 1 << 20;

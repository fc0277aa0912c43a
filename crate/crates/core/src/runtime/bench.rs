//! Benchmarks behind `bench-quant` and `bench-stream`.

use std::path::Path;
use crate::clock::Instant;

use thiserror::Error;

use crate::filter::Payload;
use crate::quant::{quantize_message, size_report, CodecError, Precision, SizeReport};
use crate::streaming::{
    lockstep, spool_payload, ContainerProducer, ContainerReceiver, FileProducer, FileReceiver,
    MemoryMeter, RegularProducer, RegularReceiver, StreamError, StreamMode,
};
use crate::tensor::{build_synthetic_model, ModelSpec, SpecError};
use crate::MIB;

pub const QUANT_CSV_HEADER: &str = "precision,model_size_mb,meta_size_mb,fp32_percent";
pub const STREAM_CSV_HEADER: &str = "setting,peak_logical_mb,job_time_s";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantRow {
    pub report: SizeReport,
}

impl QuantRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{:.2},{:.2},{:.2}",
            r.label(),
            r.payload_mb(),
            r.meta_mb(),
            r.percent_of_fp32()
        )
    }
}

/// Message sizes for each precision (`None` is plain fp32). With
/// `analytic` the sizes are computed from shapes alone; otherwise the model
/// is materialized and actually quantized.
pub fn bench_quant(
    spec: &ModelSpec,
    precisions: &[Option<Precision>],
    analytic: bool,
    seed: u64,
) -> Result<Vec<QuantRow>, BenchError> {
    let model = build_synthetic_model(spec, seed, !analytic)?;
    precisions
        .iter()
        .map(|&p| {
            let report = match (analytic, p) {
                (true, _) | (false, None) => size_report(&model, p),
                (false, Some(p)) => {
                    let bundle = quantize_message(&model, p)?;
                    SizeReport {
                        precision: Some(p),
                        payload_bytes: bundle.payload_bytes(),
                        meta_bytes: bundle.meta_bytes(),
                        fp32_bytes: size_report(&model, None).fp32_bytes,
                    }
                }
            };
            Ok(QuantRow { report })
        })
        .collect()
}

pub fn format_quant_csv(rows: &[QuantRow]) -> String {
    let mut out = format!("{QUANT_CSV_HEADER}\n");
    for row in rows {
        out.push_str(&row.csv());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamRow {
    pub mode: StreamMode,
    /// Peak bytes held by sender and receiver together.
    pub peak_bytes: u64,
    /// Serialized size of the object moved.
    pub object_bytes: u64,
    pub seconds: f64,
}

impl StreamRow {
    pub fn peak_mb(&self) -> f64 {
        self.peak_bytes as f64 / MIB as f64
    }

    pub fn csv(&self) -> String {
        format!("{},{:.2},{:.3}", self.mode, self.peak_mb(), self.seconds)
    }
}

pub fn format_stream_csv(rows: &[StreamRow]) -> String {
    let mut out = format!("{STREAM_CSV_HEADER}\n");
    for row in rows {
        out.push_str(&row.csv());
        out.push('\n');
    }
    out
}

/// Moves a materialized synthetic model from a sender to a receiver in
/// `mode`, both charging one meter, and reports the meter's peak. Frames are
/// handed over one at a time, so the peak does not depend on scheduling.
/// File mode spools the model into `workdir` first; the spool is the
/// sender's source and is not charged.
pub fn bench_stream(
    spec: &ModelSpec,
    mode: StreamMode,
    seed: u64,
    chunk_size: usize,
    workdir: &Path,
) -> Result<StreamRow, BenchError> {
    let model = build_synthetic_model(spec, seed, true)?;
    let payload = Payload::Plain(model);
    let object_bytes = payload.serialized_len();
    let meter = MemoryMeter::new();
    let m = Some(&meter);
    let started;
    match mode {
        StreamMode::Regular => {
            started = Instant::now();
            let producer = RegularProducer::for_payload(&payload, 1, chunk_size, m)?;
            let (_, blob) = lockstep(producer, RegularReceiver::new(chunk_size, m))?;
            check_len(blob.bytes.len() as u64, object_bytes)?;
        }
        StreamMode::Container => {
            let Payload::Plain(model) = &payload else { unreachable!() };
            started = Instant::now();
            let mut next = 0u64;
            let producer = ContainerProducer::new(
                model,
                move || {
                    next += 1;
                    next
                },
                chunk_size,
                m,
            );
            let (_, received) = lockstep(producer, ContainerReceiver::new(chunk_size, m))?;
            check_len(received.serialized_len(), object_bytes)?;
        }
        StreamMode::File => {
            let src = workdir.join(format!("bench-{}.src", std::process::id()));
            let dst = workdir.join(format!("bench-{}.dst", std::process::id()));
            spool_payload(&payload, &src)?;
            drop(payload);
            started = Instant::now();
            let result = transfer_file(&src, &dst, chunk_size, &meter);
            let _ = std::fs::remove_file(&src);
            let _ = std::fs::remove_file(&dst);
            check_len(result?, object_bytes)?;
        }
    }
    Ok(StreamRow {
        mode,
        peak_bytes: meter.peak(),
        object_bytes,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Copies `src` to `dst` through a file-mode stream charged to `meter`;
/// returns the bytes moved.
pub fn transfer_file(
    src: &Path,
    dst: &Path,
    chunk_size: usize,
    meter: &MemoryMeter,
) -> Result<u64, StreamError> {
    let producer = FileProducer::open(src, 1, chunk_size, Some(meter))?;
    let receiver = FileReceiver::create(dst, chunk_size, Some(meter))?;
    let (_, (_, len)) = lockstep(producer, receiver)?;
    Ok(len)
}

fn check_len(got: u64, want: u64) -> Result<(), StreamError> {
    if got == want {
        Ok(())
    } else {
        Err(StreamError::Unexpected(format!("moved {got} bytes, expected {want}")))
    }
}

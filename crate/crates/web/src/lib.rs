//! Browser bindings for three fedstream operations: a codec round trip on
//! user-supplied values, the message size table of a model spec, and the
//! peak buffered bytes of the in-memory streaming modes.
//!
//! Each export is a thin wrapper over a plain Rust function so the logic can
//! be tested natively.

use std::path::Path;
use std::str::FromStr;

use fedstream::quant::{dequantize_message, quantize_message, serialize_bundle, Precision};
use fedstream::runtime::{bench_quant, bench_stream, format_quant_csv};
use fedstream::streaming::StreamMode;
use fedstream::{ModelSpec, ParameterMap, Tensor};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Result of quantizing and restoring one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrip {
    pub restored: Vec<f32>,
    pub max_abs_error: f64,
    pub rmse: f64,
    /// Size of the encoded bundle on the wire.
    pub wire_bytes: u64,
    pub fp32_bytes: u64,
}

impl RoundTrip {
    pub fn to_json(&self) -> String {
        json!({
            "restored": self.restored,
            "max_abs_error": self.max_abs_error,
            "rmse": self.rmse,
            "wire_bytes": self.wire_bytes,
            "fp32_bytes": self.fp32_bytes,
        })
        .to_string()
    }
}

pub fn round_trip(precision: &str, values: &[f32]) -> Result<RoundTrip, String> {
    let precision = Precision::from_str(precision).map_err(|e| e.to_string())?;
    if values.is_empty() {
        return Err("no values".into());
    }
    let mut model = ParameterMap::new();
    model
        .insert("values", Tensor::from_f32(vec![values.len() as u64], values))
        .map_err(|e| e.to_string())?;
    let bundle = quantize_message(&model, precision).map_err(|e| e.to_string())?;
    let wire_bytes = serialize_bundle(&bundle).len() as u64;
    let restored = dequantize_message(&bundle)
        .map_err(|e| e.to_string())?
        .get("values")
        .expect("entry survives the round trip")
        .to_f32_vec()
        .map_err(|e| e.to_string())?;
    let (mut max_abs_error, mut sq) = (0f64, 0f64);
    for (&a, &b) in values.iter().zip(&restored) {
        let d = (a as f64 - b as f64).abs();
        max_abs_error = max_abs_error.max(d);
        sq += d * d;
    }
    Ok(RoundTrip {
        max_abs_error,
        rmse: (sq / values.len() as f64).sqrt(),
        wire_bytes,
        fp32_bytes: 4 * values.len() as u64,
        restored,
    })
}

fn load_spec(spec_json: &str) -> Result<ModelSpec, String> {
    if spec_json.trim().is_empty() {
        Ok(ModelSpec::llama_3_2_1b())
    } else {
        ModelSpec::from_json(spec_json).map_err(|e| e.to_string())
    }
}

/// Analytic size table for every precision; an empty spec means the bundled
/// Llama 3.2 1B layout.
pub fn size_table(spec_json: &str) -> Result<String, String> {
    let spec = load_spec(spec_json)?;
    let mut precisions = vec![None];
    precisions.extend(Precision::ALL.map(Some));
    let rows = bench_quant(&spec, &precisions, true, 0).map_err(|e| e.to_string())?;
    Ok(format_quant_csv(&rows))
}

/// Streams the bundled model shrunk by `scale` in regular and container mode
/// and returns the peaks as a JSON array. File mode needs a filesystem and
/// is left out.
pub fn stream_peaks(scale: u32, chunk_size: u32, seed: u32) -> Result<String, String> {
    if scale == 0 {
        return Err("scale must be at least 1".into());
    }
    fedstream::sfm::check_chunk_size(chunk_size as usize).map_err(|e| e.to_string())?;
    let spec = ModelSpec::llama_3_2_1b().scaled(scale as u64);
    let mut rows = Vec::new();
    for mode in [StreamMode::Regular, StreamMode::Container] {
        let row = bench_stream(&spec, mode, seed as u64, chunk_size as usize, Path::new("."))
            .map_err(|e| e.to_string())?;
        rows.push(json!({
            "mode": mode.name(),
            "peak_bytes": row.peak_bytes,
            "object_bytes": row.object_bytes,
        }));
    }
    Ok(serde_json::Value::Array(rows).to_string())
}

/// Returns a JSON object with `restored`, `max_abs_error`, `rmse`,
/// `wire_bytes` and `fp32_bytes`.
#[wasm_bindgen(js_name = roundTrip)]
pub fn round_trip_js(precision: &str, values: Vec<f32>) -> Result<String, JsError> {
    round_trip(precision, &values)
        .map(|r| r.to_json())
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sizeTable)]
pub fn size_table_js(spec_json: &str) -> Result<String, JsError> {
    size_table(spec_json).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = streamPeaks)]
pub fn stream_peaks_js(scale: u32, chunk_size: u32, seed: u32) -> Result<String, JsError> {
    stream_peaks(scale, chunk_size, seed).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Vec<f32> {
        (0..n).map(|i| (i as f32 * 0.37).sin() * 3.0).collect()
    }

    #[test]
    fn fp16_round_trip_is_tight() {
        let values = ramp(1000);
        let r = round_trip("fp16", &values).unwrap();
        assert_eq!(r.restored.len(), values.len());
        // fp16 has an 11-bit significand: relative error at most 2^-11
        assert!(r.max_abs_error <= 3.0 / 2048.0);
        assert!(r.wire_bytes < r.fp32_bytes);
    }

    #[test]
    fn four_bit_error_is_bounded_by_block_absmax() {
        let values = ramp(640);
        for p in ["float4", "normfloat4"] {
            let r = round_trip(p, &values).unwrap();
            // widest gap in either 4-bit table is below 1/3 of the block absmax
            assert!(r.max_abs_error <= 3.0 / 6.0 + 1e-6, "{p}: {}", r.max_abs_error);
            assert!(r.rmse > 0.0);
        }
    }

    #[test]
    fn bad_input_is_an_error() {
        assert!(round_trip("int3", &[1.0]).is_err());
        assert!(round_trip("fp16", &[]).is_err());
        assert!(round_trip("blockwise8", &[f32::NAN]).is_err());
        assert!(stream_peaks(0, 1 << 20, 0).is_err());
        assert!(size_table("{").is_err());
    }

    #[test]
    fn size_table_has_all_precisions() {
        let csv = size_table("").unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("fp32,5716.26,"));
        assert!(lines.iter().any(|l| l.starts_with("normfloat4,714.53,")));
    }

    #[test]
    fn container_peak_is_below_regular() {
        let json: serde_json::Value =
            serde_json::from_str(&stream_peaks(512, 1 << 16, 1).unwrap()).unwrap();
        let rows = json.as_array().unwrap();
        assert_eq!(rows[0]["mode"], "regular");
        let regular = rows[0]["peak_bytes"].as_u64().unwrap();
        let container = rows[1]["peak_bytes"].as_u64().unwrap();
        let object = rows[0]["object_bytes"].as_u64().unwrap();
        assert!(regular >= object);
        assert!(container < regular);
    }
}

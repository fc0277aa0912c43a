//! Analytic message-size accounting (no materialization needed).

use serde::Serialize;

use super::Precision;
use crate::tensor::{DType, ParameterMap};
use crate::MIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SizeReport {
    /// `None` is the uncompressed fp32 baseline.
    pub precision: Option<Precision>,
    pub payload_bytes: u64,
    pub meta_bytes: u64,
    pub fp32_bytes: u64,
}

impl SizeReport {
    pub fn label(&self) -> &'static str {
        self.precision.map_or("fp32", Precision::name)
    }

    pub fn payload_mb(&self) -> f64 {
        self.payload_bytes as f64 / MIB as f64
    }

    pub fn meta_mb(&self) -> f64 {
        self.meta_bytes as f64 / MIB as f64
    }

    pub fn fp32_mb(&self) -> f64 {
        self.fp32_bytes as f64 / MIB as f64
    }

    pub fn total_bytes(&self) -> u64 {
        self.payload_bytes + self.meta_bytes
    }

    /// (payload + meta) / fp32 x 100, rounded to two decimals.
    pub fn percent_of_fp32(&self) -> f64 {
        if self.fp32_bytes == 0 {
            return 0.0;
        }
        let pct = self.total_bytes() as f64 / self.fp32_bytes as f64 * 100.0;
        (pct * 100.0).round() / 100.0
    }
}

/// Size of `model` on the wire at `precision`, using the codec's default
/// block size.
pub fn size_report(model: &ParameterMap, precision: Option<Precision>) -> SizeReport {
    size_report_with_block(model, precision, precision.and_then(Precision::block_size))
}

/// Like [`size_report`] with an explicit block size for blockwise codecs.
pub fn size_report_with_block(
    model: &ParameterMap,
    precision: Option<Precision>,
    block_size: Option<u32>,
) -> SizeReport {
    let mut payload = 0u64;
    let mut meta = 0u64;
    let mut fp32 = 0u64;
    for (_, t) in model.iter() {
        let n = t.element_count();
        fp32 += n * 4;
        let Some(p) = precision.filter(|_| t.dtype() == DType::Fp32) else {
            payload += t.byte_len();
            continue;
        };
        payload += (n * u64::from(p.bits())).div_ceil(8);
        if let (Some(cb), Some(block)) = (p.codebook(), block_size) {
            meta += 4 * n.div_ceil(u64::from(block)) + 4 * cb.len() as u64;
        }
    }
    SizeReport {
        precision,
        payload_bytes: payload,
        meta_bytes: meta,
        fp32_bytes: fp32,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_message;
    use crate::tensor::{build_synthetic_model, ModelSpec, Tensor};

    fn llama() -> ParameterMap {
        build_synthetic_model(&ModelSpec::llama_3_2_1b(), 0, false).unwrap()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-12)
    }

    #[test]
    fn llama_rows() {
        let m = llama();
        let fp32 = size_report(&m, None);
        assert!(close(fp32.payload_mb(), 5716.26, 1e-3));
        assert_eq!(fp32.meta_bytes, 0);
        assert_eq!(fp32.percent_of_fp32(), 100.0);

        for p in [Precision::Fp16, Precision::Bf16] {
            let r = size_report(&m, Some(p));
            assert!(close(r.payload_mb(), 2858.13, 1e-3));
            assert_eq!(r.meta_bytes, 0);
            assert_eq!(r.percent_of_fp32(), 50.0);
        }

        let r = size_report(&m, Some(Precision::Blockwise8));
        assert!(close(r.payload_mb(), 1429.06, 1e-3));
        assert!(close(r.meta_mb(), 1.54, 0.02));
        assert_eq!(r.percent_of_fp32(), 25.03);

        for p in [Precision::Float4, Precision::NormFloat4] {
            let r = size_report(&m, Some(p));
            assert!(close(r.payload_mb(), 714.53, 1e-3));
            assert!(close(r.meta_mb(), 89.33, 0.02));
            assert_eq!(r.percent_of_fp32(), 14.06);
        }
    }

    #[test]
    fn meta_formula_by_integer_arithmetic() {
        // independent recount over the bundled layer table
        let spec = ModelSpec::llama_3_2_1b();
        let mut absmax8 = 0u64;
        let mut absmax4 = 0u64;
        let mut tensors = 0u64;
        for layer in &spec.layers {
            let r = u64::from(layer.repeat);
            absmax8 += r * layer.elements.div_ceil(4096);
            absmax4 += r * layer.elements.div_ceil(64);
            tensors += r;
        }
        assert_eq!(tensors, 147);
        let m = llama();
        assert_eq!(
            size_report(&m, Some(Precision::Blockwise8)).meta_bytes,
            4 * absmax8 + 4 * 256 * tensors
        );
        assert_eq!(
            size_report(&m, Some(Precision::NormFloat4)).meta_bytes,
            4 * absmax4 + 4 * 16 * tensors
        );
    }

    #[test]
    fn analytic_matches_materialized_bundle() {
        let spec = ModelSpec::llama_3_2_1b().scaled(1 << 12);
        let m = build_synthetic_model(&spec, 5, true).unwrap();
        for p in Precision::ALL {
            let b = quantize_message(&m, p).unwrap();
            let r = size_report(&m, Some(p));
            assert_eq!(r.payload_bytes, b.payload_bytes(), "{p}");
            assert_eq!(r.meta_bytes, b.meta_bytes(), "{p}");
        }
    }

    #[test]
    fn odd_four_bit_tensors_round_up() {
        let mut m = ParameterMap::new();
        m.insert("w", Tensor::from_f32(vec![3], &[1.0, 2.0, 3.0])).unwrap();
        let r = size_report(&m, Some(Precision::NormFloat4));
        assert_eq!(r.payload_bytes, 2);
        assert_eq!(r.meta_bytes, 4 + 64);
        assert_eq!(size_report(&ParameterMap::new(), None).percent_of_fp32(), 0.0);
    }
}

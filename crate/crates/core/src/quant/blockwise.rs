//! Absmax blockwise quantization over a codebook.

use super::codebook::{Codebook, CodebookId};
use super::{CodecError, CodecErrorKind};
use crate::tensor::{element_count, DType, Tensor};

/// Packed codes plus per-block scales for one tensor.
///
/// 4-bit codes are packed two per byte, first element in the high nibble.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub original_dtype: DType,
    pub original_shape: Vec<u64>,
    pub codebook_id: CodebookId,
    pub block_size: u32,
    pub packed: Vec<u8>,
    pub absmax: Vec<f32>,
    pub pad_count: u8,
}

impl QuantizedTensor {
    pub fn element_count(&self) -> u64 {
        element_count(&self.original_shape)
    }

    pub fn block_count(&self) -> u64 {
        self.element_count().div_ceil(u64::from(self.block_size))
    }

    pub fn expected_packed_len(&self) -> u64 {
        (self.element_count() * u64::from(self.codebook_id.bits())).div_ceil(8)
    }

    /// Absmax array plus one fp32 codebook.
    pub fn meta_bytes(&self) -> u64 {
        4 * self.absmax.len() as u64 + 4 * self.codebook_id.len() as u64
    }

    fn validate(&self) -> Result<(), CodecErrorKind> {
        let n = self.element_count();
        if self.block_size == 0 {
            return Err(CodecErrorKind::Malformed("block size is zero".into()));
        }
        if self.absmax.len() as u64 != self.block_count() {
            return Err(CodecErrorKind::Malformed(format!(
                "{} absmax values for {} blocks",
                self.absmax.len(),
                self.block_count()
            )));
        }
        if self.packed.len() as u64 != self.expected_packed_len() {
            return Err(CodecErrorKind::Malformed(format!(
                "packed length {} != {}",
                self.packed.len(),
                self.expected_packed_len()
            )));
        }
        let want_pad = u8::from(self.codebook_id.bits() == 4 && n % 2 == 1);
        if self.pad_count != want_pad {
            return Err(CodecErrorKind::Malformed(format!(
                "pad count {} != {want_pad}",
                self.pad_count
            )));
        }
        if self.absmax.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(CodecErrorKind::Malformed(
                "absmax must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Code of element `i`.
    fn code(&self, i: usize) -> u8 {
        if self.codebook_id.bits() == 8 {
            self.packed[i]
        } else {
            let byte = self.packed[i / 2];
            if i % 2 == 0 {
                byte >> 4
            } else {
                byte & 0x0f
            }
        }
    }
}

pub fn quantize_values(
    values: &[f32],
    shape: Vec<u64>,
    codebook: &Codebook,
    block_size: u32,
) -> Result<QuantizedTensor, CodecError> {
    if block_size == 0 {
        return Err(CodecErrorKind::Malformed("block size is zero".into()).into());
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(CodecErrorKind::NonFinite { index: index as u64 }.into());
    }
    let bits = codebook.bits();
    let mut codes = Vec::with_capacity(values.len() + 1);
    let mut absmax = Vec::with_capacity(values.len().div_ceil(block_size as usize));
    for block in values.chunks(block_size as usize) {
        let scale = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        absmax.push(scale);
        if scale == 0.0 {
            codes.extend(std::iter::repeat_n(codebook.zero_code(), block.len()));
        } else {
            codes.extend(block.iter().map(|&v| codebook.nearest(v / scale)));
        }
    }
    let mut pad_count = 0;
    let packed = if bits == 8 {
        codes
    } else {
        if codes.len() % 2 == 1 {
            codes.push(codebook.zero_code());
            pad_count = 1;
        }
        codes.chunks_exact(2).map(|p| (p[0] << 4) | p[1]).collect()
    };
    Ok(QuantizedTensor {
        original_dtype: DType::Fp32,
        original_shape: shape,
        codebook_id: codebook.id(),
        block_size,
        packed,
        absmax,
        pad_count,
    })
}

/// Quantizes an FP32 tensor block by block: each block is scaled by its
/// absolute maximum and every element is replaced by its nearest level.
pub fn quantize_tensor_blockwise(
    t: &Tensor,
    codebook: &Codebook,
    block_size: u32,
) -> Result<QuantizedTensor, CodecError> {
    if t.dtype() != DType::Fp32 {
        return Err(CodecErrorKind::WrongDType {
            expected: DType::Fp32,
            found: t.dtype(),
        }
        .into());
    }
    let values = t
        .to_f32_vec()
        .map_err(|_| CodecError::from(CodecErrorKind::Unmaterialized))?;
    quantize_values(&values, t.shape().to_vec(), codebook, block_size)
}

pub fn dequantize_values(q: &QuantizedTensor, codebook: &Codebook) -> Result<Vec<f32>, CodecError> {
    if q.codebook_id != codebook.id() {
        return Err(CodecErrorKind::CodebookMismatch {
            expected: q.codebook_id,
            found: codebook.id(),
        }
        .into());
    }
    q.validate()?;
    let n = q.element_count() as usize;
    let levels = codebook.values();
    let block = q.block_size as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let code = q.code(i);
        let level = *levels.get(code as usize).ok_or(CodecErrorKind::CodeOutOfRange {
            code,
            len: levels.len(),
        })?;
        let scale = q.absmax[i / block];
        out.push(if scale == 0.0 { 0.0 } else { level * scale });
    }
    Ok(out)
}

/// Restores an FP32 tensor of the original shape; padding is dropped.
pub fn dequantize_tensor(q: &QuantizedTensor, codebook: &Codebook) -> Result<Tensor, CodecError> {
    let values = dequantize_values(q, codebook)?;
    Ok(Tensor::from_f32(q.original_shape.clone(), &values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin() -> Codebook {
        Codebook::build(CodebookId::Linear256)
    }

    #[test]
    fn linear_block_round_trip_within_one_step() {
        let x = [0.5f32, -1.0, 0.25, 0.75];
        let q = quantize_values(&x, vec![4], &lin(), 4).unwrap();
        assert_eq!(q.absmax, vec![1.0]);
        let back = dequantize_values(&q, &lin()).unwrap();
        // brute-force oracle: nearest level over all 256 codes
        for (a, b) in x.iter().zip(&back) {
            let best = lin()
                .values()
                .iter()
                .map(|l| (l - a).abs())
                .fold(f32::INFINITY, f32::min);
            assert_eq!((a - b).abs(), best);
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn zero_block_dequantizes_to_exact_zero() {
        for id in [CodebookId::Linear256, CodebookId::Fp4E2M1, CodebookId::Nf4] {
            let cb = Codebook::build(id);
            let q = quantize_values(&[0.0; 5], vec![5], &cb, 4).unwrap();
            assert_eq!(q.absmax, vec![0.0, 0.0]);
            let back = dequantize_values(&q, &cb).unwrap();
            assert!(back.iter().all(|v| v.to_bits() == 0));
        }
    }

    #[test]
    fn fp4_absmax_element_is_exact() {
        let cb = Codebook::build(CodebookId::Fp4E2M1);
        let q = quantize_values(&[6.0], vec![1], &cb, 64).unwrap();
        assert_eq!(q.absmax, vec![6.0]);
        assert_eq!(q.pad_count, 1);
        assert_eq!(q.packed.len(), 1);
        assert_eq!(cb.values()[(q.packed[0] >> 4) as usize], 1.0);
        assert_eq!(dequantize_values(&q, &cb).unwrap(), vec![6.0]);
    }

    #[test]
    fn nibble_packing_order() {
        let cb = Codebook::build(CodebookId::Nf4);
        let q = quantize_values(&[-1.0, 1.0, 0.0], vec![3], &cb, 64).unwrap();
        assert_eq!(q.packed, vec![0x0f, 0x77]);
        assert_eq!(dequantize_values(&q, &cb).unwrap(), vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cb = lin();
        let err = quantize_values(&[1.0, f32::NAN], vec![2], &cb, 4).unwrap_err();
        assert_eq!(err.kind, CodecErrorKind::NonFinite { index: 1 });
        let err = quantize_values(&[f32::INFINITY], vec![1], &cb, 4).unwrap_err();
        assert_eq!(err.kind, CodecErrorKind::NonFinite { index: 0 });
        let half = Tensor::new(DType::Fp16, vec![1], vec![0, 0]).unwrap();
        assert!(matches!(
            quantize_tensor_blockwise(&half, &cb, 4).unwrap_err().kind,
            CodecErrorKind::WrongDType { .. }
        ));
    }

    #[test]
    fn malformed_tensors_are_rejected() {
        let cb = Codebook::build(CodebookId::Nf4);
        let mut q = quantize_values(&[1.0; 10], vec![10], &cb, 4).unwrap();
        q.absmax.pop();
        assert!(matches!(
            dequantize_values(&q, &cb).unwrap_err().kind,
            CodecErrorKind::Malformed(_)
        ));
        let q = quantize_values(&[1.0; 10], vec![10], &cb, 4).unwrap();
        assert!(matches!(
            dequantize_values(&q, &lin()).unwrap_err().kind,
            CodecErrorKind::CodebookMismatch { .. }
        ));
    }

    #[test]
    fn shapes_survive() {
        let cb = Codebook::build(CodebookId::Nf4);
        let t = Tensor::from_f32(vec![3, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
        let q = quantize_tensor_blockwise(&t, &cb, 4).unwrap();
        assert_eq!(q.absmax.len(), 3);
        assert_eq!(q.packed.len(), 5);
        let back = dequantize_tensor(&q, &cb).unwrap();
        assert_eq!(back.shape(), &[3, 3]);
    }
}

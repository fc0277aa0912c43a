//! 16-bit cast-and-crop.

use half::{bf16, f16};

use super::{CodecError, CodecErrorKind};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfKind {
    Fp16,
    Bf16,
}

impl HalfKind {
    pub fn dtype(self) -> DType {
        match self {
            HalfKind::Fp16 => DType::Fp16,
            HalfKind::Bf16 => DType::Bf16,
        }
    }
}

/// Round-to-nearest-even cast; finite values outside the target range are
/// clamped to the largest finite target value.
pub fn cast_values(values: &[f32], kind: HalfKind) -> Result<Vec<u8>, CodecError> {
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(CodecErrorKind::NonFinite { index: index as u64 }.into());
    }
    let mut out = Vec::with_capacity(values.len() * 2);
    match kind {
        HalfKind::Fp16 => {
            let max = f16::MAX.to_f32();
            for v in values {
                out.extend_from_slice(&f16::from_f32(v.clamp(-max, max)).to_le_bytes());
            }
        }
        HalfKind::Bf16 => {
            let max = bf16::MAX.to_f32();
            for v in values {
                out.extend_from_slice(&bf16::from_f32(v.clamp(-max, max)).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn cast_16(t: &Tensor, kind: HalfKind) -> Result<Tensor, CodecError> {
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
    let data = cast_values(&values, kind)?;
    Ok(Tensor::new(kind.dtype(), t.shape().to_vec(), data).expect("two bytes per element"))
}

/// Widens an FP16 or BF16 tensor to FP32 exactly.
pub fn uncast_16(t: &Tensor) -> Result<Tensor, CodecError> {
    let data = t
        .data()
        .ok_or_else(|| CodecError::from(CodecErrorKind::Unmaterialized))?;
    let widen: fn([u8; 2]) -> f32 = match t.dtype() {
        DType::Fp16 => |b| f16::from_le_bytes(b).to_f32(),
        DType::Bf16 => |b| bf16::from_le_bytes(b).to_f32(),
        other => {
            return Err(CodecErrorKind::WrongDType {
                expected: DType::Fp16,
                found: other,
            }
            .into())
        }
    };
    let values: Vec<f32> = data.chunks_exact(2).map(|c| widen([c[0], c[1]])).collect();
    Ok(Tensor::from_f32(t.shape().to_vec(), &values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(x: f32, kind: HalfKind) -> f32 {
        let t = Tensor::from_f32(vec![1], &[x]);
        uncast_16(&cast_16(&t, kind).unwrap()).unwrap().to_f32_vec().unwrap()[0]
    }

    #[test]
    fn representable_values_are_exact() {
        for x in [0.0, 1.0, -2.5, 0.125, 65504.0] {
            assert_eq!(round_trip(x, HalfKind::Fp16), x);
        }
        for x in [1.0, -3.0, 0.5] {
            assert_eq!(round_trip(x, HalfKind::Bf16), x);
        }
    }

    #[test]
    fn out_of_range_is_cropped() {
        assert_eq!(round_trip(70000.0, HalfKind::Fp16), 65504.0);
        assert_eq!(round_trip(-1e30, HalfKind::Fp16), -65504.0);
        assert_eq!(round_trip(f32::MAX, HalfKind::Bf16), bf16::MAX.to_f32());
    }

    #[test]
    fn bf16_rounds_to_nearest_even() {
        // 1.0000001 is 1 + 2^-23; bf16 keeps 7 mantissa bits
        assert_eq!(round_trip(1.000_000_1, HalfKind::Bf16), 1.0);
        // exactly halfway between 1.0 and 1 + 2^-7 rounds to the even mantissa
        assert_eq!(round_trip(1.0 + 2f32.powi(-8), HalfKind::Bf16), 1.0);
        assert_eq!(
            round_trip(1.0 + 3.0 * 2f32.powi(-8), HalfKind::Bf16),
            1.0 + 2.0 * 2f32.powi(-7)
        );
    }

    #[test]
    fn nan_is_rejected() {
        let t = Tensor::from_f32(vec![2], &[1.0, f32::NAN]);
        assert_eq!(
            cast_16(&t, HalfKind::Fp16).unwrap_err().kind,
            CodecErrorKind::NonFinite { index: 1 }
        );
    }
}

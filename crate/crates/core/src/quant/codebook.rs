//! Normalized quantization levels for the blockwise codecs.

use std::sync::OnceLock;

use statrs::distribution::{ContinuousCDF, Normal};

/// Identifies a codebook on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodebookId {
    Linear256,
    Fp4E2M1,
    Nf4,
}

impl CodebookId {
    pub const fn tag(self) -> u8 {
        match self {
            CodebookId::Linear256 => 0,
            CodebookId::Fp4E2M1 => 1,
            CodebookId::Nf4 => 2,
        }
    }

    pub const fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(CodebookId::Linear256),
            1 => Some(CodebookId::Fp4E2M1),
            2 => Some(CodebookId::Nf4),
            _ => None,
        }
    }

    pub const fn bits(self) -> u32 {
        match self {
            CodebookId::Linear256 => 8,
            CodebookId::Fp4E2M1 | CodebookId::Nf4 => 4,
        }
    }

    /// Number of code slots, which is also the number of fp32 values the
    /// codebook contributes to quantization metadata.
    pub const fn len(self) -> usize {
        1 << self.bits()
    }
}

/// Value table indexed by code, plus a sorted view for nearest-level search.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    id: CodebookId,
    values: Vec<f32>,
    /// Distinct levels ascending, each with the code that encodes it.
    sorted: Vec<(f32, u8)>,
    zero_code: u8,
}

/// Probability offset used for the outermost NF4 quantile:
/// the midpoint of 1 - 1/32 and 1 - 1/30.
const NF4_OFFSET: f64 = 1.0 - (1.0 / 32.0 + 1.0 / 30.0) / 2.0;

impl Codebook {
    /// Process-wide instance for `id`, built on first use.
    pub fn shared(id: CodebookId) -> &'static Codebook {
        static BOOKS: [OnceLock<Codebook>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
        BOOKS[id.tag() as usize].get_or_init(|| Codebook::build(id))
    }

    pub fn build(id: CodebookId) -> Self {
        let values = match id {
            CodebookId::Linear256 => (0..256).map(|k| -1.0 + 2.0 * k as f32 / 255.0).collect(),
            CodebookId::Fp4E2M1 => (0u8..16).map(decode_e2m1).map(|v| v / 6.0).collect(),
            CodebookId::Nf4 => nf4_levels(),
        };
        Self::from_values(id, values)
    }

    fn from_values(id: CodebookId, values: Vec<f32>) -> Self {
        let mut sorted: Vec<(f32, u8)> = Vec::with_capacity(values.len());
        for (code, &v) in values.iter().enumerate() {
            // -0.0 == 0.0, so the first code for a level wins
            if !sorted.iter().any(|&(l, _)| l == v) {
                sorted.push((v, code as u8));
            }
        }
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let zero_code = sorted
            .iter()
            .min_by(|a, b| a.0.abs().total_cmp(&b.0.abs()))
            .map(|&(_, c)| c)
            .expect("codebook is non-empty");
        Self {
            id,
            values,
            sorted,
            zero_code,
        }
    }

    pub fn id(&self) -> CodebookId {
        self.id
    }

    pub fn bits(&self) -> u32 {
        self.id.bits()
    }

    /// Level for each code index.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Distinct levels in ascending order.
    pub fn levels(&self) -> impl Iterator<Item = f32> + '_ {
        self.sorted.iter().map(|&(v, _)| v)
    }

    /// Code of the smallest-magnitude level; used for all-zero blocks and padding.
    pub fn zero_code(&self) -> u8 {
        self.zero_code
    }

    pub fn max_adjacent_gap(&self) -> f32 {
        self.sorted
            .windows(2)
            .map(|w| w[1].0 - w[0].0)
            .fold(0.0, f32::max)
    }

    /// Code of the level nearest to `x`; ties go to the smaller magnitude,
    /// then to the lower code.
    pub fn nearest(&self, x: f32) -> u8 {
        let idx = self.sorted.partition_point(|&(l, _)| l < x);
        if idx == 0 {
            return self.sorted[0].1;
        }
        if idx == self.sorted.len() {
            return self.sorted[idx - 1].1;
        }
        let (lo, lo_code) = self.sorted[idx - 1];
        let (hi, hi_code) = self.sorted[idx];
        let (dlo, dhi) = (x - lo, hi - x);
        if dlo < dhi {
            lo_code
        } else if dhi < dlo {
            hi_code
        } else if lo.abs() < hi.abs() || (lo.abs() == hi.abs() && lo_code < hi_code) {
            lo_code
        } else {
            hi_code
        }
    }
}

/// Decodes a 4-bit E2M1 code (sign, 2 exponent bits, 1 mantissa bit, bias 1).
fn decode_e2m1(code: u8) -> f32 {
    let sign = if code & 0b1000 != 0 { -1.0 } else { 1.0 };
    let exp = (code >> 1) & 0b11;
    let man = f32::from(code & 1);
    let mag = if exp == 0 {
        man * 0.5
    } else {
        (1u32 << (exp - 1)) as f32 * (1.0 + man / 2.0)
    };
    sign * mag
}

/// Normal-quantile levels: 8 positive quantiles on a 9-point probability
/// grid from `NF4_OFFSET` down to 1/2, 7 negative ones on an 8-point grid,
/// an exact zero, all normalized by the outermost quantile.
fn nf4_levels() -> Vec<f32> {
    let normal = Normal::standard();
    let grid = |points: usize| -> Vec<f64> {
        (0..points)
            .map(|i| NF4_OFFSET + (0.5 - NF4_OFFSET) * i as f64 / (points - 1) as f64)
            .collect()
    };
    let scale = normal.inverse_cdf(NF4_OFFSET);
    let (pos_grid, neg_grid) = (grid(9), grid(8));
    let positive = pos_grid[..8].iter().map(|&p| normal.inverse_cdf(p) / scale);
    let negative = neg_grid[..7].iter().map(|&p| -normal.inverse_cdf(p) / scale);
    let mut levels: Vec<f64> = positive.chain(negative).chain([0.0]).collect();
    levels.sort_by(f64::total_cmp);
    let mut out: Vec<f32> = levels.into_iter().map(|v| v as f32).collect();
    out[0] = -1.0;
    out[15] = 1.0;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_closed_form() {
        let cb = Codebook::build(CodebookId::Linear256);
        assert_eq!(cb.values().len(), 256);
        assert_eq!(cb.values()[0], -1.0);
        assert!((cb.values()[1] - -0.992_156_9).abs() < 1e-6);
        assert!((cb.values()[2] - -0.984_313_7).abs() < 1e-6);
        assert_eq!(cb.values()[255], 1.0);
        assert!(cb.values().windows(2).all(|w| w[0] < w[1]));
        assert!((cb.max_adjacent_gap() - 2.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn fp4_levels_match_e2m1_enumeration() {
        // enumerate sign/exponent/mantissa directly
        let mut expected = Vec::new();
        for exp in 0..4u32 {
            for man in 0..2u32 {
                let v = if exp == 0 {
                    0.5 * man as f64
                } else {
                    2f64.powi(exp as i32 - 1) * (1.0 + man as f64 / 2.0)
                };
                expected.push(v / 6.0);
            }
        }
        let cb = Codebook::build(CodebookId::Fp4E2M1);
        let positive: Vec<f64> = cb.values()[..8].iter().map(|&v| v as f64).collect();
        for (a, b) in positive.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-7);
        }
        let want = [0.0, 1. / 12., 1. / 6., 0.25, 1. / 3., 0.5, 2. / 3., 1.0];
        for (a, b) in positive.iter().zip(want) {
            assert!((a - b).abs() < 1e-7);
        }
        for code in 8..16 {
            assert_eq!(cb.values()[code], -cb.values()[code - 8]);
        }
        // 15 distinct levels; zero encodes as +0
        assert_eq!(cb.levels().count(), 15);
        assert_eq!(cb.zero_code(), 0);
        assert_eq!(cb.levels().next(), Some(-1.0));
        assert_eq!(cb.levels().last(), Some(1.0));
    }

    #[test]
    fn nf4_against_high_precision_quantiles() {
        // inverse normal CDF evaluated with 30-digit arithmetic
        const ORACLE: [f64; 16] = [
            -1.0,
            -0.696_192_805_632_343_37,
            -0.525_072_959_446_500_91,
            -0.394_917_425_919_907_28,
            -0.284_441_308_921_082_27,
            -0.184_773_402_800_455_75,
            -0.091_049_975_985_780_497,
            0.0,
            0.079_580_314_958_409_123,
            0.160_930_144_380_290_81,
            0.246_112_251_347_459_55,
            0.337_915_136_713_128_02,
            0.440_709_731_864_216_45,
            0.562_616_887_969_985_18,
            0.722_956_644_159_473_76,
            1.0,
        ];
        let cb = Codebook::build(CodebookId::Nf4);
        for (got, want) in cb.values().iter().zip(ORACLE) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert_eq!(cb.values()[7], 0.0);
        assert_eq!(cb.zero_code(), 7);
        assert!(cb.values().windows(2).all(|w| w[0] < w[1]));
        assert!((cb.values()[14] - 0.7230).abs() < 1e-4);
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        for id in [CodebookId::Linear256, CodebookId::Fp4E2M1, CodebookId::Nf4] {
            let cb = Codebook::build(id);
            for i in -1100..=1100 {
                let x = i as f32 / 1000.0;
                let code = cb.nearest(x);
                let d = (cb.values()[code as usize] - x).abs();
                let best = cb
                    .values()
                    .iter()
                    .map(|v| (v - x).abs())
                    .fold(f32::INFINITY, f32::min);
                assert_eq!(d, best, "{id:?} x={x}");
            }
        }
    }

    #[test]
    fn ties_prefer_smaller_magnitude() {
        let cb = Codebook::from_values(CodebookId::Nf4, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(cb.nearest(0.25), 2);
        assert_eq!(cb.nearest(-0.25), 2);
        assert_eq!(cb.nearest(0.75), 3);
        assert_eq!(cb.nearest(-0.75), 1);
        assert_eq!(cb.nearest(1.5), 4);
        let sym = Codebook::from_values(CodebookId::Nf4, vec![-1.0, -0.25, 0.25, 1.0]);
        assert_eq!(sym.nearest(0.0), 1);
    }
}

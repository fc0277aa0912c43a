//! Layer-layout specifications and the synthetic model generator.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{element_count, DType, ParameterMap, Tensor};

/// Layer layout of Llama-3.2-1B: embeddings, 16 blocks of 9 tensors, final
/// norm and lm_head.
pub const LLAMA_3_2_1B_JSON: &str = include_str!("../../specs/llama3.2-1b.json");

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("invalid model spec JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("layer {name:?}: {reason}")]
    InvalidLayer { name: String, reason: String },
    #[error("duplicate expanded layer name {0:?}")]
    DuplicateName(String),
}

/// One row of a model spec. `repeat > 1` expands `name` by substituting the
/// block index for `index_placeholder`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub elements: u64,
    pub dtype: DType,
    #[serde(default = "one")]
    pub repeat: u32,
    #[serde(default)]
    pub index_placeholder: Option<String>,
    /// Optional tensor shape; defaults to `[elements]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<u64>>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn from_json(json: &str) -> Result<Self, SpecError> {
        let spec: ModelSpec = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn llama_3_2_1b() -> Self {
        Self::from_json(LLAMA_3_2_1B_JSON).expect("bundled spec is valid")
    }

    /// Checks per-layer invariants and that expansion yields unique names.
    pub fn validate(&self) -> Result<(), SpecError> {
        for layer in &self.layers {
            let bad = |reason: &str| SpecError::InvalidLayer {
                name: layer.name.clone(),
                reason: reason.to_owned(),
            };
            if layer.elements == 0 {
                return Err(bad("element count must be positive"));
            }
            if layer.repeat == 0 {
                return Err(bad("repeat must be at least 1"));
            }
            if let Some(shape) = &layer.shape {
                if element_count(shape) != layer.elements {
                    return Err(bad("shape does not multiply to the element count"));
                }
            }
            if layer.repeat > 1 {
                match &layer.index_placeholder {
                    Some(p) if !p.is_empty() && layer.name.contains(p.as_str()) => {}
                    _ => return Err(bad("repeated layer needs a placeholder present in its name")),
                }
            }
        }
        let mut seen = HashSet::new();
        for (name, _) in self.expand() {
            if name.is_empty() || name.len() > u16::MAX as usize {
                return Err(SpecError::InvalidLayer {
                    name,
                    reason: "expanded name must be 1..=65535 bytes".into(),
                });
            }
            if !seen.insert(name.clone()) {
                return Err(SpecError::DuplicateName(name));
            }
        }
        Ok(())
    }

    /// Concrete `(name, layer)` pairs. Consecutive repeated rows that share
    /// the same placeholder and repeat count form one block group and are
    /// expanded block by block, so `layers.0.*` precedes `layers.1.*`.
    pub fn expand(&self) -> Vec<(String, &LayerSpec)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.layers.len() {
            let head = &self.layers[i];
            if head.repeat <= 1 {
                out.push((head.name.clone(), head));
                i += 1;
                continue;
            }
            let mut end = i + 1;
            while end < self.layers.len()
                && self.layers[end].repeat == head.repeat
                && self.layers[end].index_placeholder == head.index_placeholder
            {
                end += 1;
            }
            let placeholder = head.index_placeholder.as_deref().unwrap_or_default();
            for block in 0..head.repeat {
                for layer in &self.layers[i..end] {
                    let name = if placeholder.is_empty() {
                        layer.name.clone()
                    } else {
                        layer.name.replace(placeholder, &block.to_string())
                    };
                    out.push((name, layer));
                }
            }
            i = end;
        }
        out
    }

    pub fn total_elements(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| l.elements * u64::from(l.repeat))
            .sum()
    }

    /// Divides every layer's element count by `denominator` (rounding up)
    /// and flattens shapes to one dimension.
    pub fn scaled(&self, denominator: u64) -> Self {
        assert!(denominator >= 1, "scale denominator must be >= 1");
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    elements: l.elements.div_ceil(denominator),
                    shape: if denominator == 1 { l.shape.clone() } else { None },
                    ..l.clone()
                })
                .collect(),
        }
    }
}

/// Builds one tensor per expanded layer. Materialized weights are uniform in
/// [-1, 1), drawn from a ChaCha8 stream keyed by `(seed, entry index)` so any
/// entry can be regenerated independently.
pub fn build_synthetic_model(
    spec: &ModelSpec,
    seed: u64,
    materialize: bool,
) -> Result<ParameterMap, SpecError> {
    spec.validate()?;
    let mut model = ParameterMap::new();
    for (index, (name, layer)) in spec.expand().into_iter().enumerate() {
        let shape = layer.shape.clone().unwrap_or_else(|| vec![layer.elements]);
        let tensor = if materialize {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            synth_tensor(layer.dtype, shape, layer.elements as usize, &mut rng)
        } else {
            Tensor::unmaterialized(layer.dtype, shape)
        };
        model
            .insert(name.clone(), tensor)
            .map_err(|_| SpecError::DuplicateName(name))?;
    }
    Ok(model)
}

fn synth_tensor(dtype: DType, shape: Vec<u64>, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(n * dtype.width());
    let mut uniform = || rng.random::<f32>() * 2.0 - 1.0;
    match dtype {
        DType::Fp32 => (0..n).for_each(|_| data.extend_from_slice(&uniform().to_le_bytes())),
        DType::Fp16 => (0..n).for_each(|_| {
            data.extend_from_slice(&half::f16::from_f32(uniform()).to_le_bytes())
        }),
        DType::Bf16 => (0..n).for_each(|_| {
            data.extend_from_slice(&half::bf16::from_f32(uniform()).to_le_bytes())
        }),
        DType::U8 => {
            data.resize(n, 0);
            rng.fill(&mut data[..]);
        }
    }
    Tensor::new(dtype, shape, data).expect("generated length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn llama_expands_to_147_layers() {
        let spec = ModelSpec::llama_3_2_1b();
        let model = build_synthetic_model(&spec, 0, false).unwrap();
        assert_eq!(model.len(), 147);
        let names: Vec<_> = model.names().collect();
        assert_eq!(names[0], "model.embed_tokens.weight");
        assert_eq!(names[1], "model.layers.0.self_attn.q_proj.weight");
        assert_eq!(names[9], "model.layers.0.post_attention_layernorm.weight");
        assert_eq!(names[10], "model.layers.1.self_attn.q_proj.weight");
        assert_eq!(names[145], "model.norm.weight");
        assert_eq!(names[146], "lm_head.weight");
        assert_eq!(names.iter().filter(|n| n.contains(".layers.")).count(), 144);
    }

    #[test]
    fn llama_element_and_byte_totals() {
        // 2 x (128256 x 2048) + 16 x (2 x 2048^2 + 2 x 2048 x 512 + 3 x 2048 x 8192 + 2 x 2048) + 2048
        let expected: u64 = 2 * (128_256 * 2048)
            + 16 * (2 * 2048 * 2048 + 2 * (2048 * 512) + 3 * (2048 * 8192) + 2 * 2048)
            + 2048;
        assert_eq!(expected, 1_498_482_688);
        let spec = ModelSpec::llama_3_2_1b();
        assert_eq!(spec.total_elements(), expected);
        let model = build_synthetic_model(&spec, 0, false).unwrap();
        assert_eq!(model.total_elements(), expected);
        assert_eq!(model.size_bytes(), 5_993_930_752);
        let mib = model.size_bytes() as f64 / crate::MIB as f64;
        assert!((mib - 5716.26).abs() / 5716.26 < 1e-3, "{mib}");
        assert_eq!(
            model.get("model.embed_tokens.weight").unwrap().byte_len(),
            1_050_673_152
        );
    }

    #[test]
    fn single_embedding_sized_layer() {
        let spec = ModelSpec::from_json(
            r#"[{"name": "e", "elements": 262668288, "dtype": "fp32"}]"#,
        )
        .unwrap();
        let model = build_synthetic_model(&spec, 1, false).unwrap();
        let t = model.get("e").unwrap();
        assert_eq!(t.byte_len(), 128_256 * 2048 * 4);
        assert_eq!(t.byte_len() as f64 / crate::MIB as f64, 1002.0);
    }

    #[test]
    fn empty_spec_gives_empty_model() {
        let model = build_synthetic_model(&ModelSpec::default(), 3, true).unwrap();
        assert!(model.is_empty());
    }

    #[test]
    fn duplicate_expansion_is_rejected() {
        let json = r#"[
            {"name": "blk.{i}", "elements": 4, "dtype": "fp32", "repeat": 2, "index_placeholder": "{i}"},
            {"name": "blk.1", "elements": 4, "dtype": "fp32"}
        ]"#;
        assert!(matches!(
            ModelSpec::from_json(json),
            Err(SpecError::DuplicateName(n)) if n == "blk.1"
        ));
        let zero = r#"[{"name": "z", "elements": 0, "dtype": "fp32"}]"#;
        assert!(matches!(
            ModelSpec::from_json(zero),
            Err(SpecError::InvalidLayer { .. })
        ));
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let spec = ModelSpec::llama_3_2_1b().scaled(4096);
        let a = build_synthetic_model(&spec, 7, true).unwrap();
        let b = build_synthetic_model(&spec, 7, true).unwrap();
        let c = build_synthetic_model(&spec, 8, true).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (_, t) in a.iter() {
            assert!(t.to_f32_vec().unwrap().iter().all(|v| (-1.0..1.0).contains(v)));
        }
    }

    #[test]
    fn scaling_rounds_up() {
        let spec = ModelSpec::llama_3_2_1b().scaled(64);
        assert_eq!(spec.layers[0].elements, 262_668_288 / 64);
        assert_eq!(spec.layers[8].elements, 32);
        assert!(spec.layers.iter().all(|l| l.shape.is_none()));
    }
}

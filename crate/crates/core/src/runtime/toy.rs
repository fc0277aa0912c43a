//! Synthetic multi-output least-squares task and FedAvg.
//!
//! A shard is kept as its sufficient statistics `A = XᵀX/n`, `B = YᵀX/n`
//! and `c = ‖Y‖²/n`, so the loss of a weight matrix `W` (outputs x dimension)
//! is `(tr(W A Wᵀ) - 2 tr(B Wᵀ) + c) / (2 outputs)`: the mean squared error
//! per output, halved.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::ToyConfig;
use crate::tensor::{serialize_model, DType, ParameterMap, Tensor};

/// Name of the single entry in a toy model.
pub const WEIGHT_NAME: &str = "weight";

const TARGET_STREAM: u64 = 0;
const INIT_STREAM: u64 = u32::MAX as u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("model has no {WEIGHT_NAME:?} entry")]
    MissingWeight,
    #[error("model has {0} entries, expected exactly one")]
    ExtraEntries(usize),
    #[error("weight shape {found:?} does not match task shape {expected:?}")]
    Shape { expected: Vec<u64>, found: Vec<u64> },
    #[error("weight is {0}, expected fp32")]
    DType(DType),
    #[error("weight has no data")]
    Unmaterialized,
    #[error("received {0} payload, expected a plain fp32 model")]
    NotPlain(&'static str),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggError {
    #[error("no updates to aggregate")]
    Empty,
    #[error("{updates} updates but {weights} weights")]
    WeightCount { updates: usize, weights: usize },
    #[error("client {client} has invalid weight {weight}")]
    InvalidWeight { client: usize, weight: f64 },
    #[error("all weights are zero")]
    ZeroWeights,
    #[error("entry {entry:?} of client {client}: {reason}")]
    Mismatch {
        entry: String,
        client: usize,
        reason: String,
    },
}

/// One client's data, reduced to sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub samples: u64,
    pub dimension: usize,
    pub outputs: usize,
    /// `dimension x dimension`, row-major.
    pub a: Vec<f64>,
    /// `outputs x dimension`, row-major.
    pub b: Vec<f64>,
    pub c: f64,
}

impl Shard {
    /// Loss of the row-major `outputs x dimension` matrix `w`.
    pub fn loss(&self, w: &[f64]) -> f64 {
        let d = self.dimension;
        let mut quad = 0.0;
        let mut lin = 0.0;
        let mut wa = vec![0.0; d];
        for (row, b) in w.chunks_exact(d).zip(self.b.chunks_exact(d)) {
            mat_vec(row, &self.a, &mut wa);
            quad += dot(&wa, row);
            lin += dot(b, row);
        }
        (quad - 2.0 * lin + self.c) / (2.0 * self.outputs as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = row · A` for symmetric `A`.
fn mat_vec(row: &[f64], a: &[f64], out: &mut [f64]) {
    let d = row.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = dot(row, &a[k * d..(k + 1) * d]);
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The ground-truth weights shared by all clients.
pub fn target_weights(cfg: &ToyConfig) -> Vec<f64> {
    let mut rng = rng(cfg.seed, TARGET_STREAM);
    (0..cfg.outputs * cfg.dimension)
        .map(|_| cfg.target_std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Generates client `client`'s shard. Only one sample is held at a time.
pub fn make_shard(cfg: &ToyConfig, target: &[f64], client: usize) -> Shard {
    let (d, m, n) = (cfg.dimension, cfg.outputs, cfg.samples_per_client);
    let mut rng = rng(cfg.seed, client as u64 + 1);
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; m * d];
    let mut c = 0.0;
    let mut x = vec![0.0; d];
    for _ in 0..n {
        x.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] += x[i] * x[j];
            }
        }
        for (row, b_row) in target.chunks_exact(d).zip(b.chunks_exact_mut(d)) {
            let noise: f64 = rng.sample(StandardNormal);
            let y = dot(row, &x) + cfg.noise_std * noise;
            c += y * y;
            b_row.iter_mut().zip(&x).for_each(|(bv, xv)| *bv += y * xv);
        }
    }
    let scale = 1.0 / n as f64;
    a.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= scale);
    Shard {
        samples: n as u64,
        dimension: d,
        outputs: m,
        a,
        b,
        c: c * scale,
    }
}

/// Starting global model: uniform in `[-init_scale, init_scale)`, every
/// value exactly representable in fp16.
pub fn initial_model(cfg: &ToyConfig) -> ParameterMap {
    let mut rng = rng(cfg.seed, INIT_STREAM);
    let values: Vec<f32> = (0..cfg.outputs * cfg.dimension)
        .map(|_| {
            let v = (rng.random::<f64>() * 2.0 - 1.0) * cfg.init_scale;
            half::f16::from_f64(v).to_f32()
        })
        .collect();
    weight_model(cfg.outputs, cfg.dimension, &values)
}

fn weight_model(outputs: usize, dimension: usize, values: &[f32]) -> ParameterMap {
    let mut model = ParameterMap::new();
    model
        .insert(
            WEIGHT_NAME,
            Tensor::from_f32(vec![outputs as u64, dimension as u64], values),
        )
        .expect("fresh map");
    model
}

/// Extracts the weight matrix as f64, checking it fits the shard.
fn weights_of(model: &ParameterMap, outputs: usize, dimension: usize) -> Result<Vec<f64>, TaskError> {
    if model.len() != 1 {
        return Err(match model.get(WEIGHT_NAME) {
            Some(_) => TaskError::ExtraEntries(model.len()),
            None => TaskError::MissingWeight,
        });
    }
    let t = model.get(WEIGHT_NAME).ok_or(TaskError::MissingWeight)?;
    let expected = vec![outputs as u64, dimension as u64];
    if t.shape() != expected.as_slice() {
        return Err(TaskError::Shape {
            expected,
            found: t.shape().to_vec(),
        });
    }
    if t.dtype() != DType::Fp32 {
        return Err(TaskError::DType(t.dtype()));
    }
    let values = t.to_f32_vec().map_err(|_| TaskError::Unmaterialized)?;
    Ok(values.into_iter().map(f64::from).collect())
}

/// Runs `steps` full-batch gradient steps on the shard's loss and returns
/// the new model with its loss. Each output row `w` is updated as
/// `w -= lr (w A - b)`, which is stable for `lr < 2 / λmax(A)`. Arithmetic
/// is in f64; the result is rounded to fp32 once at the end.
pub fn toy_local_train(
    model: &ParameterMap,
    shard: &Shard,
    steps: usize,
    lr: f64,
) -> Result<(ParameterMap, f64), TaskError> {
    let d = shard.dimension;
    let mut w = weights_of(model, shard.outputs, d)?;
    let mut grad = vec![0.0; d];
    for _ in 0..steps {
        for (row, b) in w.chunks_exact_mut(d).zip(shard.b.chunks_exact(d)) {
            mat_vec(row, &shard.a, &mut grad);
            for ((wv, g), bv) in row.iter_mut().zip(&grad).zip(b) {
                *wv -= lr * (g - bv);
            }
        }
    }
    let values: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    let rounded: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
    Ok((weight_model(shard.outputs, d, &values), shard.loss(&rounded)))
}

/// Loss on the union of all shards (sample-weighted mean of shard losses).
pub fn global_loss(model: &ParameterMap, shards: &[Shard]) -> Result<f64, TaskError> {
    let first = shards.first().expect("at least one shard");
    let w = weights_of(model, first.outputs, first.dimension)?;
    let total: u64 = shards.iter().map(|s| s.samples).sum();
    Ok(shards
        .iter()
        .map(|s| s.loss(&w) * s.samples as f64)
        .sum::<f64>()
        / total as f64)
}

/// Weighted element-wise mean of fp32 updates. Weights are normalized to
/// sum to one; accumulation is in f64 in update order, rounded to fp32 at
/// the end.
pub fn fedavg(updates: &[ParameterMap], weights: &[f64]) -> Result<ParameterMap, AggError> {
    let reference = updates.first().ok_or(AggError::Empty)?;
    if updates.len() != weights.len() {
        return Err(AggError::WeightCount {
            updates: updates.len(),
            weights: weights.len(),
        });
    }
    if let Some((client, &weight)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
    {
        return Err(AggError::InvalidWeight { client, weight });
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(AggError::ZeroWeights);
    }

    let mismatch = |entry: &str, client: usize, reason: String| AggError::Mismatch {
        entry: entry.to_owned(),
        client,
        reason,
    };
    for (client, update) in updates.iter().enumerate() {
        for (name, t) in reference.iter() {
            let other = update
                .get(name)
                .ok_or_else(|| mismatch(name, client, "entry missing".into()))?;
            if other.shape() != t.shape() {
                return Err(mismatch(
                    name,
                    client,
                    format!("shape {:?} differs from {:?}", other.shape(), t.shape()),
                ));
            }
            if other.dtype() != DType::Fp32 {
                return Err(mismatch(name, client, format!("dtype {} is not fp32", other.dtype())));
            }
            if !other.is_materialized() {
                return Err(mismatch(name, client, "no data".into()));
            }
        }
        if let Some(extra) = update.names().find(|n| reference.get(n).is_none()) {
            return Err(mismatch(extra, client, "entry not present in client 0".into()));
        }
    }

    let mut out = ParameterMap::new();
    for (name, t) in reference.iter() {
        let mut acc = vec![0.0f64; t.element_count() as usize];
        for (update, &weight) in updates.iter().zip(weights) {
            let share = weight / total;
            let values = update.get(name).expect("checked").to_f32_vec().expect("checked");
            acc.iter_mut()
                .zip(values)
                .for_each(|(a, v)| *a += share * f64::from(v));
        }
        let values: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        out.insert(name, Tensor::from_f32(t.shape().to_vec(), &values))
            .expect("names unique");
    }
    Ok(out)
}

/// Lowercase hex SHA-256 of the model's FTNS serialization.
pub fn model_checksum(model: &ParameterMap) -> String {
    let bytes = serialize_model(model).expect("aggregated models are materialized");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> ParameterMap {
        let mut m = ParameterMap::new();
        m.insert("s", Tensor::from_f32(vec![1], &[v])).unwrap();
        m
    }

    fn small(seed: u64) -> ToyConfig {
        ToyConfig {
            dimension: 4,
            outputs: 8,
            samples_per_client: 64,
            ..ToyConfig::with_seed(seed)
        }
    }

    #[test]
    fn fedavg_examples() {
        let a = |v: [f32; 2]| {
            let mut m = ParameterMap::new();
            m.insert("a", Tensor::from_f32(vec![2], &v)).unwrap();
            m
        };
        let avg = fedavg(&[a([1.0, 2.0]), a([3.0, 4.0])], &[1.0, 1.0]).unwrap();
        assert_eq!(avg, a([2.0, 3.0]));
        assert_eq!(fedavg(&[a([1.5, -2.0])], &[0.3]).unwrap(), a([1.5, -2.0]));

        // (0*1 + 3*2 + 6*3) / 6
        let updates = [scalar(0.0), scalar(3.0), scalar(6.0)];
        let avg = fedavg(&updates, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(avg.get("s").unwrap().to_f32_vec().unwrap(), vec![4.0]);
    }

    #[test]
    fn fedavg_rejects_bad_input() {
        assert_eq!(fedavg(&[], &[]), Err(AggError::Empty));
        assert_eq!(fedavg(&[scalar(1.0)], &[0.0]), Err(AggError::ZeroWeights));
        assert!(matches!(
            fedavg(&[scalar(1.0), scalar(2.0)], &[1.0, -1.0]),
            Err(AggError::InvalidWeight { client: 1, .. })
        ));
        assert!(matches!(
            fedavg(&[scalar(1.0)], &[1.0, 1.0]),
            Err(AggError::WeightCount { .. })
        ));
        let mut wide = ParameterMap::new();
        wide.insert("s", Tensor::from_f32(vec![2], &[1.0, 2.0])).unwrap();
        match fedavg(&[scalar(1.0), scalar(1.0), wide], &[1.0; 3]) {
            Err(AggError::Mismatch { entry, client, .. }) => assert_eq!((entry.as_str(), client), ("s", 2)),
            other => panic!("{other:?}"),
        }
        let mut renamed = ParameterMap::new();
        renamed.insert("t", Tensor::from_f32(vec![1], &[1.0])).unwrap();
        assert!(matches!(
            fedavg(&[scalar(1.0), renamed], &[1.0; 2]),
            Err(AggError::Mismatch { client: 1, .. })
        ));
    }

    #[test]
    fn fedavg_idempotent_and_permutation_invariant() {
        let cfg = small(3);
        let m = initial_model(&ToyConfig { init_scale: 1.0, ..cfg });
        assert_eq!(fedavg(&[m.clone(), m.clone(), m.clone()], &[0.2, 0.5, 0.3]).unwrap(), m);

        let ups: Vec<ParameterMap> = (0..3)
            .map(|s| initial_model(&ToyConfig { seed: s, init_scale: 1.0, ..cfg }))
            .collect();
        let w = [1.0, 2.0, 4.0];
        let fwd = fedavg(&ups, &w).unwrap();
        let rev = fedavg(&[ups[2].clone(), ups[1].clone(), ups[0].clone()], &[4.0, 2.0, 1.0]).unwrap();
        let (a, b) = (fwd.get("weight").unwrap().to_f32_vec().unwrap(), rev.get("weight").unwrap().to_f32_vec().unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn zero_targets_and_zero_init_stay_put() {
        let cfg = ToyConfig {
            noise_std: 0.0,
            target_std: 0.0,
            init_scale: 0.0,
            ..small(1)
        };
        let shard = make_shard(&cfg, &target_weights(&cfg), 0);
        let model = initial_model(&cfg);
        let (trained, loss) = toy_local_train(&model, &shard, 10, 0.5).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(trained, model);
    }

    #[test]
    fn loss_matches_direct_residuals() {
        // rebuild the samples and evaluate the mean squared residual directly
        let cfg = small(9);
        let target = target_weights(&cfg);
        let shard = make_shard(&cfg, &target, 0);
        let mut rng = rng(cfg.seed, 1);
        let (d, m) = (cfg.dimension, cfg.outputs);
        let w: Vec<f64> = (0..m * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut sse = 0.0;
        for _ in 0..cfg.samples_per_client {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for j in 0..m {
                let noise: f64 = rng.sample(StandardNormal);
                let y = dot(&target[j * d..(j + 1) * d], &x) + cfg.noise_std * noise;
                let r = y - dot(&w[j * d..(j + 1) * d], &x);
                sse += r * r;
            }
        }
        let direct = sse / (2.0 * (m * cfg.samples_per_client) as f64);
        assert!((shard.loss(&w) - direct).abs() < 1e-9 * direct);
    }

    #[test]
    fn training_loss_does_not_increase() {
        let cfg = small(5);
        let shard = make_shard(&cfg, &target_weights(&cfg), 0);
        let mut model = initial_model(&cfg);
        let mut last = f64::INFINITY;
        for _ in 0..20 {
            let (next, loss) = toy_local_train(&model, &shard, 1, 0.3).unwrap();
            assert!(loss <= last + 1e-12, "{loss} > {last}");
            last = loss;
            model = next;
        }
    }

    #[test]
    fn shape_and_dtype_are_checked() {
        let cfg = small(2);
        let shard = make_shard(&cfg, &target_weights(&cfg), 0);
        let wrong = initial_model(&ToyConfig { dimension: 5, ..cfg });
        assert!(matches!(
            toy_local_train(&wrong, &shard, 1, 0.1),
            Err(TaskError::Shape { .. })
        ));
        assert_eq!(
            toy_local_train(&ParameterMap::new(), &shard, 1, 0.1),
            Err(TaskError::MissingWeight)
        );
        let mut half = ParameterMap::new();
        half.insert(WEIGHT_NAME, Tensor::new(DType::Fp16, vec![8, 4], vec![0; 64]).unwrap())
            .unwrap();
        assert_eq!(toy_local_train(&half, &shard, 1, 0.1), Err(TaskError::DType(DType::Fp16)));
    }

    #[test]
    fn initial_model_is_fp16_exact() {
        let cfg = small(8);
        let values = initial_model(&cfg).get(WEIGHT_NAME).unwrap().to_f32_vec().unwrap();
        assert!(values.iter().any(|v| *v != 0.0));
        for v in values {
            assert_eq!(half::f16::from_f32(v).to_f32(), v);
            assert!(v.abs() <= 0.1);
        }
        assert_eq!(model_checksum(&initial_model(&cfg)).len(), 64);
    }
}

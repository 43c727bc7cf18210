//! Local trainer: multiclass logistic regression under minibatch SGD.
//! Deterministic given its seed, so federated runs can be replayed and
//! compared against plaintext references parameter-for-parameter. The
//! protocol itself is model-agnostic; it only ever sees the flat parameter
//! vector.

use super::data::Dataset;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TrainerError {
    #[error("model expects {expected} features, data has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter vector has {got} entries, expected {expected}")]
    BadParameterCount { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, TrainerError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub local_epochs: u32,
    pub batch_size: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.01,
            local_epochs: 3,
            batch_size: 16,
        }
    }
}

/// Softmax classifier: per class a weight row plus bias, flattened
/// class-major into one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub classes: usize,
    pub dim: usize,
    params: Vec<f64>,
}

impl LogisticModel {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LogisticModel {
            classes,
            dim,
            params: vec![0.0; classes * (dim + 1)],
        }
    }

    pub fn param_count(classes: usize, dim: usize) -> usize {
        classes * (dim + 1)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn from_params(classes: usize, dim: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::param_count(classes, dim) {
            return Err(TrainerError::BadParameterCount {
                expected: Self::param_count(classes, dim),
                got: params.len(),
            });
        }
        Ok(LogisticModel {
            classes,
            dim,
            params,
        })
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let stride = self.dim + 1;
        (0..self.classes)
            .map(|c| {
                let row = &self.params[c * stride..(c + 1) * stride];
                row[self.dim] + x.iter().zip(row).map(|(xi, wi)| xi * wi).sum::<f64>()
            })
            .collect()
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        Self::softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(c, _)| c)
            .unwrap()
    }

    pub fn accuracy(&self, ds: &Dataset) -> f64 {
        if ds.is_empty() {
            return 0.0;
        }
        let hits = ds
            .features
            .iter()
            .zip(&ds.labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / ds.len() as f64
    }

    /// Mean cross-entropy.
    pub fn loss(&self, ds: &Dataset) -> f64 {
        if ds.is_empty() {
            return 0.0;
        }
        let total: f64 = ds
            .features
            .iter()
            .zip(&ds.labels)
            .map(|(x, &y)| -self.probabilities(x)[y].max(1e-12).ln())
            .sum();
        total / ds.len() as f64
    }
}

/// `epochs` passes of minibatch SGD from the given starting point. The
/// shuffle order is fixed by the seed; zero epochs returns the start
/// unchanged.
pub fn local_train(
    start: &LogisticModel,
    ds: &Dataset,
    hp: &Hyperparams,
    seed: u64,
) -> Result<LogisticModel> {
    if ds.dim() != start.dim {
        return Err(TrainerError::DimensionMismatch {
            expected: start.dim,
            got: ds.dim(),
        });
    }
    let mut model = start.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let stride = start.dim + 1;
    let batch = hp.batch_size.max(1);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for _ in 0..hp.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; model.params.len()];
            for &i in chunk {
                let x = &ds.features[i];
                let probs = model.probabilities(x);
                for c in 0..model.classes {
                    let err = probs[c] - if c == ds.labels[i] { 1.0 } else { 0.0 };
                    let row = &mut grad[c * stride..(c + 1) * stride];
                    for (k, xi) in x.iter().enumerate() {
                        row[k] += err * xi;
                    }
                    row[start.dim] += err;
                }
            }
            let scale = hp.learning_rate / chunk.len() as f64;
            for (w, g) in model.params.iter_mut().zip(&grad) {
                *w -= scale * g;
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::data::synthetic_blobs;

    #[test]
    fn zero_epochs_leave_the_model_unchanged() {
        let ds = synthetic_blobs(3, 4, 30, 0.5, 1);
        let model = LogisticModel::zeros(3, 4);
        let hp = Hyperparams {
            local_epochs: 0,
            ..Hyperparams::default()
        };
        assert_eq!(local_train(&model, &ds, &hp, 1).unwrap(), model);
    }

    #[test]
    fn separable_blobs_reach_high_training_accuracy() {
        let ds = synthetic_blobs(2, 4, 100, 0.5, 3);
        let hp = Hyperparams {
            learning_rate: 0.05,
            local_epochs: 50,
            batch_size: 16,
        };
        let model = local_train(&LogisticModel::zeros(2, 4), &ds, &hp, 9).unwrap();
        assert!(
            model.accuracy(&ds) >= 0.95,
            "accuracy {}",
            model.accuracy(&ds)
        );
    }

    #[test]
    fn training_is_bit_deterministic_per_seed() {
        let ds = synthetic_blobs(3, 4, 60, 0.5, 4);
        let start = LogisticModel::zeros(3, 4);
        let hp = Hyperparams::default();
        let a = local_train(&start, &ds, &hp, 11).unwrap();
        let b = local_train(&start, &ds, &hp, 11).unwrap();
        assert_eq!(a.params(), b.params());
        let c = local_train(&start, &ds, &hp, 12).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn loss_decreases_under_training() {
        let ds = synthetic_blobs(3, 4, 90, 0.5, 5);
        let start = LogisticModel::zeros(3, 4);
        let hp = Hyperparams {
            learning_rate: 0.05,
            local_epochs: 20,
            batch_size: 16,
        };
        let trained = local_train(&start, &ds, &hp, 6).unwrap();
        assert!(trained.loss(&ds) < start.loss(&ds));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let ds = synthetic_blobs(3, 4, 30, 0.5, 1);
        let model = LogisticModel::zeros(3, 6);
        assert_eq!(
            local_train(&model, &ds, &Hyperparams::default(), 0).unwrap_err(),
            TrainerError::DimensionMismatch {
                expected: 6,
                got: 4
            }
        );
    }

    #[test]
    fn parameter_round_trip() {
        let model = LogisticModel::zeros(3, 4);
        let back =
            LogisticModel::from_params(3, 4, model.params().to_vec()).unwrap();
        assert_eq!(model, back);
        assert!(LogisticModel::from_params(3, 4, vec![0.0; 7]).is_err());
    }
}

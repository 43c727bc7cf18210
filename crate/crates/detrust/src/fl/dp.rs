//! Distributed differential privacy for secure aggregation: the calibrated
//! Gaussian noise is split across the honest parties, so each adds only a
//! 1/sqrt(t) share and the decrypted sum carries the full protection while
//! individual updates stay hidden inside the ciphertexts anyway.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    /// Honest parties assumed to share the noise budget.
    pub honest_count: u32,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            enabled: false,
            epsilon: 1.0,
            delta: 1e-5,
            clip_norm: 1.0,
            honest_count: 1,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.enabled {
            return Ok(());
        }
        if self.epsilon <= 0.0 {
            return Err("epsilon must be positive".into());
        }
        if self.delta <= 0.0 || self.delta >= 1.0 {
            return Err("delta must lie in (0, 1)".into());
        }
        if self.clip_norm <= 0.0 {
            return Err("clip norm must be positive".into());
        }
        if self.honest_count == 0 {
            return Err("honest count must be at least 1".into());
        }
        Ok(())
    }

    /// Gaussian-mechanism std for the whole aggregate.
    pub fn sigma_total(&self) -> f64 {
        self.clip_norm * (2.0 * (1.25 / self.delta).ln()).sqrt() / self.epsilon
    }

    /// Each honest party's share of the noise.
    pub fn sigma_party(&self) -> f64 {
        self.sigma_total() / (self.honest_count as f64).sqrt()
    }
}

/// Clips the update to L2 norm `clip_norm`, then adds per-coordinate
/// Gaussian noise at the party share. Identity when disabled.
pub fn apply_dp<R: rand::Rng>(cfg: &DpConfig, update: &mut [f64], rng: &mut R) {
    if !cfg.enabled {
        return;
    }
    let norm: f64 = update.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > cfg.clip_norm {
        let scale = cfg.clip_norm / norm;
        for v in update.iter_mut() {
            *v *= scale;
        }
    }
    let noise = Normal::new(0.0, cfg.sigma_party()).unwrap();
    for v in update.iter_mut() {
        *v += noise.sample(rng);
    }
}

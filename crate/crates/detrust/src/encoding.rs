//! Fixed-point encoding of model payloads and fusion-weight integerization.
//!
//! Ciphertexts carry integers, so floats are clipped to a symmetric range and
//! scaled by 10^precision with half-away-from-zero rounding. Fusion weights
//! are integerized separately: averaging uses exact unit weights with the
//! support size as the divisor, weighted fusion scales by 10^weight_precision.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Weight = Ratio<i64>;

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("fusion weight vector has empty support")]
    ZeroSupport,
    #[error("fusion weight at index {0} is negative")]
    NegativeWeight(usize),
    #[error("average fusion requires equal weights on the support; index {0} differs")]
    UnevenAverageRow(usize),
    #[error("scaled weight at index {0} overflows the integer range")]
    WeightOverflow(usize),
}

pub type Result<T> = std::result::Result<T, EncodingError>;

/// How a round's local models are fused into the next global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Average,
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Decimal digits kept per model parameter.
    pub precision: u32,
    /// Decimal digits kept per fusion weight in weighted mode.
    pub weight_precision: u32,
    /// Symmetric clipping range applied before scaling.
    pub clip_bound: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            precision: 4,
            weight_precision: 2,
            clip_bound: 10.0,
        }
    }
}

impl EncodingConfig {
    pub fn scale(&self) -> i64 {
        10i64.pow(self.precision)
    }

    pub fn weight_scale(&self) -> i64 {
        10i64.pow(self.weight_precision)
    }

    /// Largest magnitude an encoded payload entry can take.
    pub fn payload_bound(&self) -> u64 {
        (self.clip_bound * self.scale() as f64).ceil() as u64
    }

    /// Largest magnitude an integerized fusion weight can take.
    pub fn max_weight_scale(&self, mode: FusionMode) -> u64 {
        match mode {
            FusionMode::Average => 1,
            FusionMode::Weighted => self.weight_scale() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub values: Vec<i64>,
    /// Entries that hit the clip range; silent, surfaced through metrics.
    pub clipped: usize,
}

/// Clips, scales, and rounds a float vector into payload integers.
pub fn encode(cfg: &EncodingConfig, values: &[f64]) -> Encoded {
    let scale = cfg.scale() as f64;
    let mut clipped = 0;
    let out = values
        .iter()
        .map(|&v| {
            assert!(v.is_finite(), "payload entries must be finite");
            let c = v.clamp(-cfg.clip_bound, cfg.clip_bound);
            if c != v {
                clipped += 1;
            }
            (c * scale).round() as i64
        })
        .collect();
    Encoded {
        values: out,
        clipped,
    }
}

/// Maps aggregated integers back to floats, dividing out both the payload
/// scale and the fusion-weight scale.
pub fn decode(cfg: &EncodingConfig, values: &[i64], total_weight_scale: u64) -> Vec<f64> {
    let denom = cfg.scale() as f64 * total_weight_scale as f64;
    values.iter().map(|&v| v as f64 / denom).collect()
}

/// Turns a rational fusion-weight row into integers plus the common scale
/// that `decode` must divide out.
///
/// Average mode emits exact unit weights over the support, so averaging loses
/// nothing to weight rounding; weighted mode rounds each weight to
/// 10^weight_precision half away from zero.
pub fn integerize_weights(
    cfg: &EncodingConfig,
    weights: &[Weight],
    mode: FusionMode,
) -> Result<(Vec<i64>, u64)> {
    for (i, w) in weights.iter().enumerate() {
        if *w < Weight::from_integer(0) {
            return Err(EncodingError::NegativeWeight(i));
        }
    }
    let support: Vec<usize> = weights
        .iter()
        .enumerate()
        .filter(|(_, w)| !w.numer().eq(&0))
        .map(|(i, _)| i)
        .collect();
    if support.is_empty() {
        return Err(EncodingError::ZeroSupport);
    }

    match mode {
        FusionMode::Average => {
            let first = weights[support[0]];
            for &i in &support[1..] {
                if weights[i] != first {
                    return Err(EncodingError::UnevenAverageRow(i));
                }
            }
            let out = weights
                .iter()
                .map(|w| if w.numer().eq(&0) { 0 } else { 1 })
                .collect();
            Ok((out, support.len() as u64))
        }
        FusionMode::Weighted => {
            let scale = cfg.weight_scale();
            let mut out = Vec::with_capacity(weights.len());
            for (i, w) in weights.iter().enumerate() {
                // Exact rational rounding: round(num * scale / den) half away
                // from zero, with i128 intermediates.
                let num = *w.numer() as i128 * scale as i128;
                let den = *w.denom() as i128;
                let rounded = (2 * num + den) / (2 * den);
                let v = i64::try_from(rounded).map_err(|_| EncodingError::WeightOverflow(i))?;
                out.push(v);
            }
            Ok((out, scale as u64))
        }
    }
}

//! Dataset handling: seeded synthetic classification blobs for desk-scale
//! experiments, CSV ingestion, and sharding across parties.

use crate::PartyId;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("dataset is empty")]
    Empty,
    #[error("cannot split {rows} rows across {parties} parties")]
    TooFewRows { rows: usize, parties: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map(|f| f.len()).unwrap_or(0)
    }
}

/// One party's slice of the training data.
#[derive(Debug, Clone)]
pub struct DatasetShard {
    pub party: PartyId,
    pub data: Dataset,
}

/// Gaussian blobs, one per class, centered on a circle of radius 4 in the
/// first two feature dimensions; remaining dimensions are pure noise. The
/// blobs are comfortably separable at std 0.5, which is what the protocol
/// experiments need: a task where training visibly converges.
pub fn synthetic_blobs(classes: usize, dim: usize, count: usize, std: f64, seed: u64) -> Dataset {
    assert!(classes >= 2 && dim >= 2 && count > 0);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).unwrap();
    let mut features = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        let angle = 2.0 * std::f64::consts::PI * class as f64 / classes as f64;
        let mut row = Vec::with_capacity(dim);
        row.push(4.0 * angle.cos() + noise.sample(&mut rng));
        row.push(4.0 * angle.sin() + noise.sample(&mut rng));
        for _ in 2..dim {
            row.push(noise.sample(&mut rng));
        }
        features.push(row);
        labels.push(class);
    }
    Dataset {
        features,
        labels,
        classes,
    }
}

/// Shuffles once (seeded) and deals rows round-robin, so every shard sees
/// every class.
pub fn split_shards(ds: &Dataset, parties: usize, seed: u64) -> Result<Vec<DatasetShard>> {
    if ds.len() < parties {
        return Err(DataError::TooFewRows {
            rows: ds.len(),
            parties,
        });
    }
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut shards: Vec<DatasetShard> = (0..parties)
        .map(|j| DatasetShard {
            party: PartyId::from_index(j),
            data: Dataset {
                features: Vec::new(),
                labels: Vec::new(),
                classes: ds.classes,
            },
        })
        .collect();
    for (pos, &row) in order.iter().enumerate() {
        let shard = &mut shards[pos % parties].data;
        shard.features.push(ds.features[row].clone());
        shard.labels.push(ds.labels[row]);
    }
    Ok(shards)
}

/// Headerless CSV, one row per sample, last column an integer class label.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut max_label = 0usize;
    let mut dim = None;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() < 2 {
            return Err(DataError::BadRow {
                line: idx + 1,
                reason: "need at least one feature and a label".into(),
            });
        }
        let this_dim = cells.len() - 1;
        match dim {
            None => dim = Some(this_dim),
            Some(d) if d != this_dim => {
                return Err(DataError::BadRow {
                    line: idx + 1,
                    reason: format!("{this_dim} features, expected {d}"),
                })
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(this_dim);
        for cell in &cells[..this_dim] {
            row.push(cell.parse::<f64>().map_err(|e| DataError::BadRow {
                line: idx + 1,
                reason: format!("bad feature {cell:?}: {e}"),
            })?);
        }
        let label = cells[this_dim]
            .parse::<usize>()
            .map_err(|e| DataError::BadRow {
                line: idx + 1,
                reason: format!("bad label {:?}: {e}", cells[this_dim]),
            })?;
        max_label = max_label.max(label);
        features.push(row);
        labels.push(label);
    }
    if features.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(Dataset {
        features,
        labels,
        classes: max_label + 1,
    })
}

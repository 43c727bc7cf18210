//! Federated training: datasets, the local trainer, differential-privacy
//! noise, the party/key-server nodes, and the aggregator engine that drives
//! full runs over either transport backend.

pub mod data;
pub mod dp;
pub mod engine;
pub mod node;
pub mod trainer;

pub use data::{load_csv, split_shards, synthetic_blobs, Dataset, DatasetShard};
pub use dp::DpConfig;
pub use engine::{
    run_encrypted, run_plaintext, AggregatorHooks, EngineError, FailureKind, ReplayPlan,
    RoundRecord, RunOutcome, RunOutput,
};
pub use trainer::{local_train, Hyperparams, LogisticModel};

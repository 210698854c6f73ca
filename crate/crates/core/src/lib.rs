//! Deterministic simulator for buffered asynchronous federated learning.
//!
//! The crate compares four server-side rules on the same simulated client
//! population: synchronous FedAvg, FedBuff, staleness-decay weighting and
//! contribution-aware weighting (drift-based staleness degree combined with
//! a loss-based statistical effect).

pub mod aggregation;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod history;
pub mod model;
pub mod params;
pub mod sim;

pub use aggregation::{
    AggregationBuffer, LocalUpdate, Normalize, StalenessCombine, StrategyConfig, StrategyKind,
};
pub use config::{DatasetSpec, RunConfig};
pub use data::{Dataset, PartitionPlan, PartitionScheme};
pub use error::{ConfigError, Error, IdxError, Result};
pub use experiment::{run_experiment, run_sweep, RunResult, SweepReport, SweepSpec, TargetAccuracy};
pub use history::VersionHistory;
pub use model::{Batch, LocalTrainSpec, ModelArch};
pub use params::ParamVector;
pub use sim::{ClientProtocol, MetricsRow, SeedStreams, SimSettings, Simulation, SpeedModel};

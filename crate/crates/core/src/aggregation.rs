//! Server-side update rules.
//!
//! Every rule reduces to `x_{t+1} = x_t − η_g · (1/K) · Σ_i w_i · Δ_i` with a
//! strategy-specific weight vector:
//!
//! * FedBuff and synchronous FedAvg use `w_i = 1`.
//! * Staleness decay uses `w_i = (1 + τ_i)^(−a)`.
//! * Contribution-aware uses `w_i = P_i / S_i` (or `P_i · S_i`), where `S_i` is
//!   the drift-based staleness degree and `P_i = 𝒩_i · mean batch loss`.
//!
//! The sum always runs in ascending client-id order so results are
//! bit-reproducible and independent of buffer arrival order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::VersionHistory;
use crate::params::ParamVector;

/// One client's uploaded contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: usize,
    /// Cumulative update `base − final` after the local job.
    pub delta: ParamVector,
    /// Global version the local job started from.
    pub base_version: u64,
    /// Mean per-sample loss of the current global model on a fresh batch.
    pub batch_loss_mean: f64,
    pub dataset_size: usize,
    pub upload_time: f64,
}

impl LocalUpdate {
    /// `τ = t − base_version`.
    pub fn staleness(&self, current_version: u64) -> u64 {
        debug_assert!(self.base_version <= current_version);
        current_version.saturating_sub(self.base_version)
    }
}

/// Holds uploads until `capacity` of them are present.
#[derive(Debug, Clone)]
pub struct AggregationBuffer {
    capacity: usize,
    pending: Vec<LocalUpdate>,
}

impl AggregationBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer capacity must be positive"));
        }
        Ok(AggregationBuffer {
            capacity,
            pending: Vec::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.pending.len() == self.capacity
    }

    pub fn pending(&self) -> &[LocalUpdate] {
        &self.pending
    }

    pub fn pending_mut(&mut self) -> &mut [LocalUpdate] {
        &mut self.pending
    }

    /// Adds an upload; returns `true` once the buffer is full.
    pub fn push(&mut self, update: LocalUpdate) -> Result<bool> {
        if self.is_full() {
            return Err(Error::invalid("buffer already holds K updates"));
        }
        self.pending.push(update);
        Ok(self.is_full())
    }

    pub fn take(&mut self) -> Vec<LocalUpdate> {
        std::mem::take(&mut self.pending)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    FedavgSync,
    Fedbuff,
    StalenessDecay,
    ContributionAware,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::FedavgSync,
        StrategyKind::Fedbuff,
        StrategyKind::StalenessDecay,
        StrategyKind::ContributionAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedavgSync => "fedavg_sync",
            StrategyKind::Fedbuff => "fedbuff",
            StrategyKind::StalenessDecay => "staleness_decay",
            StrategyKind::ContributionAware => "contribution_aware",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy `{s}`")))
    }
}

/// How the staleness degree enters the contribution weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StalenessCombine {
    /// `P / S`, the default.
    #[default]
    Divide,
    /// `P · S`, down-weighting drifted updates instead.
    Multiply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    None,
    /// Rescale weights so they average to one.
    #[default]
    MeanOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default = "StrategyConfig::default_global_lr")]
    pub global_lr: f64,
    #[serde(default = "StrategyConfig::default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub staleness_combine: StalenessCombine,
    #[serde(default)]
    pub normalize: Normalize,
    #[serde(default = "StrategyConfig::default_decay_exponent")]
    pub decay_exponent: f64,
}

impl StrategyConfig {
    fn default_global_lr() -> f64 {
        1.0
    }

    fn default_epsilon() -> f64 {
        1e-12
    }

    fn default_decay_exponent() -> f64 {
        0.5
    }

    pub fn new(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            global_lr: Self::default_global_lr(),
            epsilon: Self::default_epsilon(),
            staleness_combine: StalenessCombine::default(),
            normalize: Normalize::default(),
            decay_exponent: Self::default_decay_exponent(),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let positive = |field: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((field, format!("must be a positive finite number, got {v}")))
            }
        };
        positive("strategy.global_lr", self.global_lr)?;
        positive("strategy.epsilon", self.epsilon)?;
        positive("strategy.decay_exponent", self.decay_exponent)?;
        Ok(())
    }
}

/// Everything the engine wants to know about one aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutcome {
    pub params: ParamVector,
    /// Per-update staleness `τ_i`, in the order the updates were given.
    pub staleness: Vec<u64>,
    /// Drift-based staleness degree `S_i`, in input order.
    pub staleness_degree: Vec<f64>,
    /// Weights before normalisation, in input order.
    pub raw_weights: Vec<f64>,
    /// Set when every raw weight was zero.
    pub zero_weights: bool,
}

fn check_updates(x_t: &ParamVector, updates: &[LocalUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::invalid("aggregation needs at least one update"));
    }
    for u in updates {
        u.delta.check_dim(x_t.dim())?;
    }
    Ok(())
}

/// Indices of `updates` in reduction order: ascending client id, then upload time.
fn reduction_order(updates: &[LocalUpdate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ua, ub) = (&updates[a], &updates[b]);
        ua.client_id
            .cmp(&ub.client_id)
            .then(ua.upload_time.total_cmp(&ub.upload_time))
            .then(ua.base_version.cmp(&ub.base_version))
    });
    order
}

/// `x − η/K · Σ w_i Δ_i`, summed in reduction order.
fn weighted_step(x_t: &ParamVector, updates: &[LocalUpdate], weights: &[f64], global_lr: f64) -> ParamVector {
    let mut acc = vec![0.0; x_t.dim()];
    for i in reduction_order(updates) {
        let w = weights[i];
        for (a, d) in acc.iter_mut().zip(updates[i].delta.iter()) {
            *a += w * d;
        }
    }
    let scale = global_lr / updates.len() as f64;
    ParamVector::from_vec(
        x_t.iter()
            .zip(&acc)
            .map(|(x, a)| x - scale * a)
            .collect(),
    )
}

/// Returns the effective weights and whether the raw weights were all zero.
/// `order` fixes the summation order of the normaliser.
fn normalize_weights(raw: &[f64], order: &[usize], normalize: Normalize) -> (Vec<f64>, bool) {
    let total: f64 = order.iter().map(|&i| raw[i]).sum();
    let zero = raw.iter().all(|&w| w == 0.0);
    match normalize {
        Normalize::None => (raw.to_vec(), zero),
        Normalize::MeanOne if total == 0.0 => (vec![1.0; raw.len()], zero),
        Normalize::MeanOne => {
            let k = raw.len() as f64;
            (raw.iter().map(|w| w * k / total).collect(), zero)
        }
    }
}

/// Buffered asynchronous update with uniform weights.
pub fn fedbuff_aggregate(x_t: &ParamVector, updates: &[LocalUpdate], global_lr: f64) -> Result<ParamVector> {
    check_updates(x_t, updates)?;
    Ok(weighted_step(x_t, updates, &vec![1.0; updates.len()], global_lr))
}

/// Staleness degree from squared drift distances:
/// `S_i = (min_j d_j + ε) / (d_i + ε)`.
///
/// The minimising entry is exactly 1. With `ε = 0` and a zero minimum the
/// other entries become 0, so callers wanting `S ∈ (0, 1]` must pass `ε > 0`.
pub fn staleness_degree_from_distances(distances: &[f64], epsilon: f64) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    distances
        .iter()
        .map(|&d| {
            let (num, den) = (min + epsilon, d + epsilon);
            if num == den {
                1.0
            } else {
                num / den
            }
        })
        .collect()
}

/// Squared drift `‖x_t − x^{base_i}‖²` for every update.
pub fn drift_distances(x_t: &ParamVector, updates: &[LocalUpdate], history: &VersionHistory) -> Result<Vec<f64>> {
    updates
        .iter()
        .map(|u| x_t.sq_distance(history.get(u.base_version)?))
        .collect()
}

/// Drift-based staleness degree of every buffered update.
pub fn staleness_degree(
    x_t: &ParamVector,
    updates: &[LocalUpdate],
    history: &VersionHistory,
    epsilon: f64,
) -> Result<Vec<f64>> {
    check_updates(x_t, updates)?;
    let d = drift_distances(x_t, updates, history)?;
    Ok(staleness_degree_from_distances(&d, epsilon))
}

/// `P_i = 𝒩_i · mean batch loss`, with `𝒩_i` the client's dataset size.
pub fn statistical_effect(update: &LocalUpdate) -> f64 {
    update.dataset_size as f64 * update.batch_loss_mean
}

fn contribution_weights(updates: &[LocalUpdate], degrees: &[f64], combine: StalenessCombine) -> Vec<f64> {
    updates
        .iter()
        .zip(degrees)
        .map(|(u, &s)| match combine {
            StalenessCombine::Divide => statistical_effect(u) / s,
            StalenessCombine::Multiply => statistical_effect(u) * s,
        })
        .collect()
}

pub fn contribution_aware_aggregate(
    x_t: &ParamVector,
    updates: &[LocalUpdate],
    history: &VersionHistory,
    cfg: &StrategyConfig,
) -> Result<ParamVector> {
    if cfg.kind != StrategyKind::ContributionAware {
        return Err(Error::invalid(format!(
            "contribution-aware aggregation called with strategy {}",
            cfg.kind
        )));
    }
    let degrees = staleness_degree(x_t, updates, history, cfg.epsilon)?;
    let raw = contribution_weights(updates, &degrees, cfg.staleness_combine);
    let (weights, _) = normalize_weights(&raw, &reduction_order(updates), cfg.normalize);
    Ok(weighted_step(x_t, updates, &weights, cfg.global_lr))
}

/// `s(τ) = 1 / (1 + τ)^a`.
pub fn staleness_decay_weight(staleness: u64, exponent: f64) -> f64 {
    1.0 / (1.0 + staleness as f64).powf(exponent)
}

pub fn staleness_decay_aggregate(
    x_t: &ParamVector,
    current_version: u64,
    updates: &[LocalUpdate],
    global_lr: f64,
    exponent: f64,
    normalize: Normalize,
) -> Result<ParamVector> {
    check_updates(x_t, updates)?;
    let raw = decay_weights(updates, current_version, exponent)?;
    let (weights, _) = normalize_weights(&raw, &reduction_order(updates), normalize);
    Ok(weighted_step(x_t, updates, &weights, global_lr))
}

fn decay_weights(updates: &[LocalUpdate], current_version: u64, exponent: f64) -> Result<Vec<f64>> {
    updates
        .iter()
        .map(|u| {
            check_not_future(u, current_version)?;
            Ok(staleness_decay_weight(u.staleness(current_version), exponent))
        })
        .collect()
}

fn check_not_future(u: &LocalUpdate, current_version: u64) -> Result<()> {
    if u.base_version > current_version {
        return Err(Error::invalid(format!(
            "client {} reports base version {} beyond current version {current_version}",
            u.client_id, u.base_version
        )));
    }
    Ok(())
}

/// Synchronous round: every update must start from the current version.
pub fn fedavg_sync_round(
    x_t: &ParamVector,
    current_version: u64,
    updates: &[LocalUpdate],
    global_lr: f64,
) -> Result<ParamVector> {
    check_updates(x_t, updates)?;
    if let Some(stale) = updates.iter().find(|u| u.base_version != current_version) {
        return Err(Error::invalid(format!(
            "synchronous round at version {current_version} received an update from client {} based on version {}",
            stale.client_id, stale.base_version
        )));
    }
    Ok(weighted_step(x_t, updates, &vec![1.0; updates.len()], global_lr))
}

/// Applies the configured strategy and reports the diagnostics the metrics
/// table needs. The staleness degree is computed for every strategy.
pub fn aggregate(
    cfg: &StrategyConfig,
    x_t: &ParamVector,
    current_version: u64,
    updates: &[LocalUpdate],
    history: &VersionHistory,
) -> Result<AggregationOutcome> {
    check_updates(x_t, updates)?;
    for u in updates {
        check_not_future(u, current_version)?;
    }
    let staleness: Vec<u64> = updates.iter().map(|u| u.staleness(current_version)).collect();
    let degrees = staleness_degree(x_t, updates, history, cfg.epsilon)?;

    let (params, raw_weights, zero_weights) = match cfg.kind {
        StrategyKind::FedavgSync => (
            fedavg_sync_round(x_t, current_version, updates, cfg.global_lr)?,
            vec![1.0; updates.len()],
            false,
        ),
        StrategyKind::Fedbuff => (
            fedbuff_aggregate(x_t, updates, cfg.global_lr)?,
            vec![1.0; updates.len()],
            false,
        ),
        StrategyKind::StalenessDecay => {
            let raw = decay_weights(updates, current_version, cfg.decay_exponent)?;
            let (w, zero) = normalize_weights(&raw, &reduction_order(updates), cfg.normalize);
            (weighted_step(x_t, updates, &w, cfg.global_lr), raw, zero)
        }
        StrategyKind::ContributionAware => {
            let raw = contribution_weights(updates, &degrees, cfg.staleness_combine);
            let (w, zero) = normalize_weights(&raw, &reduction_order(updates), cfg.normalize);
            (weighted_step(x_t, updates, &w, cfg.global_lr), raw, zero)
        }
    };
    Ok(AggregationOutcome {
        params,
        staleness,
        staleness_degree: degrees,
        raw_weights,
        zero_weights,
    })
}

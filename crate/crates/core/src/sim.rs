//! Deterministic discrete-event simulation of buffered asynchronous training.
//!
//! Events are client upload completions ordered by `(time, seq)`. The server
//! buffers uploads and aggregates once `K` are present. Clients that are still
//! training when an aggregation fires keep working on their stale base version.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregation::{self, AggregationBuffer, LocalUpdate, StrategyConfig, StrategyKind};
use crate::data::{self, Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::history::VersionHistory;
use crate::model::{self, LocalTrainSpec, ModelArch};
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpeedModel {
    Fixed {
        base_duration: f64,
    },
    /// The lowest `⌊slow_fraction · N⌋` client ids are `slow_multiplier` times slower.
    TwoTier {
        base_duration: f64,
        slow_fraction: f64,
        slow_multiplier: f64,
    },
    /// `base_duration · exp(N(mu, sigma))`, drawn per job.
    Lognormal {
        base_duration: f64,
        mu: f64,
        sigma: f64,
    },
}

impl Default for SpeedModel {
    fn default() -> Self {
        SpeedModel::TwoTier {
            base_duration: 10.0,
            slow_fraction: 0.5,
            slow_multiplier: 4.0,
        }
    }
}

impl SpeedModel {
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let positive = |field: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((field, format!("must be a positive finite number, got {v}")))
            }
        };
        match *self {
            SpeedModel::Fixed { base_duration } => positive("speed.base_duration", base_duration),
            SpeedModel::TwoTier {
                base_duration,
                slow_fraction,
                slow_multiplier,
            } => {
                positive("speed.base_duration", base_duration)?;
                positive("speed.slow_multiplier", slow_multiplier)?;
                if !(0.0..=1.0).contains(&slow_fraction) {
                    return Err((
                        "speed.slow_fraction",
                        format!("must lie in [0, 1], got {slow_fraction}"),
                    ));
                }
                Ok(())
            }
            SpeedModel::Lognormal {
                base_duration,
                mu,
                sigma,
            } => {
                positive("speed.base_duration", base_duration)?;
                if !mu.is_finite() {
                    return Err(("speed.mu", "must be finite".into()));
                }
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(("speed.sigma", format!("must be non-negative, got {sigma}")));
                }
                Ok(())
            }
        }
    }
}

/// Duration of one local job for `client_id` out of `clients`.
pub fn draw_duration<R: Rng + ?Sized>(model: &SpeedModel, client_id: usize, clients: usize, rng: &mut R) -> f64 {
    match *model {
        SpeedModel::Fixed { base_duration } => base_duration,
        SpeedModel::TwoTier {
            base_duration,
            slow_fraction,
            slow_multiplier,
        } => {
            let slow = (slow_fraction * clients as f64).floor() as usize;
            if client_id < slow {
                base_duration * slow_multiplier
            } else {
                base_duration
            }
        }
        SpeedModel::Lognormal {
            base_duration,
            mu,
            sigma,
        } => {
            let z: f64 = StandardNormal.sample(rng);
            base_duration * (mu + sigma * z).exp()
        }
    }
}

/// What a client does after uploading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientProtocol {
    /// Wait in the buffer until the aggregation fires, then start from the new model.
    #[default]
    WaitForAggregation,
    /// Start a new job from the latest model right away; a fast client may
    /// then appear more than once in one buffer.
    ImmediateRefetch,
}

/// Seeds for the independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStreams {
    pub model: u64,
    pub data: u64,
    pub speed: u64,
    pub sampling: u64,
}

impl SeedStreams {
    /// Derives four domain-separated streams from one replicate seed.
    pub fn derive(seed: u64) -> Self {
        SeedStreams {
            model: mix(seed, 0x6d6f_6465_6c00_0001),
            data: mix(seed, 0x6461_7461_0000_0002),
            speed: mix(seed, 0x7370_6565_6400_0003),
            sampling: mix(seed, 0x7361_6d70_6c65_0004),
        }
    }
}

/// splitmix64 finaliser over `seed ^ tag`.
fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = (seed ^ tag).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub arch: ModelArch,
    pub local: LocalTrainSpec,
    pub strategy: StrategyConfig,
    /// `K`; ignored by synchronous FedAvg, which always waits for all clients.
    pub buffer_size: usize,
    pub speed: SpeedModel,
    pub protocol: ClientProtocol,
    pub max_rounds: u64,
    pub max_sim_time: Option<f64>,
    pub eval_every: u64,
    pub seeds: SeedStreams,
}

impl SimSettings {
    pub fn effective_buffer_size(&self, clients: usize) -> usize {
        match self.strategy.kind {
            StrategyKind::FedavgSync => clients,
            _ => self.buffer_size,
        }
    }

    fn validate(&self, clients: usize) -> Result<()> {
        let k = self.effective_buffer_size(clients);
        if k == 0 || k > clients {
            return Err(Error::invalid(format!(
                "buffer size {k} must lie in 1..={clients}"
            )));
        }
        if self.strategy.kind == StrategyKind::FedavgSync
            && self.protocol != ClientProtocol::WaitForAggregation
        {
            return Err(Error::invalid(
                "synchronous FedAvg requires the wait-for-aggregation client protocol",
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be positive"));
        }
        if self.local.batch_size == 0 || self.local.lr.is_nan() || self.local.lr <= 0.0 {
            return Err(Error::invalid("batch size and local learning rate must be positive"));
        }
        self.strategy.validate().map_err(|(f, r)| Error::invalid(format!("{f}: {r}")))?;
        self.speed.validate().map_err(|(f, r)| Error::invalid(format!("{f}: {r}")))?;
        Ok(())
    }
}

/// A pending client upload. Ordered by `(time, seq)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub seq: u64,
    pub client_id: usize,
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    Training { base_version: u64, job_seed: u64 },
    Buffered,
}

#[derive(Debug, Clone)]
struct ClientState {
    phase: ClientPhase,
    sampling: ChaCha8Rng,
    speed: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Flags {
    pub zero_weights: bool,
}

impl Flags {
    pub fn render(&self) -> String {
        let mut parts = Vec::new();
        if self.zero_weights {
            parts.push("zero_weights");
        }
        parts.join("|")
    }
}

/// Summary of one aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    /// Version `t` the aggregation was applied to; it produced `t + 1`.
    pub round: u64,
    pub sim_time: f64,
    /// Client ids in buffer arrival order.
    pub participants: Vec<usize>,
    pub staleness: Vec<u64>,
    pub staleness_degree: Vec<f64>,
    pub raw_weights: Vec<f64>,
    pub mean_batch_loss: Vec<f64>,
    pub flags: Flags,
}

/// One row of the metrics table: the model at version `round`, evaluated
/// on the held-out set, plus the statistics of the aggregation applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub sim_time: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub mean_tau: f64,
    pub max_tau: u64,
    pub mean_s: f64,
    pub mean_raw_weight: f64,
    pub flags: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub time: f64,
    pub client_id: usize,
    pub round: Option<RoundSummary>,
    pub metrics: Option<MetricsRow>,
}

pub struct Simulation<'a> {
    settings: SimSettings,
    train: &'a Dataset,
    test: &'a Dataset,
    plan: &'a PartitionPlan,
    clock: f64,
    seq: u64,
    queue: BinaryHeap<std::cmp::Reverse<SimEvent>>,
    history: VersionHistory,
    buffer: AggregationBuffer,
    clients: Vec<ClientState>,
    duration_range: (f64, f64),
    rounds: u64,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values.sum::<f64>() / n as f64
}

impl<'a> Simulation<'a> {
    /// Builds version 0 and starts every client's first job on it.
    pub fn new(settings: SimSettings, train: &'a Dataset, test: &'a Dataset, plan: &'a PartitionPlan) -> Result<Self> {
        let n = plan.client_count();
        if n == 0 {
            return Err(Error::invalid("no clients in partition plan"));
        }
        if plan.assignments.iter().any(Vec::is_empty) {
            return Err(Error::invalid("every client partition must be non-empty"));
        }
        settings.validate(n)?;
        if train.dim() != settings.arch.input_dim() || test.dim() != settings.arch.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: settings.arch.input_dim(),
                got: train.dim(),
            });
        }

        let x0 = model::init_params(&settings.arch, settings.seeds.model);
        let buffer = AggregationBuffer::new(settings.effective_buffer_size(n))?;
        let clients = (0..n)
            .map(|c| {
                let mut sampling = ChaCha8Rng::seed_from_u64(settings.seeds.sampling);
                sampling.set_stream(c as u64);
                let mut speed = ChaCha8Rng::seed_from_u64(settings.seeds.speed);
                speed.set_stream(c as u64);
                ClientState {
                    phase: ClientPhase::Buffered,
                    sampling,
                    speed,
                }
            })
            .collect();
        let mut sim = Simulation {
            settings,
            train,
            test,
            plan,
            clock: 0.0,
            seq: 0,
            queue: BinaryHeap::with_capacity(n),
            history: VersionHistory::new(x0),
            buffer,
            clients,
            duration_range: (f64::INFINITY, 0.0),
            rounds: 0,
        };
        for c in 0..n {
            sim.start_job(c);
        }
        Ok(sim)
    }

    fn start_job(&mut self, client: usize) {
        let n = self.clients.len();
        let state = &mut self.clients[client];
        let job_seed = state.sampling.next_u64();
        let duration = draw_duration(&self.settings.speed, client, n, &mut state.speed);
        debug_assert!(duration > 0.0);
        state.phase = ClientPhase::Training {
            base_version: self.history.current_version(),
            job_seed,
        };
        self.duration_range.0 = self.duration_range.0.min(duration);
        self.duration_range.1 = self.duration_range.1.max(duration);
        self.queue.push(std::cmp::Reverse(SimEvent {
            time: self.clock + duration,
            seq: self.seq,
            client_id: client,
        }));
        self.seq += 1;
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn history(&self) -> &VersionHistory {
        &self.history
    }

    pub fn buffer(&self) -> &AggregationBuffer {
        &self.buffer
    }

    pub fn global_model(&self) -> &ParamVector {
        self.history.current()
    }

    pub fn client_phase(&self, client: usize) -> ClientPhase {
        self.clients[client].phase
    }

    /// Smallest and largest job duration drawn so far.
    pub fn duration_range(&self) -> (f64, f64) {
        self.duration_range
    }

    /// Pending events in pop order.
    pub fn pending_events(&self) -> Vec<SimEvent> {
        let mut events: Vec<SimEvent> = self.queue.iter().map(|r| r.0).collect();
        events.sort();
        events
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.queue.peek().map(|r| r.0.time)
    }

    /// Base versions still referenced by in-flight jobs or buffered updates.
    fn needed_versions(&self) -> impl Iterator<Item = u64> + '_ {
        let in_flight = self.clients.iter().filter_map(|c| match c.phase {
            ClientPhase::Training { base_version, .. } => Some(base_version),
            ClientPhase::Buffered => None,
        });
        in_flight.chain(self.buffer.pending().iter().map(|u| u.base_version))
    }

    /// Checks the structural invariants of the simulation state.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.buffer.len() > self.buffer.capacity() {
            return Err(format!("buffer holds {} > K updates", self.buffer.len()));
        }
        for v in self.needed_versions() {
            if !self.history.contains(v) {
                return Err(format!("needed version {v} missing from history"));
            }
        }
        if !self.history.contains(self.history.current_version()) {
            return Err("current version missing from history".into());
        }
        let training = self
            .clients
            .iter()
            .filter(|c| matches!(c.phase, ClientPhase::Training { .. }))
            .count();
        if training != self.queue.len() {
            return Err(format!(
                "{training} training clients but {} pending events",
                self.queue.len()
            ));
        }
        if self.settings.protocol == ClientProtocol::WaitForAggregation
            && training + self.buffer.len() != self.clients.len()
        {
            return Err("a client is neither training nor buffered".into());
        }
        Ok(())
    }

    /// Processes the next upload. Returns `None` once the queue is empty.
    pub fn step(&mut self) -> Result<Option<StepReport>> {
        let Some(std::cmp::Reverse(event)) = self.queue.pop() else {
            return Ok(None);
        };
        debug_assert!(event.time >= self.clock);
        self.clock = event.time;
        let client = event.client_id;

        let ClientPhase::Training {
            base_version,
            job_seed,
        } = self.clients[client].phase
        else {
            unreachable!("upload event for a client that is not training");
        };
        let indices = self.plan.client(client);
        let trained = model::local_train(
            self.history.get(base_version)?,
            &self.settings.arch,
            self.train,
            indices,
            self.settings.local,
            job_seed,
        )?;
        self.clients[client].phase = ClientPhase::Buffered;
        let full = self.buffer.push(LocalUpdate {
            client_id: client,
            delta: trained.delta,
            base_version,
            batch_loss_mean: 0.0,
            dataset_size: indices.len(),
            upload_time: self.clock,
        })?;

        let mut round = None;
        let mut metrics = None;
        if full {
            let (summary, row) = self.aggregate()?;
            round = Some(summary);
            metrics = row;
        }
        match self.settings.protocol {
            ClientProtocol::ImmediateRefetch => self.start_job(client),
            ClientProtocol::WaitForAggregation => {
                if let Some(r) = &round {
                    for &c in &r.participants {
                        self.start_job(c);
                    }
                }
            }
        }
        if round.is_some() {
            let needed: Vec<u64> = self.needed_versions().collect();
            self.history.prune(needed);
        }
        Ok(Some(StepReport {
            time: self.clock,
            client_id: client,
            round,
            metrics,
        }))
    }

    fn aggregate(&mut self) -> Result<(RoundSummary, Option<MetricsRow>)> {
        let t = self.history.current_version();
        let x_t = self.history.current().clone();

        // Fresh loss of the current global model on each buffered client's data.
        let batch_size = self.settings.local.batch_size;
        for u in self.buffer.pending_mut() {
            let state = &mut self.clients[u.client_id];
            let batch = data::sample_batch(self.train, self.plan.client(u.client_id), batch_size, &mut state.sampling)?;
            u.batch_loss_mean = model::batch_loss_sum(&x_t, &self.settings.arch, &batch)? / batch.len() as f64;
        }

        let updates = self.buffer.take();
        let outcome = aggregation::aggregate(&self.settings.strategy, &x_t, t, &updates, &self.history)?;
        if !outcome.params.is_finite() {
            return Err(Error::invalid(format!(
                "aggregation at round {t} produced non-finite parameters"
            )));
        }
        let summary = RoundSummary {
            round: t,
            sim_time: self.clock,
            participants: updates.iter().map(|u| u.client_id).collect(),
            staleness: outcome.staleness,
            staleness_degree: outcome.staleness_degree,
            raw_weights: outcome.raw_weights,
            mean_batch_loss: updates.iter().map(|u| u.batch_loss_mean).collect(),
            flags: Flags {
                zero_weights: outcome.zero_weights,
            },
        };

        let row = if t.is_multiple_of(self.settings.eval_every) {
            let eval = model::evaluate(&x_t, &self.settings.arch, self.test)?;
            Some(MetricsRow {
                round: t,
                sim_time: self.clock,
                test_accuracy: eval.accuracy,
                test_loss: eval.mean_loss,
                mean_tau: mean(summary.staleness.iter().map(|&s| s as f64)),
                max_tau: summary.staleness.iter().copied().max().unwrap_or(0),
                mean_s: mean(summary.staleness_degree.iter().copied()),
                mean_raw_weight: mean(summary.raw_weights.iter().copied()),
                flags: summary.flags.render(),
            })
        } else {
            None
        };

        self.history.push(outcome.params);
        self.rounds += 1;
        Ok((summary, row))
    }

    fn should_stop(&self) -> bool {
        if self.rounds >= self.settings.max_rounds {
            return true;
        }
        match (self.settings.max_sim_time, self.peek_time()) {
            (_, None) => true,
            (Some(limit), Some(next)) => next > limit,
            (None, Some(_)) => false,
        }
    }

    /// Steps until the round or time limit, returning the metrics table.
    pub fn run_to_end(&mut self) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while !self.should_stop() {
            match self.step()? {
                Some(report) => rows.extend(report.metrics),
                None => break,
            }
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub rows: Vec<MetricsRow>,
    pub final_params: ParamVector,
    pub rounds: u64,
    pub sim_time: f64,
}

pub fn run(settings: SimSettings, train: &Dataset, test: &Dataset, plan: &PartitionPlan) -> Result<SimOutput> {
    let mut sim = Simulation::new(settings, train, test, plan)?;
    let rows = sim.run_to_end()?;
    Ok(SimOutput {
        rows,
        final_params: sim.global_model().clone(),
        rounds: sim.rounds(),
        sim_time: sim.clock(),
    })
}

//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use fedsim_core::aggregation::{LocalUpdate, Normalize, StalenessCombine, StrategyConfig, StrategyKind};
use fedsim_core::{Batch, ModelArch, ParamVector, VersionHistory};

/// Straightforward per-sample MLP loss: nested loops over the flat layout,
/// softmax computed directly from the definition with a max shift.
pub fn naive_sample_loss(params: &[f64], dims: &[usize], x: &[f64], label: usize) -> f64 {
    let mut a = x.to_vec();
    let mut offset = 0;
    for k in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[k], dims[k + 1]);
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let mut z = vec![0.0; fan_out];
        for o in 0..fan_out {
            let mut s = b[o];
            for i in 0..fan_in {
                s += w[o * fan_in + i] * a[i];
            }
            z[o] = if k + 2 < dims.len() { s.max(0.0) } else { s };
        }
        a = z;
    }
    let m = a.iter().cloned().fold(f64::MIN, f64::max);
    let denom: f64 = a.iter().map(|z| (z - m).exp()).sum();
    let p = (a[label] - m).exp() / denom;
    -p.ln()
}

pub fn naive_loss_sum(params: &ParamVector, arch: &ModelArch, batch: &Batch) -> f64 {
    (0..batch.len())
        .map(|i| naive_sample_loss(params.as_slice(), arch.layer_dims(), batch.row(i), batch.labels()[i]))
        .sum()
}

/// Central finite differences of the mean batch loss.
pub fn finite_difference_gradient(params: &ParamVector, arch: &ModelArch, batch: &Batch, h: f64) -> Vec<f64> {
    let n = batch.len() as f64;
    let mut p = params.clone();
    (0..params.dim())
        .map(|j| {
            let orig = p[j];
            p[j] = orig + h;
            let up = naive_loss_sum(&p, arch, batch) / n;
            p[j] = orig - h;
            let down = naive_loss_sum(&p, arch, batch) / n;
            p[j] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(numerical: f64, analytical: f64) -> f64 {
    (numerical - analytical).abs() / (numerical.abs() + analytical.abs()).max(1e-8)
}

/// `x − η/K Σ w_i Δ_i` with weights given explicitly, no shared code with the crate.
pub fn naive_weighted_update(x: &[f64], deltas: &[&[f64]], weights: &[f64], eta: f64) -> Vec<f64> {
    let k = deltas.len() as f64;
    (0..x.len())
        .map(|j| {
            let mut s = 0.0;
            for (d, w) in deltas.iter().zip(weights) {
                s += w * d[j];
            }
            x[j] - eta * s / k
        })
        .collect()
}

pub fn naive_normalize(raw: &[f64], normalize: Normalize) -> Vec<f64> {
    match normalize {
        Normalize::None => raw.to_vec(),
        Normalize::MeanOne => {
            let total: f64 = raw.iter().sum();
            if total == 0.0 {
                vec![1.0; raw.len()]
            } else {
                raw.iter().map(|w| w / (total / raw.len() as f64)).collect()
            }
        }
    }
}

pub fn naive_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

pub fn deltas(updates: &[LocalUpdate]) -> Vec<&[f64]> {
    updates.iter().map(|u| u.delta.as_slice()).collect()
}

/// A random buffer against a random version history ending at `t`.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub history: Vec<Vec<f64>>,
    pub updates: Vec<LocalUpdate>,
}

impl Scenario {
    pub fn t(&self) -> u64 {
        self.history.len() as u64 - 1
    }

    pub fn version_history(&self) -> VersionHistory {
        let mut h = VersionHistory::new(ParamVector::from(self.history[0].clone()));
        for v in &self.history[1..] {
            h.push(ParamVector::from(v.clone()));
        }
        h
    }

    pub fn x_t(&self) -> ParamVector {
        ParamVector::from(self.history.last().unwrap().clone())
    }
}

/// Independent evaluation of every strategy's weights from first principles.
pub fn oracle(s: &Scenario, cfg: &StrategyConfig) -> Vec<f64> {
    let x = s.history.last().unwrap();
    let t = s.t();
    let raw: Vec<f64> = match cfg.kind {
        StrategyKind::Fedbuff | StrategyKind::FedavgSync => vec![1.0; s.updates.len()],
        StrategyKind::StalenessDecay => s
            .updates
            .iter()
            .map(|u| 1.0 / ((1 + t - u.base_version) as f64).powf(cfg.decay_exponent))
            .collect(),
        StrategyKind::ContributionAware => {
            let d: Vec<f64> = s
                .updates
                .iter()
                .map(|u| naive_sq_dist(x, &s.history[u.base_version as usize]))
                .collect();
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            s.updates
                .iter()
                .zip(&d)
                .map(|(u, di)| {
                    let sdeg = (min + cfg.epsilon) / (di + cfg.epsilon);
                    let p = u.dataset_size as f64 * u.batch_loss_mean;
                    match cfg.staleness_combine {
                        StalenessCombine::Divide => p / sdeg,
                        StalenessCombine::Multiply => p * sdeg,
                    }
                })
                .collect()
        }
    };
    let w = match cfg.kind {
        StrategyKind::Fedbuff | StrategyKind::FedavgSync => raw,
        _ => naive_normalize(&raw, cfg.normalize),
    };
    naive_weighted_update(x, &deltas(&s.updates), &w, cfg.global_lr)
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

//! Adversarial bandit over neighborhood strategies.
//!
//! Rewards measure how well a strategy's share of the sampling mass lines up
//! with score consistency between each center and its sampled neighbors.
//! Weights grow exponentially with reward plus an inverse-probability
//! exploration bonus; probabilities are the weights' shares mapped onto the
//! floor-clipped simplex `[p_min, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::Selection;

/// Offset inside the inverse score gap of the consistency softmax.
pub const CONSISTENCY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BanditConfig {
    pub p_min: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// Epochs between weight updates.
    pub interval: usize,
    /// Epochs before the first reward.
    pub warmup: usize,
}

impl Default for BanditConfig {
    fn default() -> Self {
        BanditConfig {
            p_min: 0.05,
            delta1: 1.0,
            delta2: 0.1,
            interval: 5,
            warmup: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState {
    weights: Vec<f64>,
    probs: Vec<f64>,
    pub config: BanditConfig,
    /// Number of weight updates applied.
    pub updates: usize,
}

/// Per-strategy reward `r^t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardVector(pub Vec<f64>);

impl BanditState {
    /// Uniform start: all weights one, all probabilities `1/K`.
    pub fn new(k: usize, config: BanditConfig) -> Result<Self> {
        if k == 0 {
            return Err(Error::Argument("bandit needs at least one strategy".into()));
        }
        if !(config.p_min >= 0.0) || k as f64 * config.p_min >= 1.0 {
            return Err(Error::Argument(format!(
                "K·p_min = {} must be below 1",
                k as f64 * config.p_min
            )));
        }
        if config.interval == 0 {
            return Err(Error::Argument("update interval must be positive".into()));
        }
        Ok(BanditState {
            weights: vec![1.0; k],
            probs: vec![1.0 / k as f64; k],
            config,
            updates: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Whether the 0-based `epoch` ends with a reward and weight update.
    pub fn is_update_epoch(&self, epoch: usize) -> bool {
        epoch >= self.config.warmup && (epoch - self.config.warmup) % self.config.interval == 0
    }

    /// Overwrites the weights (each must be positive and finite).
    pub fn set_weights(&mut self, w: Vec<f64>) -> Result<()> {
        if w.len() != self.k() || w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Argument(
                "weights must be K positive finite values".into(),
            ));
        }
        self.weights = w;
        Ok(())
    }

    /// Exponential update of the weights, rescaled so the largest is one.
    pub fn update_weights(&mut self, reward: &RewardVector, n: usize) -> Result<()> {
        let k = self.k();
        if reward.0.len() != k {
            return Err(Error::Argument(format!(
                "{} rewards for {k} strategies",
                reward.0.len()
            )));
        }
        let c = &self.config;
        let rate = c.delta1 * ((n as f64 / c.delta2).ln() / (k * c.interval) as f64).sqrt();
        let mut logw = Vec::with_capacity(k);
        for s in 0..k {
            let exponent = (c.p_min / 2.0) * (reward.0[s] + 1.0 / self.probs[s]) * rate;
            if !exponent.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite weight exponent for strategy {s}: weights={:?} probs={:?} reward={:?} rate={rate}",
                    self.weights, self.probs, reward.0
                )));
            }
            logw.push(self.weights[s].ln() + exponent);
        }
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Floor keeps weights positive after rescaling.
        self.weights = logw
            .into_iter()
            .map(|l| (l - top).exp().max(f64::MIN_POSITIVE))
            .collect();
        self.updates += 1;
        Ok(())
    }

    /// `p_k = (1 − K·p_min)·w_k/Σw + p_min`.
    pub fn update_probs(&mut self) {
        let k = self.k() as f64;
        let total: f64 = self.weights.iter().sum();
        let free = 1.0 - k * self.config.p_min;
        self.probs = self
            .weights
            .iter()
            .map(|w| free * w / total + self.config.p_min)
            .collect();
    }
}

/// Softmax over `1/(|y_i − y_j| + ε)` for `j` in the neighborhood. `None`
/// when the neighborhood is empty.
pub fn consistency(scores: &[f64], i: usize, neighbors: &[usize], eps: f64) -> Option<Vec<f64>> {
    if neighbors.is_empty() {
        return None;
    }
    let logits: Vec<f64> = neighbors
        .iter()
        .map(|&j| 1.0 / ((scores[i] - scores[j]).abs() + eps))
        .collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    Some(exps.into_iter().map(|e| e / z).collect())
}

/// `r_k = (1/n') Σ_i Σ_{j∈N_i} C_i(j) · p_k Q_k(i→j) / Φ_i(j)`, averaged over
/// the `n'` centers with a non-empty neighborhood.
pub fn reward(selection: &Selection, scores: &[f64], eps: f64) -> Result<RewardVector> {
    let k = selection.strategies();
    let p = selection.probs();
    if scores.len() != selection.centers() {
        return Err(Error::Consistency(format!(
            "{} scores for {} centers",
            scores.len(),
            selection.centers()
        )));
    }
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score at node {bad}")));
    }
    let mut r = vec![0.0; k];
    let mut counted = 0usize;
    for i in 0..selection.centers() {
        let nbrs = selection.neighbors(i);
        let Some(c) = consistency(scores, i, nbrs, eps) else {
            continue;
        };
        counted += 1;
        let phi = selection.phi(i);
        for (slot, &cj) in c.iter().enumerate() {
            if !(phi[slot] > 0.0) {
                return Err(Error::Consistency(format!(
                    "neighbor {} of {i} has zero mixture mass",
                    nbrs[slot]
                )));
            }
            let q = selection.q(i, slot);
            for s in 0..k {
                r[s] += cj * p[s] * q[s] / phi[slot];
            }
        }
    }
    if counted > 0 {
        r.iter_mut().for_each(|v| *v /= counted as f64);
    }
    Ok(RewardVector(r))
}

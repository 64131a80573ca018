//! MPPI over action sequences in latent space, scored by the
//! uncertainty-penalized return
//!
//! ```text
//! R = sum_{t<h} g^t (R(z_t, a_t) - lambda u_t) + g^h (Q(z_h, a_h) - lambda u_h)
//! ```
//!
//! where `u_t` is the spread of the Q-ensemble and `a_h` is the policy prior's
//! noiseless action.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::Batch;
use crate::worldmodel::{population_std, sample_pair, WorldModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    #[serde(rename = "planning_horizon")]
    pub horizon: usize,
    #[serde(rename = "population_size")]
    pub population: usize,
    /// Number of elite sequences kept per iteration (a count, despite the name).
    #[serde(rename = "elite_fraction")]
    pub elites: usize,
    pub policy_fraction: f64,
    #[serde(rename = "planning_iterations")]
    pub iterations: usize,
    #[serde(rename = "planning_temperature")]
    pub temperature: f64,
    #[serde(rename = "planning_momentum_coefficient")]
    pub momentum: f64,
    /// Weight of the ensemble-disagreement penalty.
    #[serde(rename = "uncertainty_coefficient")]
    pub lambda: f64,
    pub min_std: f64,
    pub max_std: f64,
    /// Mirrors the loss discount; not read from the config file.
    #[serde(skip)]
    pub discount: f64,
    /// Per-step noise on policy-prior rollouts.
    pub policy_noise: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            population: 512,
            elites: 50,
            policy_fraction: 0.1,
            iterations: 6,
            temperature: 0.5,
            momentum: 0.1,
            lambda: 1.0,
            min_std: 0.01,
            max_std: 0.5,
            discount: 0.99,
            policy_noise: 0.05,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.iterations == 0 {
            return Err(Error::config("planning_horizon and planning_iterations must be positive"));
        }
        if self.elites == 0 || self.elites > self.population {
            return Err(Error::config(format!(
                "elite count {} must lie in 1..=population ({})",
                self.elites, self.population
            )));
        }
        if !(0.0..1.0).contains(&self.policy_fraction) {
            return Err(Error::config(format!("policy_fraction must lie in [0, 1), got {}", self.policy_fraction)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("planning_temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("planning_momentum_coefficient must lie in [0, 1]"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("uncertainty_coefficient must be non-negative, got {}", self.lambda)));
        }
        if !(self.min_std > 0.0 && self.min_std <= self.max_std) {
            return Err(Error::config("need 0 < min_std <= max_std"));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::config("discount must lie in [0, 1)"));
        }
        if !(self.policy_noise >= 0.0) {
            return Err(Error::config("policy_noise must be non-negative"));
        }
        Ok(())
    }

    /// Policy-prior candidates per iteration.
    pub fn num_policy(&self) -> usize {
        (self.population as f64 * self.policy_fraction).round() as usize
    }
}

/// Diagonal Gaussian over `h x action_dim` action sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanState {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl PlanState {
    pub fn initial(horizon: usize, action_dim: usize, std: f64) -> Self {
        Self { mean: vec![vec![0.0; action_dim]; horizon], std: vec![vec![std; action_dim]; horizon] }
    }

    /// Drops the first step, zero-pads the end, resets the std.
    pub fn shifted(&self, std: f64) -> Self {
        let h = self.mean.len();
        let dim = self.mean.first().map(Vec::len).unwrap_or(0);
        let mut mean: Vec<Vec<f64>> = self.mean.iter().skip(1).cloned().collect();
        mean.push(vec![0.0; dim]);
        Self { mean, std: vec![vec![std; dim]; h] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    /// First action of the final mean.
    pub action: Vec<f64>,
    /// Fitted std of the first step, used as exploration noise.
    pub first_std: Vec<f64>,
    /// Warm start for the next environment step.
    pub next: PlanState,
    /// The final Gaussian before shifting.
    pub fitted: PlanState,
    /// Ensemble spread at `(z_0, action)`.
    pub uncertainty: f64,
    pub best_return: f64,
}

/// Scores every candidate. `actions[t]` holds the step-`t` actions of all
/// candidates, one row each; `pairs[k]` picks the two heads for candidate
/// `k`'s terminal pair-min.
pub fn estimate_returns(
    model: &WorldModel,
    z0: &[f64],
    actions: &[Batch],
    lambda: f64,
    gamma: f64,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let n = pairs.len();
    if actions.is_empty() || actions.iter().any(|a| a.rows() != n) {
        return Err(Error::shape("action batches and head pairs disagree on the candidate count"));
    }
    let penalize = lambda != 0.0;
    let mut z = Batch::broadcast(z0, n);
    let mut ret = vec![0.0; n];
    let mut disc = 1.0;
    for a in actions {
        let r = model.reward_batch(&z, a)?;
        if penalize {
            let u = spread(&model.q_all_batch(&z, a, false)?, n);
            for k in 0..n {
                ret[k] += disc * (r[k] - lambda * u[k]);
            }
        } else {
            for k in 0..n {
                ret[k] += disc * r[k];
            }
        }
        z = model.next_latent_batch(&z, a)?;
        disc *= gamma;
    }
    let a_h = model.policy_mean_batch(&z)?;
    let q = model.q_all_batch(&z, &a_h, false)?;
    let u = if penalize { spread(&q, n) } else { Vec::new() };
    for k in 0..n {
        let (i, j) = pairs[k];
        let qk = q[i][k].min(q[j][k]);
        ret[k] += if penalize { disc * (qk - lambda * u[k]) } else { disc * qk };
    }
    if let Some(k) = ret.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("estimated return of candidate {k} is {}", ret[k])));
    }
    Ok(ret)
}

fn spread(heads: &[Vec<f64>], n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| population_std(&heads.iter().map(|h| h[k]).collect::<Vec<_>>()))
        .collect()
}

/// Return of a single `h x action_dim` sequence.
pub fn estimate_return<R: Rng + ?Sized>(
    model: &WorldModel,
    z0: &[f64],
    actions: &[Vec<f64>],
    lambda: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<f64> {
    let pair = sample_pair(model.num_q(), rng)?;
    let batches: Vec<Batch> = actions.iter().map(|a| Batch::from_row(a)).collect();
    Ok(estimate_returns(model, z0, &batches, lambda, gamma, &[pair])?[0])
}

/// Temperature-weighted mean and std of the elites (rows of `elites[t]`).
pub fn refit_elites(elites: &[Batch], returns: &[f64], temperature: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = returns.iter().map(|r| (temperature * (r - max)).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut mean = Vec::with_capacity(elites.len());
    let mut std = Vec::with_capacity(elites.len());
    for step in elites {
        let dim = step.cols();
        let mut m = vec![0.0; dim];
        for (k, wk) in w.iter().enumerate() {
            for (d, v) in step.row(k).iter().enumerate() {
                m[d] += wk * v;
            }
        }
        m.iter_mut().for_each(|v| *v /= total);
        let mut var = vec![0.0; dim];
        for (k, wk) in w.iter().enumerate() {
            for (d, v) in step.row(k).iter().enumerate() {
                var[d] += wk * (v - m[d]) * (v - m[d]);
            }
        }
        std.push(var.iter().map(|v| (v / total).sqrt()).collect());
        mean.push(m);
    }
    (mean, std)
}

/// One MPPI solve from state `s`. `prev` is the warm start from the previous
/// step (or `None` at the start of an episode).
pub fn plan<R: Rng + ?Sized>(
    model: &WorldModel,
    s: &[f64],
    prev: Option<&PlanState>,
    cfg: &PlanConfig,
    rng: &mut R,
) -> Result<PlanOutput> {
    cfg.validate()?;
    let h = cfg.horizon;
    let dim = model.config().action_dim;
    let z0 = model.encode(s)?;
    let mut state = match prev {
        Some(p) if p.mean.len() == h && p.mean.iter().all(|m| m.len() == dim) => p.clone(),
        Some(_) => return Err(Error::shape("warm-start plan state does not match horizon/action dim")),
        None => PlanState::initial(h, dim, cfg.max_std),
    };
    let n_pi = cfg.num_policy();
    let n_gauss = cfg.population - n_pi;
    let pop = cfg.population;
    let mut best_return = f64::NEG_INFINITY;

    for _ in 0..cfg.iterations {
        // candidates, time-major
        let mut cand: Vec<Batch> = (0..h).map(|_| Batch::zeros(pop, dim)).collect();
        for t in 0..h {
            for k in 0..n_gauss {
                let row = cand[t].row_mut(k);
                for d in 0..dim {
                    let e: f64 = rng.sample(StandardNormal);
                    row[d] = (state.mean[t][d] + state.std[t][d] * e).clamp(-1.0, 1.0);
                }
            }
        }
        if n_pi > 0 {
            let mut z = Batch::broadcast(&z0, n_pi);
            for t in 0..h {
                let mut a = model.policy_mean_batch(&z)?;
                for v in a.data_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v = (*v + cfg.policy_noise * e).clamp(-1.0, 1.0);
                }
                for k in 0..n_pi {
                    cand[t].row_mut(n_gauss + k).copy_from_slice(a.row(k));
                }
                if t + 1 < h {
                    z = model.next_latent_batch(&z, &a)?;
                }
            }
        }
        let pairs = (0..pop).map(|_| sample_pair(model.num_q(), rng)).collect::<Result<Vec<_>>>()?;
        let returns = match estimate_returns(model, &z0, &cand, cfg.lambda, cfg.discount, &pairs) {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => return Err(Error::Planning(msg)),
            Err(e) => return Err(e),
        };

        // top-k by return, ties broken by candidate index
        let mut order: Vec<usize> = (0..pop).collect();
        order.sort_by(|&a, &b| returns[b].total_cmp(&returns[a]).then(a.cmp(&b)));
        let elite_idx = &order[..cfg.elites];
        let elite_returns: Vec<f64> = elite_idx.iter().map(|&k| returns[k]).collect();
        let elites: Vec<Batch> = cand
            .iter()
            .map(|step| {
                let mut b = Batch::zeros(cfg.elites, dim);
                for (r, &k) in elite_idx.iter().enumerate() {
                    b.row_mut(r).copy_from_slice(step.row(k));
                }
                b
            })
            .collect();
        best_return = elite_returns[0];
        let (new_mean, new_std) = refit_elites(&elites, &elite_returns, cfg.temperature);
        for t in 0..h {
            for d in 0..dim {
                state.mean[t][d] = cfg.momentum * state.mean[t][d] + (1.0 - cfg.momentum) * new_mean[t][d];
                state.std[t][d] = new_std[t][d].clamp(cfg.min_std, cfg.max_std);
            }
        }
    }

    let action: Vec<f64> = state.mean[0].iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let uncertainty = model.q_uncertainty(&z0, &action)?;
    Ok(PlanOutput {
        first_std: state.std[0].clone(),
        next: state.shifted(cfg.max_std),
        fitted: state,
        action,
        uncertainty,
        best_return,
    })
}

/// Adds Gaussian exploration noise with per-dimension `std`, clamped to the box.
pub fn explore<R: Rng + ?Sized>(action: &[f64], std: &[f64], rng: &mut R) -> Vec<f64> {
    action
        .iter()
        .zip(std)
        .map(|(a, s)| {
            let e: f64 = rng.sample(StandardNormal);
            (a + s * e).clamp(-1.0, 1.0)
        })
        .collect()
}

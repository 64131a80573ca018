//! Latent world model: encoder, latent dynamics, reward head, an ensemble of
//! Q heads, a state-value head and a policy prior, plus slow target copies of
//! the encoder and Q heads.
//!
//! Networks consume and produce raw vectors; `za` inputs are the latent
//! followed by the action.

mod update;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{Batch, Checkpoint, Entry, Mlp, Parameters};

pub use update::{draw_pairs, Evaluation, LossParts, ModelGrads, Optimizers, Terms, UpdateMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub num_q: usize,
}

impl ModelConfig {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self { state_dim, action_dim, latent_dim: 50, hidden_dim: 512, hidden_layers: 2, num_q: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("latent_state_dimension", self.latent_dim),
            ("mlp_hidden_size", self.hidden_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.num_q < 2 {
            return Err(Error::config(format!(
                "model.q_ensemble_size must be at least 2 for pair sampling, got {}",
                self.num_q
            )));
        }
        Ok(())
    }
}

/// Coefficients of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    #[serde(rename = "latent_dynamics_loss_coefficient")]
    pub consistency_coef: f64,
    #[serde(rename = "reward_loss_coefficient")]
    pub reward_coef: f64,
    /// Shared by the Q regression and the expectile value loss.
    #[serde(rename = "value_loss_coefficient")]
    pub value_coef: f64,
    /// Per-step decay `rho^t` inside the horizon.
    #[serde(rename = "temporal_coefficient")]
    pub temporal_coef: f64,
    pub discount: f64,
    pub expectile: f64,
    pub awr_temperature: f64,
    pub awr_weight_cap: f64,
    /// Fixed std of the Gaussian policy likelihood on pre-tanh actions.
    pub policy_std: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            consistency_coef: 20.0,
            reward_coef: 0.5,
            value_coef: 0.1,
            temporal_coef: 0.5,
            discount: 0.99,
            expectile: 0.9,
            awr_temperature: 3.0,
            awr_weight_cap: 100.0,
            policy_std: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("latent_dynamics_loss_coefficient", self.consistency_coef),
            ("reward_loss_coefficient", self.reward_coef),
            ("value_loss_coefficient", self.value_coef),
            ("awr_temperature", self.awr_temperature),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return Err(Error::config(format!("expectile must lie in (0, 1), got {}", self.expectile)));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::config(format!("discount must lie in [0, 1), got {}", self.discount)));
        }
        if !(self.temporal_coef > 0.0 && self.temporal_coef <= 1.0) {
            return Err(Error::config(format!("temporal_coefficient must lie in (0, 1], got {}", self.temporal_coef)));
        }
        if !(self.awr_weight_cap > 0.0) || !(self.policy_std > 0.0) {
            return Err(Error::config("awr_weight_cap and policy_std must be positive"));
        }
        Ok(())
    }
}

/// Optimizer and target-network settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    /// Global-norm clip, applied to the policy separately from the rest.
    pub grad_clip: f64,
    pub polyak: f64,
    #[serde(rename = "target_network_update_frequency")]
    pub target_update_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-4, grad_clip: 10.0, polyak: 0.99, target_update_every: 2 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.polyak) {
            return Err(Error::config(format!("polyak must lie in [0, 1], got {}", self.polyak)));
        }
        if self.target_update_every == 0 {
            return Err(Error::config("target_network_update_frequency must be positive"));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::config("grad_clip must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    config: ModelConfig,
    pub encoder: Mlp,
    pub dynamics: Mlp,
    pub reward: Mlp,
    pub q_heads: Vec<Mlp>,
    pub value: Mlp,
    /// Outputs the pre-tanh action mean.
    pub policy: Mlp,
    pub target_encoder: Mlp,
    pub target_q: Vec<Mlp>,
}

impl WorldModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ModelConfig { state_dim, action_dim, latent_dim, hidden_dim, hidden_layers, num_q } = config;
        let za = latent_dim + action_dim;
        let encoder = Mlp::new(state_dim, hidden_dim, hidden_layers, latent_dim, rng);
        let dynamics = Mlp::new(za, hidden_dim, hidden_layers, latent_dim, rng);
        let reward = Mlp::new(za, hidden_dim, hidden_layers, 1, rng);
        let q_heads: Vec<Mlp> = (0..num_q).map(|_| Mlp::new(za, hidden_dim, hidden_layers, 1, rng)).collect();
        let value = Mlp::new(latent_dim, hidden_dim, hidden_layers, 1, rng);
        let policy = Mlp::new(latent_dim, hidden_dim, hidden_layers, action_dim, rng);
        Ok(Self {
            config,
            target_encoder: encoder.clone(),
            target_q: q_heads.clone(),
            encoder,
            dynamics,
            reward,
            q_heads,
            value,
            policy,
        })
    }

    /// All-zero networks (every head outputs 0).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ModelConfig { state_dim, action_dim, latent_dim, hidden_dim, hidden_layers, num_q } = config;
        let za = latent_dim + action_dim;
        let q = Mlp::zeros(za, hidden_dim, hidden_layers, 1);
        let encoder = Mlp::zeros(state_dim, hidden_dim, hidden_layers, latent_dim);
        Ok(Self {
            config,
            target_encoder: encoder.clone(),
            encoder,
            dynamics: Mlp::zeros(za, hidden_dim, hidden_layers, latent_dim),
            reward: Mlp::zeros(za, hidden_dim, hidden_layers, 1),
            q_heads: vec![q.clone(); num_q],
            target_q: vec![q; num_q],
            value: Mlp::zeros(latent_dim, hidden_dim, hidden_layers, 1),
            policy: Mlp::zeros(latent_dim, hidden_dim, hidden_layers, action_dim),
        })
    }

    /// Assembles a model from explicit networks; targets start as copies.
    pub fn from_networks(
        encoder: Mlp,
        dynamics: Mlp,
        reward: Mlp,
        q_heads: Vec<Mlp>,
        value: Mlp,
        policy: Mlp,
    ) -> Result<Self> {
        let latent_dim = encoder.output_dim();
        let action_dim = policy.output_dim();
        let za = latent_dim + action_dim;
        let config = ModelConfig {
            state_dim: encoder.input_dim(),
            action_dim,
            latent_dim,
            hidden_dim: encoder.layers()[0].out_dim(),
            hidden_layers: encoder.activations().len(),
            num_q: q_heads.len(),
        };
        let ok = dynamics.input_dim() == za
            && dynamics.output_dim() == latent_dim
            && reward.input_dim() == za
            && reward.output_dim() == 1
            && q_heads.iter().all(|q| q.input_dim() == za && q.output_dim() == 1)
            && value.input_dim() == latent_dim
            && value.output_dim() == 1
            && policy.input_dim() == latent_dim;
        if !ok || q_heads.is_empty() {
            return Err(Error::shape("world model networks do not fit together"));
        }
        Ok(Self {
            config,
            target_encoder: encoder.clone(),
            target_q: q_heads.clone(),
            encoder,
            dynamics,
            reward,
            q_heads,
            value,
            policy,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_q(&self) -> usize {
        self.q_heads.len()
    }

    pub fn is_finite(&self) -> bool {
        self.online_networks().all(Mlp::is_finite)
            && self.target_encoder.is_finite()
            && self.target_q.iter().all(Mlp::is_finite)
    }

    /// Online networks in a fixed order: encoder, dynamics, reward, Q heads,
    /// value, policy.
    pub fn online_networks(&self) -> impl Iterator<Item = &Mlp> {
        [&self.encoder, &self.dynamics, &self.reward]
            .into_iter()
            .chain(self.q_heads.iter())
            .chain([&self.value, &self.policy])
    }

    fn online_networks_mut(&mut self) -> impl Iterator<Item = &mut Mlp> {
        [&mut self.encoder, &mut self.dynamics, &mut self.reward]
            .into_iter()
            .chain(self.q_heads.iter_mut())
            .chain([&mut self.value, &mut self.policy])
    }

    fn za(&self, z: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.config.latent_dim || a.len() != self.config.action_dim {
            return Err(Error::shape(format!(
                "expected latent {} / action {}, got {} / {}",
                self.config.latent_dim,
                self.config.action_dim,
                z.len(),
                a.len()
            )));
        }
        let mut v = z.to_vec();
        v.extend_from_slice(a);
        Ok(v)
    }

    pub fn encode(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.encoder.forward(s)
    }

    pub fn next_latent(&self, z: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.dynamics.forward(&self.za(z, a)?)
    }

    pub fn predict_reward(&self, z: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.reward.forward(&self.za(z, a)?)?[0])
    }

    /// One value per head, in head order.
    pub fn q_all(&self, z: &[f64], a: &[f64], use_target: bool) -> Result<Vec<f64>> {
        let za = self.za(z, a)?;
        let heads = if use_target { &self.target_q } else { &self.q_heads };
        heads.iter().map(|q| Ok(q.forward(&za)?[0])).collect()
    }

    /// Minimum over two distinct, uniformly chosen heads.
    pub fn q_estimate<R: Rng + ?Sized>(&self, z: &[f64], a: &[f64], rng: &mut R, use_target: bool) -> Result<f64> {
        let (i, j) = sample_pair(self.num_q(), rng)?;
        let q = self.q_all(z, a, use_target)?;
        Ok(q[i].min(q[j]))
    }

    /// Population standard deviation of the online heads.
    pub fn q_uncertainty(&self, z: &[f64], a: &[f64]) -> Result<f64> {
        Ok(population_std(&self.q_all(z, a, false)?))
    }

    pub fn state_value(&self, z: &[f64]) -> Result<f64> {
        Ok(self.value.forward(z)?[0])
    }

    /// `r + gamma * V(z')`; a plain number, so nothing flows back through it.
    pub fn td_target(&self, r: f64, z_next: &[f64], gamma: f64) -> Result<f64> {
        Ok(r + gamma * self.state_value(z_next)?)
    }

    /// Squashed policy mean `tanh(pi(z))`.
    pub fn policy_mean(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.policy.forward(z)?.into_iter().map(f64::tanh).collect())
    }

    /// Squashed mean plus Gaussian noise, clamped to `[-1, 1]`.
    pub fn policy_action<R: Rng + ?Sized>(&self, z: &[f64], noise_std: f64, rng: &mut R) -> Result<Vec<f64>> {
        if !(noise_std >= 0.0) {
            return Err(Error::config(format!("policy noise must be non-negative, got {noise_std}")));
        }
        let mut a = self.policy_mean(z)?;
        if noise_std > 0.0 {
            for v in &mut a {
                let e: f64 = rng.sample(StandardNormal);
                *v = (*v + noise_std * e).clamp(-1.0, 1.0);
            }
        }
        Ok(a)
    }

    pub fn encode_batch(&self, s: &Batch) -> Result<Batch> {
        self.encoder.forward_batch(s)
    }

    pub fn next_latent_batch(&self, z: &Batch, a: &Batch) -> Result<Batch> {
        self.dynamics.forward_batch(&z.hcat(a)?)
    }

    pub fn reward_batch(&self, z: &Batch, a: &Batch) -> Result<Vec<f64>> {
        Ok(self.reward.forward_batch(&z.hcat(a)?)?.into_data())
    }

    /// `[head][row]` values.
    pub fn q_all_batch(&self, z: &Batch, a: &Batch, use_target: bool) -> Result<Vec<Vec<f64>>> {
        let za = z.hcat(a)?;
        let heads = if use_target { &self.target_q } else { &self.q_heads };
        heads.iter().map(|q| Ok(q.forward_batch(&za)?.into_data())).collect()
    }

    pub fn value_batch(&self, z: &Batch) -> Result<Vec<f64>> {
        Ok(self.value.forward_batch(z)?.into_data())
    }

    pub fn policy_mean_batch(&self, z: &Batch) -> Result<Batch> {
        let mut out = self.policy.forward_batch(z)?;
        for v in out.data_mut() {
            *v = v.tanh();
        }
        Ok(out)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) -> Result<()> {
        let cfg = serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.push("model/config", Entry::Text(cfg));
        ck.push("model/encoder", Entry::Network(self.encoder.clone()));
        ck.push("model/dynamics", Entry::Network(self.dynamics.clone()));
        ck.push("model/reward", Entry::Network(self.reward.clone()));
        for (i, q) in self.q_heads.iter().enumerate() {
            ck.push(format!("model/q{i}"), Entry::Network(q.clone()));
        }
        ck.push("model/value", Entry::Network(self.value.clone()));
        ck.push("model/policy", Entry::Network(self.policy.clone()));
        ck.push("model/target_encoder", Entry::Network(self.target_encoder.clone()));
        for (i, q) in self.target_q.iter().enumerate() {
            ck.push(format!("model/target_q{i}"), Entry::Network(q.clone()));
        }
        Ok(())
    }

    pub fn load_from(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&ck.text("model/config")?)
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let q_heads = (0..config.num_q).map(|i| ck.network(&format!("model/q{i}"))).collect::<Result<Vec<_>>>()?;
        let target_q =
            (0..config.num_q).map(|i| ck.network(&format!("model/target_q{i}"))).collect::<Result<Vec<_>>>()?;
        let mut model = Self::from_networks(
            ck.network("model/encoder")?,
            ck.network("model/dynamics")?,
            ck.network("model/reward")?,
            q_heads,
            ck.network("model/value")?,
            ck.network("model/policy")?,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        model.target_encoder = ck.network("model/target_encoder")?;
        model.target_q = target_q;
        if model.config != config
            || !model.target_encoder.same_shape(&model.encoder)
            || model.target_q.iter().zip(&model.q_heads).any(|(t, q)| !t.same_shape(q))
        {
            return Err(Error::Checkpoint("model networks disagree with the stored config".into()));
        }
        Ok(model)
    }
}

/// Flat view over the online networks only; targets are not parameters.
impl Parameters for WorldModel {
    fn flatten(&self) -> Vec<f64> {
        self.online_networks().flat_map(Mlp::flatten).collect()
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.online_networks().map(Mlp::num_params).sum();
        if flat.len() != total {
            return Err(Error::shape(format!("flat vector has {} entries, model has {total}", flat.len())));
        }
        let mut offset = 0;
        for net in self.online_networks_mut() {
            let n = net.num_params();
            net.load_flat(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }
}

/// Two distinct indices drawn uniformly from `0..n`.
pub fn sample_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::config(format!("pair sampling needs at least 2 heads, got {n}")));
    }
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    Ok((i, j))
}

/// Divides by `n`; zero for fewer than two values.
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    var.sqrt()
}

/// `|tau - 1{q - v < 0}| * (q - v)^2`.
pub fn expectile_loss(q: f64, v: f64, tau: f64) -> f64 {
    let d = q - v;
    expectile_weight(d, tau) * d * d
}

pub(crate) fn expectile_weight(diff: f64, tau: f64) -> f64 {
    if diff < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// `min(exp(beta * (q - v)), cap)`.
pub fn awr_weight(q: f64, v: f64, beta: f64, cap: f64) -> f64 {
    (beta * (q - v)).exp().min(cap)
}

/// Largest |action| before `atanh`, keeping log-likelihoods finite at the box edge.
pub const ACTION_EDGE: f64 = 1.0 - 1e-3;

/// Pre-tanh action for a squashed action.
pub fn unsquash(a: f64) -> f64 {
    a.clamp(-ACTION_EDGE, ACTION_EDGE).atanh()
}

/// Log-density of action `a` under `tanh(N(mean, std^2))`, with `mean` the
/// pre-tanh policy output.
pub fn policy_log_prob(mean: &[f64], action: &[f64], std: f64) -> f64 {
    let log_norm = std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
    mean.iter()
        .zip(action)
        .map(|(m, a)| {
            let ac = a.clamp(-ACTION_EDGE, ACTION_EDGE);
            let u = ac.atanh();
            -0.5 * ((u - m) / std).powi(2) - log_norm - (1.0 - ac * ac).ln()
        })
        .sum()
}

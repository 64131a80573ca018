//! Joint loss, its hand-written reverse pass and the optimizer step.
//!
//! Quantities that sit behind a stop-gradient are read from a separate
//! `frozen` model. During training `frozen` is the model itself; gradient
//! checks keep it fixed while the online parameters are perturbed, which makes
//! the stop-gradient contract directly testable.

use rand::Rng;

use super::{awr_weight, expectile_weight, population_std, sample_pair, unsquash, LossWeights, OptimConfig, WorldModel};
use crate::error::{Error, Result};
use crate::netcore::{
    clip_global_norm, polyak_update, AdamConfig, AdamState, Batch, Checkpoint, Entry, Mlp, MlpGrads,
};
use crate::replay::SubsequenceBatch;

/// Which loss terms contribute; all of them during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub consistency: bool,
    pub reward: bool,
    pub q: bool,
    pub v: bool,
    pub awr: bool,
}

impl Terms {
    pub const ALL: Terms = Terms { consistency: true, reward: true, q: true, v: true, awr: true };
    pub const NONE: Terms = Terms { consistency: false, reward: false, q: false, v: false, awr: false };
}

/// Loss value per term, already weighted by coefficients, `rho^t`, masks
/// and importance weights.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub consistency: f64,
    pub reward: f64,
    pub q: f64,
    pub v: f64,
    pub awr: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.consistency + self.reward + self.q + self.v + self.awr
    }

    pub fn is_finite(&self) -> bool {
        [self.consistency, self.reward, self.q, self.v, self.awr].iter().all(|v| v.is_finite())
    }
}

/// Gradients for the online networks, mirroring [`WorldModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: MlpGrads,
    pub dynamics: MlpGrads,
    pub reward: MlpGrads,
    pub q: Vec<MlpGrads>,
    pub value: MlpGrads,
    pub policy: MlpGrads,
}

impl ModelGrads {
    pub fn zeros_like(model: &WorldModel) -> Self {
        Self {
            encoder: MlpGrads::zeros_like(&model.encoder),
            dynamics: MlpGrads::zeros_like(&model.dynamics),
            reward: MlpGrads::zeros_like(&model.reward),
            q: model.q_heads.iter().map(MlpGrads::zeros_like).collect(),
            value: MlpGrads::zeros_like(&model.value),
            policy: MlpGrads::zeros_like(&model.policy),
        }
    }

    /// Same order as the model's flat parameter view.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.encoder.flatten();
        out.extend(self.dynamics.flatten());
        out.extend(self.reward.flatten());
        for q in &self.q {
            out.extend(q.flatten());
        }
        out.extend(self.value.flatten());
        out.extend(self.policy.flatten());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.dynamics.is_finite()
            && self.reward.is_finite()
            && self.q.iter().all(MlpGrads::is_finite)
            && self.value.is_finite()
            && self.policy.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub parts: LossParts,
    pub grads: ModelGrads,
    /// Mean absolute TD error of each sample over its unpadded steps.
    pub td_errors: Vec<f64>,
    pub mean_q: f64,
    pub mean_uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMetrics {
    pub parts: LossParts,
    pub total: f64,
    pub mean_q: f64,
    pub mean_uncertainty: f64,
    pub grad_norm: f64,
    pub policy_grad_norm: f64,
    pub td_errors: Vec<f64>,
}

/// Head pairs for the target pair-min, one per `(t, b)` in time-major order.
pub fn draw_pairs<R: Rng + ?Sized>(num_q: usize, horizon: usize, batch: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    (0..horizon * batch).map(|_| sample_pair(num_q, rng)).collect()
}

fn column(batch: &Batch) -> Vec<f64> {
    batch.column(0)
}

impl WorldModel {
    /// Loss and gradients on `batch`. `frozen` supplies every stop-gradient
    /// quantity: the consistency target (target encoder), the TD bootstrap
    /// `V(h(s'))`, the detached latent rollout used by the value and policy
    /// heads, the target-head pair-min and the AWR weight.
    pub fn evaluate(
        &self,
        frozen: &WorldModel,
        batch: &SubsequenceBatch,
        weights: &LossWeights,
        pairs: &[(usize, usize)],
        terms: Terms,
    ) -> Result<Evaluation> {
        batch.validate()?;
        let cfg = self.config;
        let (n, h, latent) = (batch.size(), batch.horizon, cfg.latent_dim);
        if batch.state_dim() != cfg.state_dim || batch.action_dim() != cfg.action_dim {
            return Err(Error::shape(format!(
                "batch dims {}/{} do not match model {}/{}",
                batch.state_dim(),
                batch.action_dim(),
                cfg.state_dim,
                cfg.action_dim
            )));
        }
        if frozen.config != cfg {
            return Err(Error::shape("frozen model differs in shape"));
        }
        if pairs.len() != n * h {
            return Err(Error::shape(format!("{} head pairs for {} samples", pairs.len(), n * h)));
        }
        let nq = self.num_q();
        let lw = weights;
        let sigma2 = lw.policy_std * lw.policy_std;

        // online forward with tapes
        let (z0, enc_tape) = self.encoder.forward_tape(&batch.states[0])?;
        let mut zs = vec![z0];
        let mut dyn_tapes = Vec::with_capacity(h);
        let mut rew = Vec::with_capacity(h);
        let mut qs = Vec::with_capacity(h);
        for t in 0..h {
            let za = zs[t].hcat(&batch.actions[t])?;
            let (zn, tape) = self.dynamics.forward_tape(&za)?;
            dyn_tapes.push(tape);
            zs.push(zn);
            rew.push(self.reward.forward_tape(&za)?);
            let heads = self.q_heads.iter().map(|q| q.forward_tape(&za)).collect::<Result<Vec<_>>>()?;
            qs.push(heads);
        }

        // detached latent rollout from the frozen model
        let mut z_det = frozen.encoder.forward_batch(&batch.states[0])?;

        let mut parts = LossParts::default();
        let mut grads = ModelGrads::zeros_like(self);
        let mut cons_grads = Vec::with_capacity(h);
        let mut rew_grads = Vec::with_capacity(h);
        let mut q_grads = Vec::with_capacity(h);
        let mut td_sum = vec![0.0; n];
        let mut td_count = vec![0.0; n];
        let (mut q_acc, mut u_acc, mut valid) = (0.0f64, 0.0f64, 0.0f64);

        for t in 0..h {
            let rho_t = lw.temporal_coef.powi(t as i32);
            let scale: Vec<f64> = (0..n)
                .map(|b| batch.weights[b] * batch.mask[t][b] * rho_t / (n * h) as f64)
                .collect();

            // consistency
            let target = frozen.target_encoder.forward_batch(&batch.states[t + 1])?;
            let mut gc = Batch::zeros(n, latent);
            if terms.consistency {
                for b in 0..n {
                    let (z, y) = (zs[t + 1].row(b), target.row(b));
                    let mut sq = 0.0;
                    for k in 0..latent {
                        let d = z[k] - y[k];
                        sq += d * d;
                        gc.row_mut(b)[k] = scale[b] * lw.consistency_coef * 2.0 * d / latent as f64;
                    }
                    parts.consistency += scale[b] * lw.consistency_coef * sq / latent as f64;
                }
            }
            cons_grads.push(gc);

            // reward
            let r_hat = column(&rew[t].0);
            let mut gr = Batch::zeros(n, 1);
            if terms.reward {
                for b in 0..n {
                    let d = r_hat[b] - batch.rewards[t][b];
                    parts.reward += scale[b] * lw.reward_coef * d * d;
                    gr.data_mut()[b] = scale[b] * lw.reward_coef * 2.0 * d;
                }
            }
            rew_grads.push(gr);

            // Q regression towards r + gamma * V(h(s'))
            let z_next = frozen.encoder.forward_batch(&batch.states[t + 1])?;
            let v_next = frozen.value_batch(&z_next)?;
            let q_vals: Vec<Vec<f64>> = qs[t].iter().map(|(out, _)| column(out)).collect();
            let mut gq = vec![Batch::zeros(n, 1); nq];
            for b in 0..n {
                let boot = if batch.terminals[t][b] { 0.0 } else { lw.discount * v_next[b] };
                let target_q = batch.rewards[t][b] + boot;
                let heads: Vec<f64> = q_vals.iter().map(|q| q[b]).collect();
                if batch.mask[t][b] > 0.0 {
                    let mean = heads.iter().sum::<f64>() / nq as f64;
                    td_sum[b] += (mean - target_q).abs();
                    td_count[b] += 1.0;
                    q_acc += mean;
                    u_acc += population_std(&heads);
                    valid += 1.0;
                }
                if terms.q {
                    for (i, q) in heads.iter().enumerate() {
                        let d = q - target_q;
                        parts.q += scale[b] * lw.value_coef * d * d;
                        gq[i].data_mut()[b] = scale[b] * lw.value_coef * 2.0 * d;
                    }
                }
            }
            q_grads.push(gq);

            // value (expectile) and policy (AWR) on detached latents
            let za_det = z_det.hcat(&batch.actions[t])?;
            let target_heads = frozen
                .target_q
                .iter()
                .map(|q| Ok(q.forward_batch(&za_det)?.into_data()))
                .collect::<Result<Vec<_>>>()?;
            let v_frozen = frozen.value_batch(&z_det)?;
            if terms.v || terms.awr {
                let (v_out, v_tape) = self.value.forward_tape(&z_det)?;
                let (mu, pi_tape) = self.policy.forward_tape(&z_det)?;
                let mut gv = Batch::zeros(n, 1);
                let mut gpi = Batch::zeros(n, cfg.action_dim);
                for b in 0..n {
                    let (i, j) = pairs[t * n + b];
                    let q_pair = target_heads[i][b].min(target_heads[j][b]);
                    if terms.v {
                        let v = v_out.data()[b];
                        let d = q_pair - v;
                        let w = expectile_weight(d, lw.expectile);
                        parts.v += scale[b] * lw.value_coef * w * d * d;
                        gv.data_mut()[b] = -scale[b] * lw.value_coef * 2.0 * w * d;
                    }
                    if terms.awr {
                        let aw = awr_weight(q_pair, v_frozen[b], lw.awr_temperature, lw.awr_weight_cap);
                        let a = batch.actions[t].row(b);
                        let m = mu.row(b);
                        parts.awr -= scale[b] * aw * super::policy_log_prob(m, a, lw.policy_std);
                        for k in 0..cfg.action_dim {
                            let u = unsquash(a[k]);
                            gpi.row_mut(b)[k] = -scale[b] * aw * (u - m[k]) / sigma2;
                        }
                    }
                }
                if terms.v {
                    self.value.backward_batch(&v_tape, &gv, &mut grads.value)?;
                }
                if terms.awr {
                    self.policy.backward_batch(&pi_tape, &gpi, &mut grads.policy)?;
                }
            }
            if t + 1 < h {
                z_det = frozen.dynamics.forward_batch(&za_det)?;
            }
        }

        // backpropagate through the open-loop latent rollout
        let mut carry = Batch::zeros(n, latent);
        for t in (0..h).rev() {
            let mut g_out = cons_grads[t].clone();
            g_out.add_assign(&carry);
            let mut g_za = self.dynamics.backward_batch(&dyn_tapes[t], &g_out, &mut grads.dynamics)?;
            if terms.reward {
                g_za.add_assign(&self.reward.backward_batch(&rew[t].1, &rew_grads[t], &mut grads.reward)?);
            }
            if terms.q {
                for (i, head) in self.q_heads.iter().enumerate() {
                    g_za.add_assign(&head.backward_batch(&qs[t][i].1, &q_grads[t][i], &mut grads.q[i])?);
                }
            }
            carry = g_za.split_cols(latent).0;
        }
        self.encoder.backward_batch(&enc_tape, &carry, &mut grads.encoder)?;

        let td_errors = td_sum.iter().zip(&td_count).map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 }).collect();
        let denom = valid.max(1.0);
        Ok(Evaluation { parts, grads, td_errors, mean_q: q_acc / denom, mean_uncertainty: u_acc / denom })
    }

    /// One optimizer step on `batch`; targets are Polyak-averaged every
    /// `target_update_every` updates. Nothing is modified if the loss or any
    /// gradient is non-finite.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        opt: &mut Optimizers,
        batch: &SubsequenceBatch,
        weights: &LossWeights,
        optim: &OptimConfig,
        rng: &mut R,
    ) -> Result<UpdateMetrics> {
        let pairs = draw_pairs(self.num_q(), batch.horizon, batch.size(), rng)?;
        let Evaluation { parts, mut grads, td_errors, mean_q, mean_uncertainty } =
            self.evaluate(self, batch, weights, &pairs, Terms::ALL)?;
        if !parts.is_finite() || !grads.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss or gradient: {parts:?}")));
        }
        let grad_norm = {
            let mut group: Vec<&mut MlpGrads> =
                vec![&mut grads.encoder, &mut grads.dynamics, &mut grads.reward, &mut grads.value];
            group.extend(grads.q.iter_mut());
            clip_global_norm(&mut group, optim.grad_clip)
        };
        let policy_grad_norm = clip_global_norm(&mut [&mut grads.policy], optim.grad_clip);
        opt.step(self, &grads)?;
        if opt.updates % optim.target_update_every == 0 {
            polyak_update(&mut self.target_encoder, &self.encoder, optim.polyak)?;
            for (t, q) in self.target_q.iter_mut().zip(&self.q_heads) {
                polyak_update(t, q, optim.polyak)?;
            }
        }
        Ok(UpdateMetrics {
            total: parts.total(),
            parts,
            mean_q,
            mean_uncertainty,
            grad_norm,
            policy_grad_norm,
            td_errors,
        })
    }
}

/// Adam state for every online network plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub encoder: AdamState,
    pub dynamics: AdamState,
    pub reward: AdamState,
    pub q: Vec<AdamState>,
    pub value: AdamState,
    pub policy: AdamState,
    pub updates: u64,
}

impl Optimizers {
    pub fn new(model: &WorldModel, learning_rate: f64) -> Self {
        let cfg = AdamConfig { learning_rate, ..AdamConfig::default() };
        Self {
            encoder: AdamState::new(&model.encoder, cfg),
            dynamics: AdamState::new(&model.dynamics, cfg),
            reward: AdamState::new(&model.reward, cfg),
            q: model.q_heads.iter().map(|q| AdamState::new(q, cfg)).collect(),
            value: AdamState::new(&model.value, cfg),
            policy: AdamState::new(&model.policy, cfg),
            updates: 0,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        for s in self.states_mut() {
            s.config.learning_rate = lr;
        }
    }

    fn states(&self) -> impl Iterator<Item = &AdamState> {
        [&self.encoder, &self.dynamics, &self.reward]
            .into_iter()
            .chain(self.q.iter())
            .chain([&self.value, &self.policy])
    }

    fn states_mut(&mut self) -> impl Iterator<Item = &mut AdamState> {
        [&mut self.encoder, &mut self.dynamics, &mut self.reward]
            .into_iter()
            .chain(self.q.iter_mut())
            .chain([&mut self.value, &mut self.policy])
    }

    fn step(&mut self, model: &mut WorldModel, grads: &ModelGrads) -> Result<()> {
        self.encoder.step(&mut model.encoder, &grads.encoder)?;
        self.dynamics.step(&mut model.dynamics, &grads.dynamics)?;
        self.reward.step(&mut model.reward, &grads.reward)?;
        for ((s, q), g) in self.q.iter_mut().zip(model.q_heads.iter_mut()).zip(&grads.q) {
            s.step(q, g)?;
        }
        self.value.step(&mut model.value, &grads.value)?;
        self.policy.step(&mut model.policy, &grads.policy)?;
        self.updates += 1;
        Ok(())
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        let lr = self.encoder.config.learning_rate;
        ck.push("adam/meta", Entry::Array(vec![self.updates as f64, lr]));
        for (i, s) in self.states().enumerate() {
            ck.push(format!("adam/{i}/m"), Entry::Array(s.m.flatten()));
            ck.push(format!("adam/{i}/v"), Entry::Array(s.v.flatten()));
            ck.push(format!("adam/{i}/step"), Entry::Array(vec![s.step as f64]));
        }
    }

    pub fn load_from(ck: &Checkpoint, model: &WorldModel) -> Result<Self> {
        let meta = ck.array("adam/meta")?;
        if meta.len() != 2 {
            return Err(Error::Checkpoint("adam/meta must hold two values".into()));
        }
        let mut opt = Self::new(model, meta[1]);
        opt.updates = meta[0] as u64;
        let nets: Vec<&Mlp> = model.online_networks().collect();
        for (i, (s, net)) in opt.states_mut().zip(nets).enumerate() {
            s.m = MlpGrads::from_flat(net, &ck.array(&format!("adam/{i}/m"))?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            s.v = MlpGrads::from_flat(net, &ck.array(&format!("adam/{i}/v"))?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let step = ck.array(&format!("adam/{i}/step"))?;
            s.step = step.first().copied().unwrap_or(0.0) as u64;
        }
        Ok(opt)
    }
}

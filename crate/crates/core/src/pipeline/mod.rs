//! The two training stages and the evaluation protocol.
//!
//! [`Trainer`] owns the model, its optimizers and both replay buffers.
//! [`Trainer::pretrain`] only samples the offline buffer and never touches an
//! environment. [`Trainer::finetune`] alternates one planner-driven episode
//! with `episode_len * updates_per_online_step` balanced updates.
//! [`evaluate`] plans without exploration noise on a fixed seed grid and
//! leaves the model untouched.
//!
//! Randomness is split into independent ChaCha streams (initialization,
//! pretraining, finetuning updates, acting) derived from the run seed, so a
//! finetune resumed from a pretrain checkpoint matches an uninterrupted run.

mod metrics;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::envs::{rollout, train_seed, EnvSpec, Environment, Episode, ToyEnv, EVAL_SEED_BASE};
use crate::error::{Error, Result};
use crate::netcore::{Checkpoint, Entry};
use crate::planner::{explore, plan, PlanConfig, PlanState};
use crate::replay::{sample_balanced, Dataset, EpisodeBuffer, Source};
use crate::worldmodel::{Optimizers, UpdateMetrics, WorldModel};

pub use metrics::{EpisodeColumns, MetricsRow, RunDir, METRICS_HEADER, TIMING_HEADER};

const STREAM_INIT: u64 = 0;
const STREAM_PRETRAIN: u64 = 1;
const STREAM_FINETUNE: u64 = 2;
const STREAM_ACT: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    /// Online training of a pretrained model.
    Finetune,
    /// Online training from scratch.
    Online,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Online => "online",
        }
    }
}

/// Outcome of one online trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    /// 1-based.
    pub trial: usize,
    pub episode_return: f64,
    pub success: bool,
    pub steps: usize,
    /// Planning failed mid-episode; counted as a failure, nothing stored.
    pub aborted: bool,
    pub mean_uncertainty: f64,
    pub max_uncertainty: f64,
    pub updates: usize,
    pub mean_loss: f64,
    pub mean_q: f64,
}

/// Ensemble spread at the emitted actions of one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub mean_uncertainty: f64,
    pub max_uncertainty: f64,
}

/// Plans every step from `reset(seed)`, warm-starting from the previous
/// solve. With `exploring`, Gaussian noise with the fitted first-step std is
/// added to each emitted action.
pub fn run_episode<E: Environment + ?Sized, R: Rng + ?Sized>(
    model: &WorldModel,
    env: &E,
    seed: u64,
    cfg: &PlanConfig,
    rng: &mut R,
    exploring: bool,
    provenance: &str,
) -> Result<(Episode, EpisodeStats)> {
    let mut prev: Option<PlanState> = None;
    let mut spread = Vec::with_capacity(env.episode_length());
    let episode = rollout(env, seed, provenance, |s, _| {
        let out = plan(model, s, prev.as_ref(), cfg, rng)?;
        spread.push(out.uncertainty);
        let action = if exploring { explore(&out.action, &out.first_std, rng) } else { out.action };
        prev = Some(out.next);
        Ok(action)
    })?;
    let mean = spread.iter().sum::<f64>() / spread.len().max(1) as f64;
    let max = spread.iter().copied().fold(0.0f64, f64::max);
    Ok((episode, EpisodeStats { mean_uncertainty: mean, max_uncertainty: max }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub seed: u64,
    pub success: bool,
    pub episode_return: f64,
    pub steps: usize,
    pub mean_uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub success_rate: f64,
    pub mean_return: f64,
    pub episodes: Vec<EvalEpisode>,
}

/// Deterministic evaluation on reset seeds `EVAL_SEED_BASE + i`. `seed` only
/// drives the planner's sampling; episodes run in parallel and are reduced
/// in index order.
pub fn evaluate<E: Environment + ?Sized>(
    model: &WorldModel,
    env: &E,
    n_episodes: usize,
    seed: u64,
    cfg: &PlanConfig,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let episodes = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let reset = EVAL_SEED_BASE + i as u64;
            let mut rng = stream(seed, reset);
            let (ep, stats) = run_episode(model, env, reset, cfg, &mut rng, false, "evaluation")?;
            Ok(EvalEpisode {
                seed: reset,
                success: ep.success,
                episode_return: ep.total_reward(),
                steps: ep.len(),
                mean_uncertainty: stats.mean_uncertainty,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = episodes.len() as f64;
    let successes = episodes.iter().filter(|e| e.success).count();
    let total: f64 = episodes.iter().map(|e| e.episode_return).sum();
    Ok(EvalReport { success_rate: successes as f64 / n, mean_return: total / n, episodes })
}

fn check_dataset(env: &EnvSpec, data: &Dataset) -> Result<()> {
    if data.env.id != env.id
        || data.env.state_dim() != env.state_dim()
        || data.env.action_dim() != env.action_dim()
    {
        return Err(Error::config(format!(
            "dataset was recorded on {} but the run uses {}",
            data.env.id.as_str(),
            env.id.as_str()
        )));
    }
    Ok(())
}

/// Model, optimizer state and replay buffers of one run.
#[derive(Debug)]
pub struct Trainer {
    cfg: RunConfig,
    env: ToyEnv,
    pub model: WorldModel,
    pub opt: Optimizers,
    pub offline: EpisodeBuffer,
    pub online: EpisodeBuffer,
    /// Every online episode in collection order (evictions included).
    collected: Vec<Episode>,
    trials: usize,
    pretrain_rng: ChaCha8Rng,
    finetune_rng: ChaCha8Rng,
    act_rng: ChaCha8Rng,
    run: Option<RunDir>,
}

impl Trainer {
    /// Fresh model. `offline` fills the offline buffer when given.
    pub fn new(cfg: &RunConfig, offline: Option<&Dataset>, run: Option<RunDir>) -> Result<Self> {
        cfg.validate()?;
        let model = WorldModel::new(cfg.model_config(), &mut stream(cfg.seed, STREAM_INIT))?;
        Self::assemble(cfg, model, None, offline, run)
    }

    /// Model and optimizer state restored from `ck`, which must match the
    /// configured environment and network shapes.
    pub fn from_checkpoint(
        cfg: &RunConfig,
        ck: &Checkpoint,
        offline: Option<&Dataset>,
        run: Option<RunDir>,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = WorldModel::load_from(ck)?;
        if *model.config() != cfg.model_config() {
            return Err(Error::config(format!(
                "checkpoint model {:?} does not match the configured {:?}",
                model.config(),
                cfg.model_config()
            )));
        }
        if let Ok(text) = ck.text("run/config") {
            let saved = RunConfig::from_toml_str(&text)?;
            if saved.env.id != cfg.env.id {
                return Err(Error::config(format!(
                    "checkpoint was trained on {} but the run uses {}",
                    saved.env.id.as_str(),
                    cfg.env.id.as_str()
                )));
            }
        }
        let opt = Optimizers::load_from(ck, &model)?;
        let mut trainer = Self::assemble(cfg, model, Some(opt), offline, run)?;
        // priorities only carry over to the same dataset
        if let Ok(p) = ck.array("replay/offline_priorities") {
            if !p.is_empty() && p.len() == trainer.offline.num_starts() {
                trainer.offline.set_priorities(&p)?;
            }
        }
        Ok(trainer)
    }

    fn assemble(
        cfg: &RunConfig,
        model: WorldModel,
        opt: Option<Optimizers>,
        offline: Option<&Dataset>,
        run: Option<RunDir>,
    ) -> Result<Self> {
        let env = ToyEnv::new(cfg.env.clone())?;
        let h = cfg.planner.horizon;
        let per = cfg.replay.per();
        let mut off = EpisodeBuffer::new(Source::Offline, h, None, per);
        if let Some(data) = offline {
            check_dataset(&cfg.env, data)?;
            for ep in &data.episodes {
                off.add_episode(ep.clone())?;
            }
        }
        let mut opt = opt.unwrap_or_else(|| Optimizers::new(&model, cfg.optim.learning_rate));
        opt.set_learning_rate(cfg.optim.learning_rate);
        Ok(Self {
            env,
            opt,
            model,
            offline: off,
            online: EpisodeBuffer::new(Source::Online, h, Some(cfg.replay.online_capacity), per),
            collected: Vec::new(),
            trials: 0,
            pretrain_rng: stream(cfg.seed, STREAM_PRETRAIN),
            finetune_rng: stream(cfg.seed, STREAM_FINETUNE),
            act_rng: stream(cfg.seed, STREAM_ACT),
            run,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn env(&self) -> &ToyEnv {
        &self.env
    }

    pub fn collected(&self) -> &[Episode] {
        &self.collected
    }

    pub fn updates(&self) -> u64 {
        self.opt.updates
    }

    pub fn run_dir(&self) -> Option<&RunDir> {
        self.run.as_ref()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.model.save_into(&mut ck)?;
        self.opt.save_into(&mut ck);
        ck.push("run/config", Entry::Text(self.cfg.to_canonical_toml()));
        ck.push("replay/offline_priorities", Entry::Array(self.offline.priorities()));
        Ok(ck)
    }

    /// Writes `<run>/<stage>_<step>.ckpt` when a run directory is attached.
    pub fn save_checkpoint(&mut self, stage: Stage) -> Result<Option<PathBuf>> {
        let Some(run) = &self.run else { return Ok(None) };
        let path = run.checkpoint_path(stage, self.opt.updates);
        self.checkpoint()?.save(&path)?;
        if let Some(run) = &mut self.run {
            run.write_timing(stage, self.opt.updates, None)?;
        }
        Ok(Some(path))
    }

    fn update_once(&mut self, stage: Stage, trial: Option<usize>) -> Result<UpdateMetrics> {
        let mut no_online;
        let (rng, online) = match stage {
            Stage::Pretrain => {
                no_online = EpisodeBuffer::new(Source::Online, self.cfg.planner.horizon, None, self.cfg.replay.per());
                (&mut self.pretrain_rng, &mut no_online)
            }
            Stage::Finetune | Stage::Online => (&mut self.finetune_rng, &mut self.online),
        };
        let batch = sample_balanced(&mut self.offline, online, self.cfg.train.batch_size, rng)?;
        let metrics = self.model.update(&mut self.opt, &batch, &self.cfg.loss, &self.cfg.optim, rng)?;
        for buffer in [&mut self.offline, &mut self.online] {
            let (idx, td): (Vec<_>, Vec<_>) = batch
                .indices
                .iter()
                .zip(&batch.sources)
                .zip(&metrics.td_errors)
                .filter(|((_, s), _)| **s == buffer.source())
                .map(|((i, _), td)| (*i, *td))
                .unzip();
            buffer.update_priorities(&idx, &td)?;
        }
        if let Some(run) = &mut self.run {
            run.write(&MetricsRow { stage, step: self.opt.updates, trial, update: Some(&metrics), episode: None })?;
        }
        Ok(metrics)
    }

    /// Saves the current (last good) model before handing back a failure.
    fn abort(&mut self, stage: Stage, err: Error) -> Error {
        if let Err(e) = self.save_checkpoint(stage).and_then(|_| self.flush()) {
            return Error::Checkpoint(format!("{err}; saving the last good checkpoint also failed: {e}"));
        }
        err
    }

    fn flush(&mut self) -> Result<()> {
        match &mut self.run {
            Some(run) => run.flush(),
            None => Ok(()),
        }
    }

    /// `steps` updates on offline data only. Checkpoints every
    /// `train.checkpoint_every` steps and at the end.
    pub fn pretrain(&mut self, steps: usize) -> Result<()> {
        if self.offline.is_empty() {
            return Err(Error::config("pretraining needs a non-empty offline dataset"));
        }
        let every = self.cfg.train.checkpoint_every;
        for step in 1..=steps {
            if let Err(e) = self.update_once(Stage::Pretrain, None) {
                return Err(self.abort(Stage::Pretrain, e));
            }
            if every > 0 && step % every == 0 && step != steps {
                self.save_checkpoint(Stage::Pretrain)?;
            }
        }
        self.save_checkpoint(Stage::Pretrain)?;
        self.flush()
    }

    /// `trials` online episodes, each followed by balanced updates.
    /// `stage` labels the metrics: `Finetune` after pretraining, `Online`
    /// when training from scratch.
    pub fn finetune(&mut self, trials: usize, stage: Stage) -> Result<Vec<TrialRecord>> {
        let mut records = Vec::with_capacity(trials);
        for _ in 0..trials {
            self.trials += 1;
            let trial = self.trials;
            let reset = train_seed(self.act_rng.random());
            let provenance = format!("{}: seed={}, trial={trial}", stage.as_str(), self.cfg.seed);
            let collected =
                run_episode(&self.model, &self.env, reset, &self.cfg.planner, &mut self.act_rng, true, &provenance);
            let record = match collected {
                Ok((episode, stats)) => {
                    let n_updates = episode.len() * self.cfg.train.updates_per_online_step;
                    let mut rec = TrialRecord {
                        trial,
                        episode_return: episode.total_reward(),
                        success: episode.success,
                        steps: episode.len(),
                        aborted: false,
                        mean_uncertainty: stats.mean_uncertainty,
                        max_uncertainty: stats.max_uncertainty,
                        updates: n_updates,
                        mean_loss: 0.0,
                        mean_q: 0.0,
                    };
                    self.online.add_episode(episode.clone())?;
                    self.collected.push(episode);
                    for _ in 0..n_updates {
                        match self.update_once(stage, Some(trial)) {
                            Ok(m) => {
                                rec.mean_loss += m.total / n_updates as f64;
                                rec.mean_q += m.mean_q / n_updates as f64;
                            }
                            Err(e) => return Err(self.abort(stage, e)),
                        }
                    }
                    rec
                }
                Err(Error::Planning(_)) => TrialRecord {
                    trial,
                    episode_return: 0.0,
                    success: false,
                    steps: 0,
                    aborted: true,
                    mean_uncertainty: 0.0,
                    max_uncertainty: 0.0,
                    updates: 0,
                    mean_loss: 0.0,
                    mean_q: 0.0,
                },
                Err(e) => return Err(self.abort(stage, e)),
            };
            if let Some(run) = &mut self.run {
                let episode = EpisodeColumns {
                    episode_return: record.episode_return,
                    success: record.success,
                    uncertainty_mean: record.mean_uncertainty,
                    uncertainty_max: record.max_uncertainty,
                };
                let row = MetricsRow { stage, step: self.opt.updates, trial: Some(trial), update: None, episode: Some(episode) };
                run.write(&row)?;
                run.write_timing(stage, self.opt.updates, Some(trial))?;
            }
            self.save_checkpoint(stage)?;
            records.push(record);
        }
        self.flush()?;
        Ok(records)
    }

    /// Evaluation with the configured planner and `train.eval_episodes`.
    pub fn evaluate(&self, lambda: Option<f64>) -> Result<EvalReport> {
        let mut cfg = self.cfg.planner;
        if let Some(l) = lambda {
            cfg.lambda = l;
        }
        evaluate(&self.model, &self.env, self.cfg.train.eval_episodes, self.cfg.seed, &cfg)
    }
}

/// Medium-replay data: the first `n_transitions` (rounded up to a whole
/// episode) collected by a from-scratch online run with seed `seed`.
pub fn gen_medium_replay_dataset(cfg: &RunConfig, n_transitions: usize, seed: u64) -> Result<Dataset> {
    if n_transitions == 0 {
        return Err(Error::config("medium-replay prefix must be positive"));
    }
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg.replay.online_capacity = cfg.replay.online_capacity.max(n_transitions + cfg.env.episode_length);
    let mut trainer = Trainer::new(&cfg, None, None)?;
    let mut total = 0;
    while total < n_transitions {
        let rec = trainer.finetune(1, Stage::Online)?.remove(0);
        if rec.aborted {
            return Err(Error::Planning(format!("trial {} aborted while generating medium-replay data", rec.trial)));
        }
        total += rec.steps;
    }
    let episodes = trainer
        .collected
        .into_iter()
        .enumerate()
        .map(|(i, mut ep)| {
            ep.provenance = format!(
                "medium-replay: from-scratch online run, env={}, seed={seed}, prefix={n_transitions}, episode={i}",
                cfg.env.id.as_str()
            );
            ep
        })
        .collect();
    Ok(Dataset::new(cfg.env, episodes))
}

#[cfg(test)]
mod tests;

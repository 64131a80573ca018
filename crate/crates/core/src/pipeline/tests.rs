use super::*;
use crate::envs::{gen_medium_dataset, Step};
use crate::replay::sample_balanced;

fn tiny() -> RunConfig {
    RunConfig::default()
        .with_overrides(&[
            "env.episode_length=12",
            "latent_state_dimension=4",
            "mlp_hidden_size=8",
            "q_ensemble_size=3",
            "population_size=16",
            "elite_fraction=4",
            "planning_iterations=2",
            "planning_horizon=3",
            "batch_size=8",
            "eval_episodes=3",
            "online_trials=2",
            "checkpoint_every=0",
        ])
        .unwrap()
}

fn dataset(cfg: &RunConfig, n: usize, seed: u64) -> Dataset {
    let env = ToyEnv::new(cfg.env.clone()).unwrap();
    Dataset::new(cfg.env.clone(), gen_medium_dataset(&env, n, 1.0, seed).unwrap())
}

fn ckpt_bytes(t: &Trainer) -> Vec<u8> {
    t.checkpoint().unwrap().to_bytes()
}

#[test]
fn zero_pretrain_steps_keep_the_initialization() {
    let cfg = tiny();
    let data = dataset(&cfg, 4, 1);
    let fresh = Trainer::new(&cfg, Some(&data), None).unwrap();
    let mut t = Trainer::new(&cfg, Some(&data), None).unwrap();
    t.pretrain(0).unwrap();
    assert_eq!(t.model, fresh.model);
    let restored = Trainer::from_checkpoint(&cfg, &t.checkpoint().unwrap(), Some(&data), None).unwrap();
    assert_eq!(restored.model, fresh.model);
    assert_eq!(restored.opt, fresh.opt);
}

#[test]
fn pretraining_is_bit_reproducible() {
    let cfg = tiny();
    let data = dataset(&cfg, 4, 1);
    let run = |_| {
        let mut t = Trainer::new(&cfg, Some(&data), None).unwrap();
        t.pretrain(30).unwrap();
        ckpt_bytes(&t)
    };
    assert_eq!(run(0), run(1));
    let mut other = Trainer::new(&cfg.with_overrides(&["seed=2"]).unwrap(), Some(&data), None).unwrap();
    other.pretrain(30).unwrap();
    assert_ne!(run(0), ckpt_bytes(&other));
}

#[test]
fn memorizing_one_episode_lowers_consistency_loss() {
    let cfg = tiny().with_overrides(&["learning_rate=0.003"]).unwrap();
    let data = dataset(&cfg, 1, 5);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path(), &cfg).unwrap();
    let mut t = Trainer::new(&cfg, Some(&data), Some(run)).unwrap();
    t.pretrain(500).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let consistency: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(consistency.len(), 500);
    let head = consistency[..10].iter().sum::<f64>() / 10.0;
    let tail = consistency[490..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "consistency {head} -> {tail}");
    assert!(dir.path().join("pretrain_500.ckpt").exists());
}

#[test]
fn pretraining_rejects_bad_datasets() {
    let cfg = tiny();
    let mut t = Trainer::new(&cfg, None, None).unwrap();
    assert!(matches!(t.pretrain(1), Err(Error::Config(_))));
    let push = cfg.with_overrides(&["env.id=push2d"]).unwrap();
    let data = dataset(&push, 2, 1);
    assert!(matches!(Trainer::new(&cfg, Some(&data), None), Err(Error::Config(_))));
}

#[test]
fn zero_trials_leave_everything_untouched() {
    let cfg = tiny();
    let data = dataset(&cfg, 3, 1);
    let mut t = Trainer::new(&cfg, Some(&data), None).unwrap();
    let before = ckpt_bytes(&t);
    assert!(t.finetune(0, Stage::Finetune).unwrap().is_empty());
    assert_eq!(ckpt_bytes(&t), before);
    assert!(t.online.is_empty());
}

#[test]
fn first_trial_fills_half_of_each_batch() {
    let cfg = tiny();
    let data = dataset(&cfg, 3, 1);
    let mut t = Trainer::new(&cfg, Some(&data), None).unwrap();
    let recs = t.finetune(1, Stage::Finetune).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(t.online.num_episodes(), 1);
    assert_eq!(recs[0].updates, recs[0].steps);
    assert_eq!(t.updates(), recs[0].steps as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = sample_balanced(&mut t.offline, &mut t.online, 8, &mut rng).unwrap();
    assert_eq!(batch.count(Source::Online), 4);
    assert_eq!(batch.count(Source::Offline), 4);
}

#[test]
fn online_transitions_are_stored_exactly_once() {
    let cfg = tiny();
    let mut t = Trainer::new(&cfg, None, None).unwrap();
    let recs = t.finetune(4, Stage::Online).unwrap();
    assert_eq!(recs.len(), 4);
    assert_eq!(recs.iter().map(|r| r.trial).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    let steps: usize = recs.iter().map(|r| r.steps).sum();
    assert_eq!(t.online.num_transitions(), steps);
    assert_eq!(t.collected().len(), 4);
    assert!(t.online.episodes().zip(t.collected()).all(|(a, b)| a == b));
    for (r, ep) in recs.iter().zip(t.collected()) {
        assert_eq!(r.success, ep.success);
        assert_eq!(r.episode_return, ep.total_reward());
        assert!(r.mean_uncertainty.is_finite() && r.max_uncertainty >= r.mean_uncertainty);
    }
}

#[test]
fn planning_failures_are_recorded_as_aborted_trials() {
    let cfg = tiny();
    let mut t = Trainer::new(&cfg, None, None).unwrap();
    let mut flat = t.model.encoder.flatten();
    flat[0] = f64::NAN;
    t.model.encoder.load_flat(&flat).unwrap();
    let recs = t.finetune(3, Stage::Online).unwrap();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.aborted && !r.success && r.steps == 0));
    assert!(t.online.is_empty());
}

#[test]
fn lambda_changes_nothing_before_the_first_plan() {
    let base = tiny();
    let data = dataset(&base, 3, 1);
    let mut traces = Vec::new();
    for lambda in ["lambda=0", "lambda=5"] {
        let cfg = base.with_overrides(&[lambda]).unwrap();
        let mut t = Trainer::new(&cfg, Some(&data), None).unwrap();
        t.pretrain(20).unwrap();
        let model = ckpt_bytes(&t).len();
        let params = t.model.clone();
        t.finetune(1, Stage::Finetune).unwrap();
        traces.push((model, params, t.collected()[0].clone()));
    }
    let (a, b) = (&traces[0], &traces[1]);
    assert_eq!(a.1, b.1, "models must agree before finetuning");
    assert_eq!(a.2.states[0], b.2.states[0], "same reset state");
    assert_ne!(a.2.actions[0], b.2.actions[0], "first plan call is the divergence point");
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let cfg = tiny();
    let data = dataset(&cfg, 3, 2);
    let mut a = Trainer::new(&cfg, Some(&data), None).unwrap();
    a.pretrain(15).unwrap();
    let ck = a.checkpoint().unwrap();
    let ra = a.finetune(2, Stage::Finetune).unwrap();
    let mut b = Trainer::from_checkpoint(&cfg, &Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), Some(&data), None)
        .unwrap();
    let rb = b.finetune(2, Stage::Finetune).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ckpt_bytes(&a), ckpt_bytes(&b));
}

#[test]
fn checkpoints_must_match_the_config() {
    let cfg = tiny();
    let t = Trainer::new(&cfg, None, None).unwrap();
    let ck = t.checkpoint().unwrap();
    let wider = cfg.with_overrides(&["mlp_hidden_size=16"]).unwrap();
    assert!(matches!(Trainer::from_checkpoint(&wider, &ck, None, None), Err(Error::Config(_))));
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let cfg = tiny();
    let data = dataset(&cfg, 3, 1);
    let mut t = Trainer::new(&cfg, Some(&data), None).unwrap();
    t.pretrain(10).unwrap();
    let before = ckpt_bytes(&t);
    let r1 = t.evaluate(None).unwrap();
    let r2 = t.evaluate(None).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(ckpt_bytes(&t), before);
    assert_eq!(r1.episodes.len(), 3);
    assert!(r1.episodes.iter().all(|e| e.seed >= EVAL_SEED_BASE));
    let lam0 = t.evaluate(Some(0.0)).unwrap();
    assert_eq!(ckpt_bytes(&t), before);
    assert_eq!(lam0.episodes.len(), 3);
}

/// Every step succeeds immediately.
struct Solved(EnvSpec);

impl Environment for Solved {
    fn spec(&self) -> &EnvSpec {
        &self.0
    }

    fn reset(&self, _seed: u64) -> Vec<f64> {
        vec![0.0; 4]
    }

    fn step(&self, state: &[f64], _action: &[f64]) -> Result<Step> {
        Ok(Step { state: state.to_vec(), reward: 1.0, success: true, clamped: false })
    }
}

#[test]
fn always_solved_env_scores_one() {
    let cfg = tiny();
    let t = Trainer::new(&cfg, None, None).unwrap();
    let r = evaluate(&t.model, &Solved(cfg.env.clone()), 5, 0, &cfg.planner).unwrap();
    assert_eq!(r.success_rate, 1.0);
    assert_eq!(r.mean_return, 1.0);
}

#[test]
fn metrics_file_is_reproducible_and_complete() {
    let cfg = tiny();
    let data = dataset(&cfg, 3, 1);
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&cfg, Some(&data), Some(RunDir::create(dir.path(), &cfg).unwrap())).unwrap();
        t.pretrain(20).unwrap();
        let recs = t.finetune(2, Stage::Finetune).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let pretrain_rows = text.lines().filter(|l| l.starts_with("pretrain,")).count();
        let trial_rows = text.lines().filter(|l| l.starts_with("finetune,") && l.ends_with(|c: char| c.is_ascii_digit())).count();
        assert_eq!(pretrain_rows, 20);
        let updates: usize = recs.iter().map(|r| r.updates).sum();
        assert_eq!(text.lines().filter(|l| l.starts_with("finetune,")).count(), updates + 2);
        assert!(trial_rows >= 2);
        assert!(dir.path().join("pretrain_20.ckpt").exists());
        assert!(dir.path().join(format!("finetune_{}.ckpt", 20 + updates)).exists());
        files.push(text);
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn medium_replay_prefix_is_reproducible() {
    let cfg = tiny();
    let n = 40;
    let a = gen_medium_replay_dataset(&cfg, n, 3).unwrap();
    let b = gen_medium_replay_dataset(&cfg, n, 3).unwrap();
    assert_eq!(a, b);
    let total = a.num_transitions();
    assert!(total >= n && total < n + cfg.env.episode_length, "{total}");
    let last = a.episodes.len() - 1;
    assert!(a.num_transitions() - a.episodes[last].len() < n);
    assert!(a.episodes.iter().all(|e| e.provenance.starts_with("medium-replay")));
    assert_ne!(a, gen_medium_replay_dataset(&cfg, n, 4).unwrap());
}

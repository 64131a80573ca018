//! Deterministic 2-D continuous-control tasks and scripted dataset generators.
//!
//! Both tasks are fully observed. States are flat position vectors:
//!
//! * `reach2d`: `[agent_x, agent_y, goal_x, goal_y]`
//! * `push2d`:  `[agent_x, agent_y, block_x, block_y, goal_x, goal_y]`
//!
//! Actions live in `[-1, 1]^2` and move the agent by `step_scale * action`.

mod datagen;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use datagen::{gen_medium_dataset, rollout, scripted_action, MEDIUM_NOISE_REACH2D};

/// Evaluation reset seeds are `EVAL_SEED_BASE + i`. Training and data
/// generation seeds always have the top bit clear, so the two never overlap.
pub const EVAL_SEED_BASE: u64 = 1 << 63;

/// Maps an arbitrary draw into the training half of the seed space.
pub fn train_seed(raw: u64) -> u64 {
    raw & !EVAL_SEED_BASE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Reach2d,
    Push2d,
}

impl EnvId {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Reach2d => "reach2d",
            EnvId::Push2d => "push2d",
        }
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach2d" => Ok(EnvId::Reach2d),
            "push2d" => Ok(EnvId::Push2d),
            other => Err(Error::config(format!("unknown environment '{other}' (expected reach2d or push2d)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub id: EnvId,
    pub episode_length: usize,
    pub reward_mode: RewardMode,
    /// Agent displacement per unit action.
    pub step_scale: f64,
    /// Half-width of the square arena.
    pub arena: f64,
    /// Half-width of the square that initial positions are drawn from.
    pub init_region: f64,
    /// Success radius around the goal.
    pub goal_threshold: f64,
    pub min_goal_distance: f64,
    /// Translation applied to sampled goals (shifted-goal variant).
    pub goal_offset: [f64; 2],
    /// Centre distance at which agent and block touch (push2d).
    pub contact_radius: f64,
}

impl EnvSpec {
    pub fn reach2d() -> Self {
        Self {
            id: EnvId::Reach2d,
            episode_length: 50,
            reward_mode: RewardMode::Sparse,
            step_scale: 0.1,
            arena: 1.0,
            init_region: 0.8,
            goal_threshold: 0.1,
            min_goal_distance: 0.3,
            goal_offset: [0.0, 0.0],
            contact_radius: 0.1,
        }
    }

    pub fn push2d() -> Self {
        Self { id: EnvId::Push2d, min_goal_distance: 0.2, ..Self::reach2d() }
    }

    pub fn for_id(id: EnvId) -> Self {
        match id {
            EnvId::Reach2d => Self::reach2d(),
            EnvId::Push2d => Self::push2d(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.id {
            EnvId::Reach2d => 4,
            EnvId::Push2d => 6,
        }
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step_scale", self.step_scale),
            ("arena", self.arena),
            ("init_region", self.init_region),
            ("goal_threshold", self.goal_threshold),
            ("contact_radius", self.contact_radius),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("env.{name} must be positive, got {v}")));
            }
        }
        if self.init_region > self.arena {
            return Err(Error::config("env.init_region must not exceed env.arena"));
        }
        if self.episode_length == 0 {
            return Err(Error::config("env.episode_length must be positive"));
        }
        if self.min_goal_distance < 0.0 || self.min_goal_distance >= 2.0 * self.init_region {
            return Err(Error::config("env.min_goal_distance out of range"));
        }
        Ok(())
    }
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    /// Task solved; the episode terminates here.
    pub success: bool,
    /// The incoming action was outside the box and got clamped.
    pub clamped: bool,
}

/// A deterministic, fully observed task. Time limits are enforced by the
/// caller, so `step` is a pure function of `(state, action)`.
pub trait Environment: Sync {
    fn spec(&self) -> &EnvSpec;

    fn reset(&self, seed: u64) -> Vec<f64>;

    fn step(&self, state: &[f64], action: &[f64]) -> Result<Step>;

    fn state_dim(&self) -> usize {
        self.spec().state_dim()
    }

    fn action_dim(&self) -> usize {
        self.spec().action_dim()
    }

    fn episode_length(&self) -> usize {
        self.spec().episode_length
    }
}

/// The built-in reach2d / push2d tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEnv {
    spec: EnvSpec,
}

impl ToyEnv {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    fn sample_point(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let r = self.spec.init_region;
        [rng.random_range(-r..=r), rng.random_range(-r..=r)]
    }

    fn sample_goal(&self, rng: &mut ChaCha8Rng, away_from: [f64; 2]) -> [f64; 2] {
        loop {
            let p = self.sample_point(rng);
            let g = [p[0] + self.spec.goal_offset[0], p[1] + self.spec.goal_offset[1]];
            if dist(g, away_from) >= self.spec.min_goal_distance {
                return g;
            }
        }
    }

    fn clamp_pos(&self, p: [f64; 2]) -> [f64; 2] {
        let a = self.spec.arena;
        [p[0].clamp(-a, a), p[1].clamp(-a, a)]
    }

    fn move_agent(&self, p: [f64; 2], action: &[f64]) -> [f64; 2] {
        let k = self.spec.step_scale;
        self.clamp_pos([p[0] + k * action[0], p[1] + k * action[1]])
    }

    fn diag(&self) -> f64 {
        2.0 * std::f64::consts::SQRT_2 * self.spec.arena
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn pair(s: &[f64], i: usize) -> [f64; 2] {
    [s[i], s[i + 1]]
}

impl Environment for ToyEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self.spec.id {
            EnvId::Reach2d => {
                let agent = self.sample_point(&mut rng);
                let goal = self.sample_goal(&mut rng, agent);
                vec![agent[0], agent[1], goal[0], goal[1]]
            }
            EnvId::Push2d => {
                let agent = self.sample_point(&mut rng);
                let block = loop {
                    let half = 0.5 * self.spec.init_region;
                    let b = [rng.random_range(-half..=half), rng.random_range(-half..=half)];
                    if dist(b, agent) > 2.0 * self.spec.contact_radius {
                        break b;
                    }
                };
                let goal = self.sample_goal(&mut rng, block);
                vec![agent[0], agent[1], block[0], block[1], goal[0], goal[1]]
            }
        }
    }

    fn step(&self, state: &[f64], action: &[f64]) -> Result<Step> {
        if state.len() != self.state_dim() || action.len() != self.action_dim() {
            return Err(Error::shape(format!(
                "{} expects state {} / action {}, got {} / {}",
                self.spec.id.as_str(),
                self.state_dim(),
                self.action_dim(),
                state.len(),
                action.len()
            )));
        }
        let clamped = action.iter().any(|a| !(-1.0..=1.0).contains(a));
        let act: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let sparse = self.spec.reward_mode == RewardMode::Sparse;
        match self.spec.id {
            EnvId::Reach2d => {
                let agent = self.move_agent(pair(state, 0), &act);
                let goal = pair(state, 2);
                let d = dist(agent, goal);
                let success = d < self.spec.goal_threshold;
                let reward = match (success, sparse) {
                    (true, _) => 1.0,
                    (false, true) => 0.0,
                    (false, false) => -d / self.diag(),
                };
                Ok(Step { state: vec![agent[0], agent[1], goal[0], goal[1]], reward, success, clamped })
            }
            EnvId::Push2d => {
                let agent = self.move_agent(pair(state, 0), &act);
                let mut block = pair(state, 2);
                let goal = pair(state, 4);
                let r = self.spec.contact_radius;
                let d = dist(agent, block);
                let mut contact = d <= r * 1.05;
                if d < r {
                    // push the block out along the contact normal
                    let (nx, ny) = if d > 1e-12 {
                        ((block[0] - agent[0]) / d, (block[1] - agent[1]) / d)
                    } else {
                        let n = (act[0].powi(2) + act[1].powi(2)).sqrt().max(1e-12);
                        (act[0] / n, act[1] / n)
                    };
                    block = self.clamp_pos([agent[0] + r * nx, agent[1] + r * ny]);
                    contact = true;
                }
                let success = dist(block, goal) < self.spec.goal_threshold;
                let reward = match (success, sparse) {
                    (true, _) => 1.0,
                    (false, true) if contact => 0.5,
                    (false, true) => 0.0,
                    (false, false) => -(dist(agent, block) + 2.0 * dist(block, goal)) / (3.0 * self.diag()),
                };
                Ok(Step {
                    state: vec![agent[0], agent[1], block[0], block[1], goal[0], goal[1]],
                    reward,
                    success,
                    clamped,
                })
            }
        }
    }
}

/// One recorded interaction episode: `states` has one more entry than `actions`.
/// `dones[t]` marks a true termination (task solved) after action `t`; time-limit
/// truncation is implied by the episode ending without a terminal flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub success: bool,
    pub provenance: String,
}

impl Episode {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Result<(), String> {
        let t = self.actions.len();
        if t == 0 {
            return Err("episode has no transitions".into());
        }
        if self.states.len() != t + 1 {
            return Err(format!("{} states for {} actions", self.states.len(), t));
        }
        if self.rewards.len() != t || self.dones.len() != t {
            return Err(format!("{} rewards / {} dones for {} actions", self.rewards.len(), self.dones.len(), t));
        }
        if let Some((i, s)) = self.states.iter().enumerate().find(|(_, s)| s.len() != state_dim) {
            return Err(format!("state {i} has dim {}, expected {state_dim}", s.len()));
        }
        if let Some((i, a)) = self.actions.iter().enumerate().find(|(_, a)| a.len() != action_dim) {
            return Err(format!("action {i} has dim {}, expected {action_dim}", a.len()));
        }
        let finite = self.states.iter().flatten().chain(self.actions.iter().flatten()).chain(&self.rewards);
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err("non-finite value".into());
        }
        if self.dones[..t - 1].iter().any(|d| *d) {
            return Err("terminal flag before the last transition".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reach() -> ToyEnv {
        ToyEnv::new(EnvSpec::reach2d()).unwrap()
    }

    #[test]
    fn reset_is_seeded_and_bounded() {
        let env = reach();
        assert_eq!(env.reset(7), env.reset(7));
        assert_ne!(env.reset(7), env.reset(8));
        for seed in 0..200 {
            let s = env.reset(seed);
            assert!(s.iter().all(|v| v.abs() <= 0.8));
            assert!(dist(pair(&s, 0), pair(&s, 2)) >= 0.3);
        }
    }

    #[test]
    fn goals_cover_init_region() {
        let env = reach();
        let mut quadrant = [0usize; 4];
        let mut cells = std::collections::HashSet::new();
        for seed in 0..1000 {
            let s = env.reset(seed);
            let (gx, gy) = (s[2], s[3]);
            assert!(gx.abs() <= 0.8 && gy.abs() <= 0.8);
            quadrant[(gx >= 0.0) as usize * 2 + (gy >= 0.0) as usize] += 1;
            cells.insert(((gx + 0.8) / 0.4) as i32 * 10 + ((gy + 0.8) / 0.4) as i32);
        }
        // every quadrant receives roughly a quarter of the goals
        assert!(quadrant.iter().all(|&c| c > 180 && c < 320), "{quadrant:?}");
        // and all 16 cells of a 4x4 grid are hit
        assert_eq!(cells.len(), 16);
    }

    #[test]
    fn zero_action_keeps_position() {
        let env = reach();
        let s = vec![0.2, -0.3, 0.6, 0.6];
        let out = env.step(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(out.state, s);
        assert_eq!(out.reward, 0.0);
        assert!(!out.success);
    }

    #[test]
    fn one_step_to_goal_succeeds() {
        let env = reach();
        // goal is 0.15 away along +x; a full step covers 0.1 leaving 0.05 < 0.1
        let s = vec![0.0, 0.0, 0.15, 0.0];
        let out = env.step(&s, &[1.0, 0.0]).unwrap();
        assert!(out.success);
        assert_eq!(out.reward, 1.0);
        assert!((out.state[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn out_of_box_action_is_clamped_and_flagged() {
        let env = reach();
        let s = vec![0.0, 0.0, 0.5, 0.5];
        let a = env.step(&s, &[3.0, -2.0]).unwrap();
        let b = env.step(&s, &[1.0, -1.0]).unwrap();
        assert!(a.clamped && !b.clamped);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn step_is_pure() {
        let env = ToyEnv::new(EnvSpec::push2d()).unwrap();
        let s = env.reset(3);
        assert_eq!(env.step(&s, &[0.3, -0.9]).unwrap(), env.step(&s, &[0.3, -0.9]).unwrap());
    }

    #[test]
    fn push_moves_block_on_contact() {
        let env = ToyEnv::new(EnvSpec::push2d()).unwrap();
        let s = vec![0.0, 0.0, 0.15, 0.0, 0.7, 0.0];
        let out = env.step(&s, &[1.0, 0.0]).unwrap();
        assert!((out.state[2] - 0.2).abs() < 1e-12, "{:?}", out.state);
        assert_eq!(out.reward, 0.5);
        // no contact, no reward
        let far = env.step(&[-0.5, 0.0, 0.15, 0.0, 0.7, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(far.reward, 0.0);
    }

    #[test]
    fn sparse_rewards_take_three_values_and_match_success() {
        for spec in [EnvSpec::reach2d(), EnvSpec::push2d()] {
            let env = ToyEnv::new(spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for seed in 0..50 {
                let mut s = env.reset(seed);
                for _ in 0..50 {
                    let a = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
                    let out = env.step(&s, &a).unwrap();
                    assert!([0.0, 0.5, 1.0].contains(&out.reward));
                    assert_eq!(out.success, out.reward == 1.0);
                    s = out.state;
                }
            }
        }
    }

    #[test]
    fn reach_transitions_are_lipschitz_in_action() {
        let env = reach();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let s = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.5, 0.5];
            let a = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            let b = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            let sa = env.step(&s, &a).unwrap().state;
            let sb = env.step(&s, &b).unwrap().state;
            let ds: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let da = dist(a, b);
            assert!(ds <= 0.1 * da + 1e-12);
        }
    }

    #[test]
    fn dense_reward_bounded() {
        let spec = EnvSpec { reward_mode: RewardMode::Dense, ..EnvSpec::reach2d() };
        let env = ToyEnv::new(spec).unwrap();
        let s = env.reset(0);
        let r = env.step(&s, &[0.0, 0.0]).unwrap().reward;
        assert!((-1.0..=0.0).contains(&r));
    }

    #[test]
    fn unknown_env_id() {
        assert!("hopper".parse::<EnvId>().is_err());
        assert_eq!("push2d".parse::<EnvId>().unwrap(), EnvId::Push2d);
    }
}

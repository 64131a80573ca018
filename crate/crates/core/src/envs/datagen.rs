use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{train_seed, EnvId, Environment, Episode};
use crate::error::Result;

/// Action noise that puts the scripted reach2d controller at roughly 50%
/// success with the default task constants (see the calibration test).
pub const MEDIUM_NOISE_REACH2D: f64 = 4.5;

/// Runs one episode from `reset(seed)` until success or the time limit.
pub fn rollout<E, F>(env: &E, seed: u64, provenance: &str, mut policy: F) -> Result<Episode>
where
    E: Environment + ?Sized,
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let mut state = env.reset(seed);
    let mut ep = Episode {
        states: vec![state.clone()],
        actions: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
        success: false,
        provenance: provenance.to_string(),
    };
    for t in 0..env.episode_length() {
        let action: Vec<f64> = policy(&state, t)?.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let step = env.step(&state, &action)?;
        ep.actions.push(action);
        ep.rewards.push(step.reward);
        ep.dones.push(step.success);
        ep.states.push(step.state.clone());
        state = step.state;
        if step.success {
            ep.success = true;
            break;
        }
    }
    Ok(ep)
}

/// Noiseless proportional controller: heads straight for the goal (reach2d)
/// or lines up behind the block and pushes it toward the goal (push2d).
pub fn scripted_action<E: Environment + ?Sized>(env: &E, state: &[f64]) -> Vec<f64> {
    let spec = env.spec();
    let k = spec.step_scale;
    // direction-preserving: shrink the whole vector into the box
    let toward = |from: [f64; 2], to: [f64; 2]| -> Vec<f64> {
        let v = [(to[0] - from[0]) / k, (to[1] - from[1]) / k];
        let m = v[0].abs().max(v[1].abs()).max(1.0);
        vec![v[0] / m, v[1] / m]
    };
    match spec.id {
        EnvId::Reach2d => toward([state[0], state[1]], [state[2], state[3]]),
        EnvId::Push2d => {
            let agent = [state[0], state[1]];
            let block = [state[2], state[3]];
            let goal = [state[4], state[5]];
            let (dx, dy) = (goal[0] - block[0], goal[1] - block[1]);
            let n = (dx * dx + dy * dy).sqrt().max(1e-9);
            let u = [dx / n, dy / n];
            let r = spec.contact_radius;
            let standoff = 1.2 * r;
            let behind = [block[0] - u[0] * standoff, block[1] - u[1] * standoff];
            let off = ((agent[0] - behind[0]).powi(2) + (agent[1] - behind[1]).powi(2)).sqrt();
            if off < 0.5 * r {
                return toward(agent, [block[0] - u[0] * 0.3 * r, block[1] - u[1] * 0.3 * r]);
            }
            if segment_distance(agent, behind, block) < 1.05 * r {
                // walk around the block on the agent's side
                let perp = [-u[1], u[0]];
                let side = ((agent[0] - block[0]) * perp[0] + (agent[1] - block[1]) * perp[1]).signum();
                let side = if side == 0.0 { 1.0 } else { side };
                let way = [
                    block[0] + side * perp[0] * 2.0 * r - u[0] * standoff,
                    block[1] + side * perp[1] * 2.0 * r - u[1] * standoff,
                ];
                return toward(agent, way);
            }
            toward(agent, behind)
        }
    }
}

fn segment_distance(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

/// Episodes from the scripted controller with i.i.d. Gaussian action noise.
pub fn gen_medium_dataset<E: Environment + ?Sized>(
    env: &E,
    n_episodes: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let provenance = format!(
        "medium: scripted controller, env={}, noise_std={noise_std}, seed={seed}",
        env.spec().id.as_str()
    );
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let reset_seed = train_seed(rng.random());
        let ep = rollout(env, reset_seed, &provenance, |s, _| {
            let mut a = scripted_action(env, s);
            for v in &mut a {
                let eps: f64 = rng.sample(StandardNormal);
                *v += noise_std * eps;
            }
            Ok(a)
        })?;
        episodes.push(ep);
    }
    Ok(episodes)
}

//! 5×5 deterministic gridworld for checking the Q-learning core against
//! exact tabular values.

use rand::Rng;

use crate::error::Result;
use crate::math::rng_stream;
use crate::qlearn::{epsilon, select_action, Learner, LinearQ, ObsStorage, StoredObs, TrainConfig, Transition};

pub const SIDE: usize = 5;
pub const N_STATES: usize = SIDE * SIDE;
pub const N_ACTIONS: usize = 4;
/// Bottom-right corner.
pub const GOAL: usize = N_STATES - 1;
pub const STEP_REWARD: f64 = -1.0;
pub const GOAL_REWARD: f64 = 10.0;
/// Episodes are cut (not terminated) after this many moves.
pub const MAX_EPISODE_STEPS: usize = 50;

/// Deterministic move: 0 = +y, 1 = −y, 2 = −x, 3 = +x; bumping a wall stays put.
pub fn step(state: usize, action: usize) -> (usize, f64, bool) {
    let (x, y) = (state % SIDE, state / SIDE);
    let (x, y) = match action {
        0 => (x, (y + 1).min(SIDE - 1)),
        1 => (x, y.saturating_sub(1)),
        2 => (x.saturating_sub(1), y),
        _ => ((x + 1).min(SIDE - 1), y),
    };
    let next = y * SIDE + x;
    if next == GOAL {
        (next, GOAL_REWARD, true)
    } else {
        (next, STEP_REWARD, false)
    }
}

pub fn one_hot(state: usize) -> Vec<f64> {
    let mut v = vec![0.0; N_STATES];
    v[state] = 1.0;
    v
}

/// Runs ε-greedy Q-learning until `cfg.total_steps` gradient steps, one per
/// environment step once the buffer holds a batch.
pub fn train(cfg: &TrainConfig, seed: u64) -> Result<Learner<LinearQ<f64>>> {
    let mut learner = Learner::new(LinearQ::zeros(N_STATES, N_ACTIONS), TrainConfig { storage: ObsStorage::F32, ..*cfg })?;
    let mut env_rng = rng_stream(seed, 0);
    let mut learn_rng = rng_stream(seed, 1);
    let obs: Vec<StoredObs> = (0..N_STATES)
        .map(|s| StoredObs::new(&one_hot(s).iter().map(|v| *v as f32).collect::<Vec<_>>(), 1, ObsStorage::F32))
        .collect();
    let mut state = env_rng.random_range(0..GOAL);
    let mut t = 0;
    let mut k = 0;
    while learner.updates < cfg.total_steps {
        let a = select_action(&learner.online, &one_hot(state), epsilon(k, cfg), &mut env_rng)?;
        let (next, reward, done) = step(state, a);
        learner.observe(Transition {
            obs: obs[state].clone(),
            action: a,
            reward,
            next_obs: obs[next].clone(),
            done,
        })?;
        if learner.ready() {
            learner.train_step(&mut learn_rng)?;
        }
        k += 1;
        t += 1;
        state = next;
        if done || t >= MAX_EPISODE_STEPS {
            state = env_rng.random_range(0..GOAL);
            t = 0;
        }
    }
    Ok(learner)
}

/// Greedy Q table, `N_STATES × N_ACTIONS`.
pub fn q_table(learner: &Learner<LinearQ<f64>>) -> Vec<Vec<f64>> {
    use crate::qlearn::QModel;
    (0..N_STATES).map(|s| learner.online.forward(&one_hot(s), 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moves_and_walls() {
        assert_eq!(step(0, 1), (0, STEP_REWARD, false));
        assert_eq!(step(0, 3), (1, STEP_REWARD, false));
        assert_eq!(step(0, 0), (5, STEP_REWARD, false));
        assert_eq!(step(GOAL - 1, 3), (GOAL, GOAL_REWARD, true));
        assert_eq!(step(GOAL - SIDE, 0), (GOAL, GOAL_REWARD, true));
    }
}

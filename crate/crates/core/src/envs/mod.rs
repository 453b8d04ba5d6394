//! Small cooperative Markov games.
//!
//! Every environment hands each agent an observation row, accepts one
//! action per agent and pays a single reward shared by the whole team.
//! Episodes end after a fixed horizon (or at a terminal state).

mod coord;
mod spread;
mod tabular;
mod unlock;

pub use coord::CoordMatrixGame;
pub use spread::Spread;
pub use tabular::{make_tabular_random, TabularEnv, TabularGame};
pub use unlock::SequentialUnlock;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-agent action space. Every agent of an environment shares it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    /// Width of one agent's action encoding.
    pub fn width(&self) -> usize {
        match *self {
            ActionSpace::Discrete(k) | ActionSpace::Continuous(k) => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum JointAction {
    Discrete(Vec<usize>),
    Continuous(Vec<Vec<f64>>),
}

impl JointAction {
    pub fn len(&self) -> usize {
        match self {
            JointAction::Discrete(a) => a.len(),
            JointAction::Continuous(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The discrete indices, or a contract error for continuous actions.
    pub fn discrete(&self) -> Result<&[usize]> {
        match self {
            JointAction::Discrete(a) => Ok(a),
            JointAction::Continuous(_) => Err(Error::contract("environment expects discrete actions")),
        }
    }
}

/// Outcome of one joint step.
#[derive(Clone, Debug, PartialEq)]
pub struct JointStep {
    /// `[n_agents, obs_dim]`.
    pub obs: Tensor,
    pub reward: f64,
    pub done: bool,
    /// Steps taken in the current episode, including this one.
    pub step: usize,
}

pub trait Environment: Send {
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn horizon(&self) -> usize;
    /// Rewards lie in `[-reward_bound, reward_bound]`.
    fn reward_bound(&self) -> f64;
    /// Starts a new episode and returns `[n_agents, obs_dim]` observations.
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Tensor;
    fn step(&mut self, action: &JointAction, rng: &mut ChaCha8Rng) -> Result<JointStep>;
    /// Best expected episode return, when it is known in closed form or by
    /// enumeration.
    fn optimal_return(&self) -> Option<f64> {
        None
    }
}

pub(crate) fn check_actions(actions: &[usize], n: usize, k: usize) -> Result<()> {
    if actions.len() != n {
        return Err(Error::contract(format!("expected {n} actions, got {}", actions.len())));
    }
    if let Some((i, a)) = actions.iter().enumerate().find(|(_, &a)| a >= k) {
        return Err(Error::contract(format!("agent {i} action {a} outside 0..{k}")));
    }
    Ok(())
}

/// Every agent sees the same constant observation.
pub(crate) fn dummy_obs(n: usize) -> Tensor {
    Tensor::filled(&[n, 1], 1.0)
}

/// All joint actions of `n` agents with `k` choices each, agent 0 varying
/// fastest.
pub(crate) fn joint_actions(n: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = k.pow(n as u32);
    (0..total).map(move |mut idx| {
        (0..n)
            .map(|_| {
                let a = idx % k;
                idx /= k;
                a
            })
            .collect()
    })
}

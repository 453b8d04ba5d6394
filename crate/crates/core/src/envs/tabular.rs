use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ActionSpace, Environment, JointAction, JointStep};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Largest joint action space accepted by [`make_tabular_random`].
pub const MAX_JOINT_ACTIONS: usize = 4096;

/// Finite Markov game given by explicit tables.
///
/// Joint actions are indexed in mixed radix with agent 0 as the least
/// significant digit: `index = a0 + |A0| * (a1 + |A1| * (a2 + ...))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularGame {
    action_counts: Vec<usize>,
    /// `transitions[s][joint][s']`.
    transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][joint]`.
    rewards: Vec<Vec<f64>>,
    gamma: f64,
    initial: Vec<f64>,
}

impl TabularGame {
    pub fn new(
        action_counts: Vec<usize>,
        transitions: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let states = transitions.len();
        if states == 0 || action_counts.is_empty() || action_counts.contains(&0) {
            return Err(Error::contract("tabular game needs states, agents and actions"));
        }
        let joint: usize = action_counts.iter().product();
        let stochastic = |row: &[f64]| row.len() == states && row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-12;
        for (s, rows) in transitions.iter().enumerate() {
            if rows.len() != joint || rewards.get(s).map(Vec::len) != Some(joint) {
                return Err(Error::contract(format!("state {s}: expected {joint} joint actions")));
            }
            if let Some(j) = rows.iter().position(|r| !stochastic(r)) {
                return Err(Error::contract(format!("transition row ({s}, {j}) is not a distribution")));
            }
        }
        if rewards.len() != states || !stochastic(&initial) {
            return Err(Error::contract("reward table or initial distribution malformed"));
        }
        Ok(Self {
            action_counts,
            transitions,
            rewards,
            gamma,
            initial,
        })
    }

    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn n_joint(&self) -> usize {
        self.action_counts.iter().product()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition(&self, s: usize, joint: usize) -> &[f64] {
        &self.transitions[s][joint]
    }

    pub fn reward(&self, s: usize, joint: usize) -> f64 {
        self.rewards[s][joint]
    }

    pub fn joint_index(&self, actions: &[usize]) -> usize {
        actions
            .iter()
            .zip(&self.action_counts)
            .rev()
            .fold(0, |acc, (&a, &k)| acc * k + a)
    }

    pub fn joint_actions(&self, mut index: usize) -> Vec<usize> {
        self.action_counts
            .iter()
            .map(|&k| {
                let a = index % k;
                index /= k;
                a
            })
            .collect()
    }
}

/// Random game: transition rows are normalised uniform draws, rewards are
/// uniform in `[-1, 1]`, the start state is uniform.
pub fn make_tabular_random(agents: usize, states: usize, actions: usize, gamma: f64, seed: u64) -> Result<TabularGame> {
    if agents == 0 || states == 0 || actions == 0 {
        return Err(Error::contract("tabular game needs agents, states and actions"));
    }
    let joint = (actions as u128).checked_pow(agents as u32).unwrap_or(u128::MAX);
    if joint > MAX_JOINT_ACTIONS as u128 {
        return Err(Error::contract(format!(
            "{actions}^{agents} joint actions exceed the limit of {MAX_JOINT_ACTIONS}"
        )));
    }
    let joint = joint as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(states);
    let mut rewards = Vec::with_capacity(states);
    for _ in 0..states {
        let mut rows = Vec::with_capacity(joint);
        for _ in 0..joint {
            let raw: Vec<f64> = (0..states).map(|_| rng.random_range(1e-3..1.0)).collect();
            rows.push(normalise(raw));
        }
        transitions.push(rows);
        rewards.push((0..joint).map(|_| rng.random_range(-1.0..=1.0)).collect());
    }
    TabularGame::new(
        vec![actions; agents],
        transitions,
        rewards,
        gamma,
        normalise(vec![1.0; states]),
    )
}

/// Rescales to sum to one, folding the rounding residue into the largest
/// entry so the row sums to 1 within an ulp or two.
fn normalise(mut row: Vec<f64>) -> Vec<f64> {
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    let residue = 1.0 - row.iter().sum::<f64>();
    let big = row
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    row[big] += residue;
    row
}

/// A [`TabularGame`] played as an episodic environment. Every agent observes
/// the one-hot state.
#[derive(Clone, Debug)]
pub struct TabularEnv {
    game: TabularGame,
    horizon: usize,
    state: usize,
    t: usize,
}

impl TabularEnv {
    pub fn new(game: TabularGame, horizon: usize) -> Self {
        Self {
            game,
            horizon: horizon.max(1),
            state: 0,
            t: 0,
        }
    }

    pub fn game(&self) -> &TabularGame {
        &self.game
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Forces the current state.
    pub fn set_state(&mut self, state: usize) -> Result<Tensor> {
        if state >= self.game.n_states() {
            return Err(Error::contract(format!("state {state} out of range")));
        }
        self.state = state;
        Ok(self.observe())
    }

    fn observe(&self) -> Tensor {
        let (n, s) = (self.game.n_agents(), self.game.n_states());
        let mut data = vec![0.0; n * s];
        for i in 0..n {
            data[i * s + self.state] = 1.0;
        }
        Tensor::new(vec![n, s], data).expect("one-hot obs")
    }
}

fn sample(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl Environment for TabularEnv {
    fn n_agents(&self) -> usize {
        self.game.n_agents()
    }

    fn obs_dim(&self) -> usize {
        self.game.n_states()
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.game.action_counts.iter().copied().max().unwrap_or(1))
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reward_bound(&self) -> f64 {
        self.game.rewards.iter().flatten().fold(0.0, |m, r| m.max(r.abs()))
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Tensor {
        self.state = sample(&self.game.initial, rng);
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &JointAction, rng: &mut ChaCha8Rng) -> Result<JointStep> {
        let actions = action.discrete()?;
        if actions.len() != self.game.n_agents() {
            return Err(Error::contract(format!("expected {} actions", self.game.n_agents())));
        }
        for (i, (&a, &k)) in actions.iter().zip(&self.game.action_counts).enumerate() {
            if a >= k {
                return Err(Error::contract(format!("agent {i} action {a} outside 0..{k}")));
            }
        }
        let joint = self.game.joint_index(actions);
        let reward = self.game.reward(self.state, joint);
        self.state = sample(self.game.transition(self.state, joint), rng);
        self.t += 1;
        Ok(JointStep {
            obs: self.observe(),
            reward,
            done: self.t >= self.horizon,
            step: self.t,
        })
    }
}

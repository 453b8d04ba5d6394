//! Exact ground truth on tabular games.
//!
//! With full observability the observation is the state, so the value
//! functions, the multi-agent action values (expectations over the agents
//! outside a subset) and the multi-agent advantages can be computed exactly
//! by dynamic programming and enumeration. These are used to check the
//! advantage decomposition numerically and, through the reference
//! implementations, to cross-check the training code.

mod decomposition;
mod reference;

pub use decomposition::{
    all_permutations, sequential_greedy_improvement, verification_suite, verify_decomposition, DecompositionOptions,
    DecompositionReport, GreedyTrace, PermutationSummary, WorstCase, DECOMPOSITION_TOLERANCE,
};
pub use reference::{reference_decoder_loss, reference_encoder_loss, reference_gae};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::envs::TabularGame;
use crate::error::{Error, Result};

/// Residual at which value iteration stops.
pub const BELLMAN_TOLERANCE: f64 = 1e-12;
const MAX_SWEEPS: usize = 10_000_000;

/// A stationary policy over states.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    /// Independent per-agent tables `[agent][state][action]`.
    Product(Vec<Vec<Vec<f64>>>),
    /// A joint table `[state][joint action]`.
    Joint(Vec<Vec<f64>>),
}

impl Policy {
    /// Every agent uniform in every state.
    pub fn uniform(game: &TabularGame) -> Self {
        Policy::Product(
            game.action_counts()
                .iter()
                .map(|&k| vec![vec![1.0 / k as f64; k]; game.n_states()])
                .collect(),
        )
    }

    /// Per-agent tables with normalised uniform draws.
    pub fn random_product<R: Rng>(game: &TabularGame, rng: &mut R) -> Self {
        Policy::Product(
            game.action_counts()
                .iter()
                .map(|&k| {
                    (0..game.n_states())
                        .map(|_| {
                            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
                            let z: f64 = raw.iter().sum();
                            raw.into_iter().map(|p| p / z).collect()
                        })
                        .collect()
                })
                .collect(),
        )
    }

    fn validate(&self, game: &TabularGame) -> Result<()> {
        let ok_dist = |d: &[f64], k: usize| d.len() == k && d.iter().all(|&p| p >= 0.0) && (d.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        let ok = match self {
            Policy::Product(tables) => {
                tables.len() == game.n_agents()
                    && tables.iter().zip(game.action_counts()).all(|(t, &k)| {
                        t.len() == game.n_states() && t.iter().all(|d| ok_dist(d, k))
                    })
            }
            Policy::Joint(table) => table.len() == game.n_states() && table.iter().all(|d| ok_dist(d, game.n_joint())),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::contract("policy table does not match the game or is not a distribution"))
        }
    }

    /// `π(a|s)` of a joint action index.
    pub fn joint_prob(&self, game: &TabularGame, s: usize, joint: usize) -> f64 {
        match self {
            Policy::Product(tables) => game
                .joint_actions(joint)
                .iter()
                .enumerate()
                .map(|(i, &a)| tables[i][s][a])
                .product(),
            Policy::Joint(table) => table[s][joint],
        }
    }

    /// `π^i(a|s)` of one agent under a product policy.
    pub fn agent_prob(&self, agent: usize, s: usize, a: usize) -> Result<f64> {
        match self {
            Policy::Product(tables) => Ok(tables[agent][s][a]),
            Policy::Joint(_) => Err(Error::contract("per-agent marginals need a product policy")),
        }
    }
}

/// `Q[s][joint]` and `V[s]` of a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactValues {
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    /// `max_s |(T V)(s) - V(s)|` at termination.
    pub residual: f64,
    pub sweeps: usize,
}

fn q_from_v(game: &TabularGame, v: &[f64]) -> Vec<Vec<f64>> {
    (0..game.n_states())
        .map(|s| {
            (0..game.n_joint())
                .map(|j| {
                    let next: f64 = game.transition(s, j).iter().zip(v).map(|(p, v)| p * v).sum();
                    game.reward(s, j) + game.gamma() * next
                })
                .collect()
        })
        .collect()
}

fn policy_table(game: &TabularGame, policy: &Policy) -> Vec<Vec<f64>> {
    (0..game.n_states())
        .map(|s| (0..game.n_joint()).map(|j| policy.joint_prob(game, s, j)).collect())
        .collect()
}

fn check_discount(game: &TabularGame) -> Result<()> {
    if !(0.0..1.0).contains(&game.gamma()) {
        return Err(Error::contract(format!(
            "exact evaluation needs a discount in [0, 1), got {}",
            game.gamma()
        )));
    }
    Ok(())
}

/// Evaluates `policy` by iterating the Bellman operator until the residual
/// drops below [`BELLMAN_TOLERANCE`].
pub fn exact_policy_eval(game: &TabularGame, policy: &Policy) -> Result<ExactValues> {
    check_discount(game)?;
    policy.validate(game)?;
    let pi = policy_table(game, policy);
    let backup = |v: &[f64]| -> Vec<f64> {
        q_from_v(game, v)
            .iter()
            .zip(&pi)
            .map(|(q, p)| q.iter().zip(p).map(|(q, p)| q * p).sum())
            .collect()
    };
    let mut v = vec![0.0; game.n_states()];
    for sweep in 1..=MAX_SWEEPS {
        let next = backup(&v);
        let residual = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if residual < BELLMAN_TOLERANCE {
            let q = q_from_v(game, &v);
            let residual = backup(&v).iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            return Ok(ExactValues { q, v, residual, sweeps: sweep });
        }
    }
    Err(Error::numeric("value iteration did not converge"))
}

/// Solves `(I - γ P_π) V = R_π` directly.
pub fn linear_solve_values(game: &TabularGame, policy: &Policy) -> Result<Vec<f64>> {
    check_discount(game)?;
    policy.validate(game)?;
    let pi = policy_table(game, policy);
    let ns = game.n_states();
    let mut a = DMatrix::<f64>::identity(ns, ns);
    let mut b = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for (j, &p) in pi[s].iter().enumerate() {
            b[s] += p * game.reward(s, j);
            for (s2, &t) in game.transition(s, j).iter().enumerate() {
                a[(s, s2)] -= game.gamma() * p * t;
            }
        }
    }
    a.lu()
        .solve(&b)
        .map(|x| x.iter().copied().collect())
        .ok_or_else(|| Error::numeric("singular policy evaluation system"))
}

fn check_subset(game: &TabularGame, agents: &[usize], actions: &[usize]) -> Result<()> {
    if agents.len() != actions.len() {
        return Err(Error::contract("one action per listed agent required"));
    }
    let mut seen = vec![false; game.n_agents()];
    for (&i, &a) in agents.iter().zip(actions) {
        if i >= game.n_agents() || seen[i] {
            return Err(Error::contract(format!("agent {i} repeated or out of range in {agents:?}")));
        }
        if a >= game.action_counts()[i] {
            return Err(Error::contract(format!("action {a} out of range for agent {i}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Multi-agent action value of a subset: the joint `Q` with the agents in
/// `agents` fixed to `actions` and every other agent drawn from its own
/// policy. An empty subset gives `V(s)`, the full set gives `Q(s, a)`.
pub fn multi_agent_q(
    game: &TabularGame,
    policy: &Policy,
    values: &ExactValues,
    s: usize,
    agents: &[usize],
    actions: &[usize],
) -> Result<f64> {
    check_subset(game, agents, actions)?;
    if s >= game.n_states() {
        return Err(Error::contract(format!("state {s} out of range")));
    }
    let mut fixed = vec![None; game.n_agents()];
    for (&i, &a) in agents.iter().zip(actions) {
        fixed[i] = Some(a);
    }
    let mut total = 0.0;
    for j in 0..game.n_joint() {
        let joint = game.joint_actions(j);
        let mut weight = 1.0;
        for (i, &a) in joint.iter().enumerate() {
            weight *= match fixed[i] {
                Some(f) if f == a => 1.0,
                Some(_) => 0.0,
                None => policy.agent_prob(i, s, a)?,
            };
        }
        if weight != 0.0 {
            total += weight * values.q[s][j];
        }
    }
    Ok(total)
}

/// Advantage of the agents `agents` taking `actions` given that the agents
/// `prior` already took `prior_actions`:
/// `Q(s, prior ∪ agents) - Q(s, prior)`.
#[allow(clippy::too_many_arguments)]
pub fn multi_agent_advantage(
    game: &TabularGame,
    policy: &Policy,
    values: &ExactValues,
    s: usize,
    prior: &[usize],
    prior_actions: &[usize],
    agents: &[usize],
    actions: &[usize],
) -> Result<f64> {
    if let Some(i) = agents.iter().find(|i| prior.contains(i)) {
        return Err(Error::contract(format!("agent {i} appears in both subsets")));
    }
    let all: Vec<usize> = prior.iter().chain(agents).copied().collect();
    let all_actions: Vec<usize> = prior_actions.iter().chain(actions).copied().collect();
    let with = multi_agent_q(game, policy, values, s, &all, &all_actions)?;
    let without = multi_agent_q(game, policy, values, s, prior, prior_actions)?;
    Ok(with - without)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_tabular_random;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_state_geometric_series() {
        let g = TabularGame::new(vec![1], vec![vec![vec![1.0]]], vec![vec![2.0]], 0.9, vec![1.0]).unwrap();
        let ev = exact_policy_eval(&g, &Policy::uniform(&g)).unwrap();
        assert!((ev.v[0] - 20.0).abs() < 1e-10);
        assert!(ev.residual < BELLMAN_TOLERANCE);
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let mut g = make_tabular_random(2, 3, 2, 0.9, 1).unwrap();
        let t: Vec<Vec<Vec<f64>>> = (0..3).map(|s| (0..4).map(|j| g.transition(s, j).to_vec()).collect()).collect();
        g = TabularGame::new(vec![2, 2], t, vec![vec![0.0; 4]; 3], 0.9, g.initial().to_vec()).unwrap();
        let ev = exact_policy_eval(&g, &Policy::uniform(&g)).unwrap();
        assert!(ev.v.iter().chain(ev.q.iter().flatten()).all(|&x| x == 0.0));
    }

    #[test]
    fn undiscounted_game_is_rejected() {
        let g = make_tabular_random(2, 2, 2, 1.0, 0).unwrap();
        assert!(exact_policy_eval(&g, &Policy::uniform(&g)).is_err());
    }

    #[test]
    fn overlapping_subsets_are_rejected() {
        let g = make_tabular_random(2, 2, 2, 0.5, 0).unwrap();
        let p = Policy::uniform(&g);
        let ev = exact_policy_eval(&g, &p).unwrap();
        assert!(multi_agent_advantage(&g, &p, &ev, 0, &[0], &[1], &[0], &[0]).is_err());
        assert!(multi_agent_q(&g, &p, &ev, 0, &[1, 1], &[0, 0]).is_err());
    }

    #[test]
    fn expected_own_advantage_is_zero() {
        let g = make_tabular_random(3, 3, 2, 0.9, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Policy::random_product(&g, &mut rng);
        let ev = exact_policy_eval(&g, &p).unwrap();
        for s in 0..3 {
            let avg: f64 = (0..2)
                .map(|a| p.agent_prob(1, s, a).unwrap() * multi_agent_advantage(&g, &p, &ev, s, &[2], &[0], &[1], &[a]).unwrap())
                .sum::<f64>();
            // conditioning on agent 2 changes the baseline but the expectation
            // over agent 1's own policy still vanishes
            assert!(avg.abs() < 1e-10, "{avg}");
        }
    }
}

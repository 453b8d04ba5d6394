use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{exact_policy_eval, multi_agent_advantage, ExactValues, Policy};
use crate::envs::{make_tabular_random, TabularGame};
use crate::error::{Error, Result};

/// Every permutation of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                extend(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecompositionOptions {
    /// Check every agent permutation in each trial instead of one random one.
    pub all_permutations: bool,
    /// Negative control: flip the sign of the largest local advantage on the
    /// right-hand side so that the check must fail.
    pub corrupt_rhs: bool,
}

/// The instance with the largest discrepancy seen.
#[derive(Clone, Debug, PartialEq)]
pub struct WorstCase {
    /// How to rebuild the game and policy, when known.
    pub instance: Option<String>,
    pub state: usize,
    pub actions: Vec<usize>,
    pub permutation: Vec<usize>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationSummary {
    pub permutation: Vec<usize>,
    pub checks: usize,
    pub max_discrepancy: f64,
}

/// Outcome of comparing the joint advantage with the sum of sequential
/// local advantages.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecompositionReport {
    pub trials: usize,
    pub checks: usize,
    pub max_discrepancy: f64,
    pub worst: Option<WorstCase>,
    pub per_permutation: Vec<PermutationSummary>,
}

impl DecompositionReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checks > 0 && self.max_discrepancy <= tolerance
    }

    /// Folds another report into this one.
    pub fn merge(&mut self, other: DecompositionReport) {
        self.trials += other.trials;
        self.checks += other.checks;
        if other.worst.is_some() && (self.worst.is_none() || other.max_discrepancy > self.max_discrepancy) {
            self.worst = other.worst;
        }
        self.max_discrepancy = self.max_discrepancy.max(other.max_discrepancy);
        for p in other.per_permutation {
            match self.per_permutation.iter_mut().find(|q| q.permutation == p.permutation) {
                Some(q) => {
                    q.checks += p.checks;
                    q.max_discrepancy = q.max_discrepancy.max(p.max_discrepancy);
                }
                None => self.per_permutation.push(p),
            }
        }
        self.per_permutation.sort_by(|a, b| a.permutation.cmp(&b.permutation));
    }
}

impl fmt::Display for DecompositionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "trials: {}", self.trials)?;
        writeln!(f, "checks: {}", self.checks)?;
        writeln!(f, "max discrepancy: {:.3e}", self.max_discrepancy)?;
        for p in &self.per_permutation {
            writeln!(
                f,
                "permutation {:?}: checks {}, max discrepancy {:.3e}",
                p.permutation, p.checks, p.max_discrepancy
            )?;
        }
        if let Some(w) = &self.worst {
            if let Some(instance) = &w.instance {
                writeln!(f, "worst instance: {instance}")?;
            }
            writeln!(
                f,
                "worst case: state {}, actions {:?}, permutation {:?}, lhs {:.17e}, rhs {:.17e}",
                w.state, w.actions, w.permutation, w.lhs, w.rhs
            )?;
        }
        Ok(())
    }
}

/// Local advantages `A^{i_m}(s, a^{i_1..i_{m-1}}, a^{i_m})` along `order`.
fn local_advantages(
    game: &TabularGame,
    policy: &Policy,
    values: &ExactValues,
    s: usize,
    actions: &[usize],
    order: &[usize],
) -> Result<Vec<f64>> {
    (0..order.len())
        .map(|m| {
            let prior = &order[..m];
            let prior_actions: Vec<usize> = prior.iter().map(|&i| actions[i]).collect();
            multi_agent_advantage(game, policy, values, s, prior, &prior_actions, &[order[m]], &[actions[order[m]]])
        })
        .collect()
}

/// Draws random states, joint actions and agent orders and compares the
/// joint advantage with the sum of sequential local advantages.
pub fn verify_decomposition<R: Rng>(
    game: &TabularGame,
    policy: &Policy,
    values: &ExactValues,
    trials: usize,
    rng: &mut R,
    options: DecompositionOptions,
) -> Result<DecompositionReport> {
    let n = game.n_agents();
    let mut per_perm: BTreeMap<Vec<usize>, (usize, f64)> = BTreeMap::new();
    let mut report = DecompositionReport {
        trials,
        ..DecompositionReport::default()
    };
    let everyone: Vec<usize> = (0..n).collect();
    for _ in 0..trials {
        let s = rng.random_range(0..game.n_states());
        let actions: Vec<usize> = game.action_counts().iter().map(|&k| rng.random_range(0..k)).collect();
        let orders = if options.all_permutations {
            all_permutations(n)
        } else {
            let mut p = everyone.clone();
            p.shuffle(rng);
            vec![p]
        };
        let lhs = multi_agent_advantage(game, policy, values, s, &[], &[], &everyone, &actions)?;
        for order in orders {
            let mut local = local_advantages(game, policy, values, s, &actions, &order)?;
            if options.corrupt_rhs {
                let big = (0..n).max_by(|&a, &b| local[a].abs().total_cmp(&local[b].abs())).unwrap_or(0);
                local[big] = -local[big];
            }
            let rhs: f64 = local.iter().sum();
            let gap = (lhs - rhs).abs();
            if !gap.is_finite() {
                return Err(Error::numeric("non-finite advantage in decomposition check"));
            }
            report.checks += 1;
            if gap > report.max_discrepancy || report.worst.is_none() {
                report.max_discrepancy = report.max_discrepancy.max(gap);
                report.worst = Some(WorstCase {
                    instance: None,
                    state: s,
                    actions: actions.clone(),
                    permutation: order.clone(),
                    lhs,
                    rhs,
                });
            }
            let e = per_perm.entry(order).or_insert((0, 0.0));
            e.0 += 1;
            e.1 = e.1.max(gap);
        }
    }
    report.per_permutation = per_perm
        .into_iter()
        .map(|(permutation, (checks, max_discrepancy))| PermutationSummary {
            permutation,
            checks,
            max_discrepancy,
        })
        .collect();
    Ok(report)
}

/// Largest discrepancy the decomposition check tolerates.
pub const DECOMPOSITION_TOLERANCE: f64 = 1e-9;

/// Runs the decomposition check on `games` random tabular games with 2 or 3
/// agents, up to 5 states and 2 or 3 actions per agent, each under a random
/// product policy. Every game is checked at one random state and joint
/// action under every agent permutation.
pub fn verification_suite(seed: u64, games: usize, corrupt_rhs: bool) -> Result<DecompositionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DecompositionReport::default();
    let options = DecompositionOptions {
        all_permutations: true,
        corrupt_rhs,
    };
    for _ in 0..games {
        let agents = rng.random_range(2..=3);
        let states = rng.random_range(1..=5);
        let actions = rng.random_range(2..=3);
        let gamma = rng.random_range(0.5..0.95);
        let game_seed: u64 = rng.random();
        let policy_seed: u64 = rng.random();
        let game = make_tabular_random(agents, states, actions, gamma, game_seed)?;
        let mut prng = ChaCha8Rng::seed_from_u64(policy_seed);
        let policy = Policy::random_product(&game, &mut prng);
        let values = exact_policy_eval(&game, &policy)?;
        let mut r = verify_decomposition(&game, &policy, &values, 1, &mut prng, options)?;
        if let Some(w) = r.worst.as_mut() {
            w.instance = Some(format!(
                "agents={agents} states={states} actions={actions} gamma={gamma:?} game_seed={game_seed} policy_seed={policy_seed}"
            ));
        }
        report.merge(r);
    }
    Ok(report)
}

/// Result of improving the joint action one agent at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyTrace {
    /// Chosen joint action in canonical agent order.
    pub actions: Vec<usize>,
    /// Local advantage of each choice, in decision order.
    pub local_advantages: Vec<f64>,
    /// `Q(s, a) - V(s)` of the chosen joint action, computed directly.
    pub joint_advantage: f64,
    /// Candidate actions evaluated, `Σ |A^i|`.
    pub actions_examined: usize,
    /// Size of the joint action space, `Π |A^i|`.
    pub joint_actions: usize,
}

/// Each agent in `order` picks the action with the largest local advantage
/// given the choices already made (first index on ties).
pub fn sequential_greedy_improvement(
    game: &TabularGame,
    policy: &Policy,
    values: &ExactValues,
    s: usize,
    order: &[usize],
) -> Result<GreedyTrace> {
    let n = game.n_agents();
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..n).collect::<Vec<_>>() {
        return Err(Error::contract(format!("{order:?} is not a permutation of the agents")));
    }
    let mut chosen = vec![0; n];
    let mut local = Vec::with_capacity(n);
    let mut examined = 0;
    for m in 0..n {
        let agent = order[m];
        let prior = &order[..m];
        let prior_actions: Vec<usize> = prior.iter().map(|&i| chosen[i]).collect();
        let mut best = (0, f64::NEG_INFINITY);
        for a in 0..game.action_counts()[agent] {
            let adv = multi_agent_advantage(game, policy, values, s, prior, &prior_actions, &[agent], &[a])?;
            examined += 1;
            if adv > best.1 {
                best = (a, adv);
            }
        }
        chosen[agent] = best.0;
        local.push(best.1);
    }
    let everyone: Vec<usize> = (0..n).collect();
    let joint_advantage = multi_agent_advantage(game, policy, values, s, &[], &[], &everyone, &chosen)?;
    Ok(GreedyTrace {
        actions: chosen,
        local_advantages: local,
        joint_advantage,
        actions_examined: examined,
        joint_actions: game.n_joint(),
    })
}

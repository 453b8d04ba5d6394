use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::AgentOrdering;

/// One environment step of one parallel environment, canonical agent order.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// `[n, obs_dim]`.
    pub obs: Tensor,
    /// `n * action_len` values.
    pub actions: Vec<f64>,
    /// Behaviour log-probability of each agent's action.
    pub log_probs: Vec<f64>,
    /// Per-agent value estimates at `obs`.
    pub values: Vec<f64>,
    /// Shared team reward.
    pub reward: f64,
    pub done: bool,
}

/// Rollout storage for `T` steps of `E` environments.
///
/// Sample `k = t * E + e` is step `t` of environment `e`. Advantages and
/// value targets are per agent; for the joint estimator every agent of a
/// sample carries the same advantage.
#[derive(Clone, Debug)]
pub struct TrajectoryBuffer {
    steps: usize,
    envs: usize,
    n_agents: usize,
    ordering: AgentOrdering,
    transitions: Vec<Transition>,
    bootstrap_obs: Option<Vec<Tensor>>,
    bootstrap_values: Option<Vec<Vec<f64>>>,
    advantages: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

/// How advantages are estimated from the per-agent values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvantageMode {
    /// One advantage per step from the mean of the agents' values, shared by
    /// every agent.
    Joint,
    /// An independent estimate per agent from that agent's own values.
    PerAgent,
}

impl TrajectoryBuffer {
    pub fn new(steps: usize, envs: usize, n_agents: usize, ordering: AgentOrdering) -> Result<Self> {
        if steps == 0 || envs == 0 || n_agents == 0 || ordering.len() != n_agents {
            return Err(Error::contract("buffer needs steps, environments and a matching ordering"));
        }
        Ok(Self {
            steps,
            envs,
            n_agents,
            ordering,
            transitions: Vec::with_capacity(steps * envs),
            bootstrap_obs: None,
            bootstrap_values: None,
            advantages: Vec::new(),
            targets: Vec::new(),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn envs(&self) -> usize {
        self.envs
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.transitions.len() == self.steps * self.envs
    }

    pub fn ordering(&self) -> &AgentOrdering {
        &self.ordering
    }

    /// Appends the next sample (environments of a step in order, then the
    /// next step).
    pub fn push(&mut self, tr: Transition) -> Result<()> {
        if self.is_full() {
            return Err(Error::contract("buffer already holds every step"));
        }
        if tr.log_probs.len() != self.n_agents || tr.values.len() != self.n_agents {
            return Err(Error::contract(format!(
                "transition carries {} log-probs and {} values for {} agents",
                tr.log_probs.len(),
                tr.values.len(),
                self.n_agents
            )));
        }
        self.transitions.push(tr);
        Ok(())
    }

    /// Observations and online values after the last step, one per
    /// environment.
    pub fn set_bootstrap(&mut self, obs: Vec<Tensor>, values: Vec<Vec<f64>>) -> Result<()> {
        if obs.len() != self.envs || values.len() != self.envs || values.iter().any(|v| v.len() != self.n_agents) {
            return Err(Error::contract("bootstrap needs one observation and n values per environment"));
        }
        self.bootstrap_obs = Some(obs);
        self.bootstrap_values = Some(values);
        Ok(())
    }

    /// Per-agent values of the observations that follow the last step.
    pub fn bootstrap_values(&self) -> Option<&[Vec<f64>]> {
        self.bootstrap_values.as_deref()
    }

    pub fn transition(&self, k: usize) -> &Transition {
        &self.transitions[k]
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// `(t, e)` of sample `k`.
    pub fn step_of(&self, k: usize) -> (usize, usize) {
        (k / self.envs, k % self.envs)
    }

    /// Observation following sample `k` (the bootstrap observation after the
    /// last step).
    pub fn next_obs(&self, k: usize) -> Result<&Tensor> {
        let (t, e) = self.step_of(k);
        if t + 1 < self.steps {
            Ok(&self.transitions[k + self.envs].obs)
        } else {
            self.bootstrap_obs
                .as_ref()
                .map(|b| &b[e])
                .ok_or_else(|| Error::contract("bootstrap observation missing"))
        }
    }

    pub fn advantages(&self) -> &[Vec<f64>] {
        &self.advantages
    }

    pub fn advantages_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.advantages
    }

    pub fn value_targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    /// Joint value estimate `V̂` of sample `k` (mean over agents).
    pub fn joint_value(&self, k: usize) -> f64 {
        mean(&self.transitions[k].values)
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
        self.bootstrap_obs = None;
        self.bootstrap_values = None;
        self.advantages.clear();
        self.targets.clear();
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// GAE over one environment's sequence. Returns advantages and value targets
/// (`advantage + value`).
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = rewards.len();
    if values.len() != t_len || dones.len() != t_len {
        return Err(Error::contract("rewards, values and dones must have equal length"));
    }
    let mut adv = vec![0.0; t_len];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..t_len).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Fills the buffer's advantages and value targets.
pub fn compute_gae(buffer: &mut TrajectoryBuffer, gamma: f64, lambda: f64, mode: AdvantageMode) -> Result<()> {
    if !buffer.is_full() {
        return Err(Error::contract(format!(
            "buffer holds {} of {} samples",
            buffer.len(),
            buffer.steps * buffer.envs
        )));
    }
    let boot = buffer
        .bootstrap_values
        .as_ref()
        .ok_or_else(|| Error::contract("bootstrap value missing"))?;
    let (steps, envs, n) = (buffer.steps, buffer.envs, buffer.n_agents);
    let mut advantages = vec![vec![0.0; n]; steps * envs];
    let mut targets = vec![vec![0.0; n]; steps * envs];
    for e in 0..envs {
        let seq: Vec<&Transition> = (0..steps).map(|t| &buffer.transitions[t * envs + e]).collect();
        let rewards: Vec<f64> = seq.iter().map(|tr| tr.reward).collect();
        let dones: Vec<bool> = seq.iter().map(|tr| tr.done).collect();
        match mode {
            AdvantageMode::Joint => {
                let values: Vec<f64> = seq.iter().map(|tr| mean(&tr.values)).collect();
                let (adv, tgt) = gae(&rewards, &values, &dones, mean(&boot[e]), gamma, lambda)?;
                for t in 0..steps {
                    advantages[t * envs + e] = vec![adv[t]; n];
                    targets[t * envs + e] = vec![tgt[t]; n];
                }
            }
            AdvantageMode::PerAgent => {
                for i in 0..n {
                    let values: Vec<f64> = seq.iter().map(|tr| tr.values[i]).collect();
                    let (adv, tgt) = gae(&rewards, &values, &dones, boot[e][i], gamma, lambda)?;
                    for t in 0..steps {
                        advantages[t * envs + e][i] = adv[t];
                        targets[t * envs + e][i] = tgt[t];
                    }
                }
            }
        }
    }
    buffer.advantages = advantages;
    buffer.targets = targets;
    Ok(())
}

/// Rescales all advantage entries to zero mean and unit standard deviation.
pub fn normalize_advantages(advantages: &mut [Vec<f64>]) {
    let count = advantages.iter().map(Vec::len).sum::<usize>() as f64;
    if count == 0.0 {
        return;
    }
    let mean = advantages.iter().flatten().sum::<f64>() / count;
    let var = advantages.iter().flatten().map(|a| (a - mean).powi(2)).sum::<f64>() / count;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    advantages.iter_mut().flatten().for_each(|a| *a = (*a - mean) * scale);
}

//! The encoder-decoder policy/value model.
//!
//! Observations enter in canonical agent order together with an
//! [`AgentOrdering`] that fixes the decoding sequence for the current
//! iteration. Internally every sequence tensor is laid out in decoding
//! order: row `m` belongs to agent `ordering.agent(m)`.
//!
//! Two ways of producing action distributions share the same parameters:
//!
//! - [`MatModel::act`] decodes one agent at a time, feeding each sampled
//!   action back in as the input of the next row.
//! - [`MatModel::evaluate`] runs the decoder once on stored actions
//!   (teacher forcing). Because the decoder is causal, row `m` sees exactly
//!   the same inputs in both modes and the log-probabilities agree.
//!
//! The decentralised variant replaces the decoder with one actor head per
//! agent reading only that agent's encoding.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::envs::{ActionSpace, JointAction};
use crate::error::{Error, Result};
use crate::nn::{Bound, Group, Linear, ParamId, ParamSet};
use crate::transformer::{Activation, Decoder, Dims, Encoder};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const INITIAL_LOG_STD: f64 = -std::f64::consts::LN_2; // log(0.5)

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Autoregressive decoder over actions.
    #[default]
    Mat,
    /// Independent per-agent actor heads on the shared encoder.
    MatDec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Architecture of a [`MatModel`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub activation: Activation,
    pub variant: Variant,
}

impl ModelSpec {
    fn dims(&self) -> Dims {
        Dims {
            obs_dim: self.obs_dim,
            max_agents: self.n_agents,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_blocks: self.n_blocks,
            action_width: self.action_space.width(),
            activation: self.activation,
        }
    }
}

/// Permutation of agents: `agent(m)` decides at position `m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AgentOrdering {
    order: Vec<usize>,
    position: Vec<usize>,
}

impl AgentOrdering {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut position = vec![usize::MAX; n];
        for (m, &agent) in order.iter().enumerate() {
            if agent >= n || position[agent] != usize::MAX {
                return Err(Error::contract(format!("{order:?} is not a permutation")));
            }
            position[agent] = m;
        }
        Ok(Self { order, position })
    }

    pub fn identity(n: usize) -> Self {
        Self::new((0..n).collect()).expect("identity")
    }

    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self::new(order).expect("shuffled permutation")
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn agent(&self, m: usize) -> usize {
        self.order[m]
    }

    pub fn position(&self, agent: usize) -> usize {
        self.position[agent]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.order
    }

    pub fn inverse(&self) -> Self {
        Self::new(self.position.clone()).expect("inverse permutation")
    }

    /// Reorders per-agent rows of width `w` from canonical to decoding order.
    pub fn to_decoding<T: Copy>(&self, canonical: &[T], w: usize) -> Vec<T> {
        self.order
            .iter()
            .flat_map(|&a| canonical[a * w..(a + 1) * w].iter().copied())
            .collect()
    }

    /// Reorders per-agent rows of width `w` from decoding to canonical order.
    pub fn to_canonical<T: Copy>(&self, decoding: &[T], w: usize) -> Vec<T> {
        self.position
            .iter()
            .flat_map(|&m| decoding[m * w..(m + 1) * w].iter().copied())
            .collect()
    }
}

/// One agent's action distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionDistribution {
    Categorical { logits: Vec<f64> },
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
}

impl ActionDistribution {
    /// Probabilities of a categorical distribution.
    pub fn probs(&self) -> Option<Vec<f64>> {
        match self {
            ActionDistribution::Categorical { logits } => {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                Some(e.into_iter().map(|v| v / z).collect())
            }
            ActionDistribution::Gaussian { .. } => None,
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            ActionDistribution::Categorical { .. } => {
                let p = self.probs().expect("categorical");
                -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
            }
            ActionDistribution::Gaussian { log_std, .. } => log_std.iter().map(|s| s + 0.5 * (1.0 + LN_2PI)).sum(),
        }
    }

    /// Argmax for categorical, mean for Gaussian.
    pub fn mode(&self) -> Vec<f64> {
        match self {
            ActionDistribution::Categorical { logits } => {
                let mut best = 0;
                for (i, l) in logits.iter().enumerate() {
                    if *l > logits[best] {
                        best = i;
                    }
                }
                vec![best as f64]
            }
            ActionDistribution::Gaussian { mean, .. } => mean.clone(),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            ActionDistribution::Categorical { .. } => {
                let p = self.probs().expect("categorical");
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return vec![i as f64];
                    }
                }
                vec![p.iter().rposition(|&v| v > 0.0).unwrap_or(0) as f64]
            }
            ActionDistribution::Gaussian { mean, log_std } => mean
                .iter()
                .zip(log_std)
                .map(|(m, s)| m + s.exp() * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        }
    }
}

/// Per-position outputs of a teacher-forced pass, all `[B, n]` in decoding
/// order.
pub struct PolicyEval<'t> {
    pub log_probs: Var<'t>,
    pub entropy: Var<'t>,
    pub values: Var<'t>,
}

/// Result of acting in a batch of environments, canonical agent order.
#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub actions: Vec<JointAction>,
    /// `[B][n]` flattened actions of width `action_width`.
    pub action_rows: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct Actor {
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
enum PolicyHead {
    Decoder(Decoder),
    Decentralised(Vec<Actor>),
}

/// Encoder (`φ`), policy head (`θ`) and a frozen copy of the encoder and
/// value head (`φ̄`) used for bootstrap targets.
#[derive(Clone, Debug)]
pub struct MatModel {
    spec: ModelSpec,
    params: ParamSet,
    target: Vec<(ParamId, Tensor)>,
    encoder: Encoder,
    head: PolicyHead,
    log_std: Option<ParamId>,
}

impl MatModel {
    pub fn new(spec: ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.n_agents == 0 || spec.obs_dim == 0 || spec.action_space.width() == 0 {
            return Err(Error::contract("model needs agents, observations and actions"));
        }
        let dims = spec.dims();
        dims.head_dim()?;
        let mut params = ParamSet::new();
        let encoder = Encoder::new(&mut params, &dims, rng)?;
        let head = match spec.variant {
            Variant::Mat => PolicyHead::Decoder(Decoder::new(&mut params, &dims, rng)?),
            Variant::MatDec => PolicyHead::Decentralised(
                (0..spec.n_agents)
                    .map(|i| Actor {
                        hidden: Linear::new(
                            &mut params,
                            &format!("actor{i}.hidden"),
                            spec.d_model,
                            spec.d_model,
                            2f64.sqrt(),
                            Group::Decoder,
                            rng,
                        ),
                        out: Linear::new(
                            &mut params,
                            &format!("actor{i}.out"),
                            spec.d_model,
                            spec.action_space.width(),
                            0.01,
                            Group::Decoder,
                            rng,
                        ),
                    })
                    .collect(),
            ),
        };
        let log_std = match spec.action_space {
            ActionSpace::Continuous(d) => {
                Some(params.add("policy.log_std", Tensor::filled(&[d], INITIAL_LOG_STD), Group::Decoder))
            }
            ActionSpace::Discrete(_) => None,
        };
        let mut model = Self {
            spec,
            params,
            target: Vec::new(),
            encoder,
            head,
            log_std,
        };
        model.sync_target();
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Target tensors in the same order as the encoder-group parameters.
    pub fn target_params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.target.iter().map(|(id, t)| (*id, t))
    }

    pub fn set_target_param(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = self
            .target
            .iter_mut()
            .find(|(i, _)| *i == id)
            .ok_or_else(|| Error::contract(format!("{} is not on the value path", self.params.name(id))))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::shape("set_target_param", slot.1.shape(), value.shape()));
        }
        slot.1 = value;
        Ok(())
    }

    /// Hard copy of the encoder and value head into the target network.
    pub fn sync_target(&mut self) {
        self.target = self
            .params
            .ids()
            .filter(|&id| self.params.group(id) == Group::Encoder)
            .map(|id| (id, self.params.get(id).clone()))
            .collect();
    }

    /// Width of a policy output row (logits or Gaussian mean).
    fn width(&self) -> usize {
        self.spec.action_space.width()
    }

    /// Number of values stored per agent action: one index for discrete
    /// spaces, the action vector for continuous ones.
    pub fn action_len(&self) -> usize {
        match self.spec.action_space {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Continuous(d) => d,
        }
    }

    /// Stacks canonical `[n, obs_dim]` observations into `[B, n, obs_dim]`
    /// in decoding order.
    fn stack_obs(&self, obs: &[&Tensor], ordering: &AgentOrdering) -> Result<Tensor> {
        let (n, d) = (self.spec.n_agents, self.spec.obs_dim);
        if ordering.len() != n {
            return Err(Error::contract(format!("ordering over {} agents, model has {n}", ordering.len())));
        }
        let mut data = Vec::with_capacity(obs.len() * n * d);
        for o in obs {
            if o.shape() != [n, d] {
                return Err(Error::shape("observations", o.shape(), &[n, d]));
            }
            data.extend(ordering.to_decoding(o.data(), d));
        }
        Tensor::new(vec![obs.len(), n, d], data)
    }

    /// Encodings and per-agent values for a `[B, n, obs_dim]` batch already in
    /// decoding order.
    pub fn encode<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        obs: &Tensor,
        ordering: &AgentOrdering,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let embedded = self.encoder.embed_observation(p, tape, obs, ordering.as_slice())?;
        self.encoder.forward(p, &embedded)
    }

    /// Decoder input rows: start flag, previous action, id of the agent
    /// decoded at that row. `actions` is `[B][n * action_len]` in decoding order;
    /// only the first `known` positions are used.
    fn decoder_features(&self, actions: &[Vec<f64>], ordering: &AgentOrdering, known: usize) -> Tensor {
        let (n, w, len) = (self.spec.n_agents, self.width(), self.action_len());
        let row = 1 + w + n;
        let mut data = vec![0.0; actions.len() * n * row];
        for (b, acts) in actions.iter().enumerate() {
            for m in 0..n {
                let r = &mut data[(b * n + m) * row..(b * n + m + 1) * row];
                if m == 0 {
                    r[0] = 1.0;
                } else if m - 1 < known {
                    let prev = &acts[(m - 1) * len..m * len];
                    match self.spec.action_space {
                        ActionSpace::Discrete(_) => r[1 + prev[0] as usize] = 1.0,
                        ActionSpace::Continuous(_) => r[1..1 + w].copy_from_slice(prev),
                    }
                }
                r[1 + w + ordering.agent(m)] = 1.0;
            }
        }
        Tensor::new(vec![actions.len(), n, row], data).expect("decoder features")
    }

    /// Distribution parameters `[B, n, width]` in decoding order.
    fn policy_outputs<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        encoded: &Var<'t>,
        actions: &[Vec<f64>],
        ordering: &AgentOrdering,
        known: usize,
    ) -> Result<Var<'t>> {
        match &self.head {
            PolicyHead::Decoder(dec) => {
                let features = tape.constant(self.decoder_features(actions, ordering, known));
                let embeds = dec.embed_actions(p, &features)?;
                dec.forward(p, &embeds, encoded)
            }
            PolicyHead::Decentralised(_) => self.mat_dec_forward(p, encoded, ordering),
        }
    }

    /// Per-agent actor heads: position `m` reads only encoding row `m`.
    pub fn mat_dec_forward<'t>(&self, p: &Bound<'t>, encoded: &Var<'t>, ordering: &AgentOrdering) -> Result<Var<'t>> {
        let PolicyHead::Decentralised(actors) = &self.head else {
            return Err(Error::contract("model was built with the autoregressive decoder"));
        };
        let rows = (0..ordering.len())
            .map(|m| {
                let actor = &actors[ordering.agent(m)];
                let x = encoded.take_position(m)?;
                let h = self.spec.activation.apply(&actor.hidden.forward(p, &x)?);
                actor.out.forward(p, &h)
            })
            .collect::<Result<Vec<_>>>()?;
        Var::stack_positions(&rows)
    }

    /// Log-density `[B, n]` of `actions` (`[B][n * action_len]`, decoding order).
    fn log_prob<'t>(&self, p: &Bound<'t>, tape: &'t Tape, outputs: &Var<'t>, actions: &[Vec<f64>]) -> Result<Var<'t>> {
        match self.spec.action_space {
            ActionSpace::Discrete(_) => {
                let idx: Vec<usize> = actions.iter().flatten().map(|&a| a as usize).collect();
                outputs.log_softmax()?.gather_last(&idx)
            }
            ActionSpace::Continuous(d) => {
                let log_std = p.var(self.log_std.expect("continuous model has log-std"));
                let (b, n) = (actions.len(), self.spec.n_agents);
                let acts = tape.constant(Tensor::new(vec![b, n, d], actions.concat())?);
                let z = acts.sub(outputs)?.mul_row(&log_std.neg().exp())?;
                z.square()
                    .scale(-0.5)
                    .add_row(&log_std.neg())?
                    .add_scalar(-0.5 * LN_2PI)
                    .sum_last()
                    .reshape(&[b, n])
            }
        }
    }

    fn entropy<'t>(&self, p: &Bound<'t>, tape: &'t Tape, outputs: &Var<'t>) -> Result<Var<'t>> {
        match self.spec.action_space {
            ActionSpace::Discrete(_) => {
                let logp = outputs.log_softmax()?;
                Ok(logp.exp().mul(&logp)?.sum_last().neg())
            }
            ActionSpace::Continuous(_) => {
                let log_std = p.var(self.log_std.expect("continuous model has log-std"));
                let zeros = tape.constant(Tensor::zeros(&outputs.shape()));
                Ok(zeros.add_row(&log_std)?.add_scalar(0.5 * (1.0 + LN_2PI)).sum_last())
            }
        }
    }

    fn distribution(&self, p: &Bound<'_>, outputs: &Tensor, b: usize, m: usize) -> ActionDistribution {
        let (n, w) = (self.spec.n_agents, self.width());
        let row = outputs.data()[(b * n + m) * w..(b * n + m + 1) * w].to_vec();
        match self.spec.action_space {
            ActionSpace::Discrete(_) => ActionDistribution::Categorical { logits: row },
            ActionSpace::Continuous(_) => ActionDistribution::Gaussian {
                mean: row,
                log_std: p.var(self.log_std.expect("log-std")).value().data().to_vec(),
            },
        }
    }

    /// Distributions of every agent for one joint observation, decoding
    /// order, conditioned on the given decoding-order actions (teacher
    /// forcing; ignored by the decentralised variant).
    pub fn distributions(
        &self,
        obs: &Tensor,
        actions: &[f64],
        ordering: &AgentOrdering,
    ) -> Result<Vec<ActionDistribution>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let stacked = self.stack_obs(&[obs], ordering)?;
        let (encoded, _) = self.encode(&p, &tape, &stacked, ordering)?;
        let acts = vec![actions.to_vec()];
        let out = self.policy_outputs(&p, &tape, &encoded, &acts, ordering, ordering.len())?;
        let out = out.value();
        Ok((0..ordering.len()).map(|m| self.distribution(&p, &out, 0, m)).collect())
    }

    /// Acts in `B` environments at once. `obs[b]` is `[n, obs_dim]` in
    /// canonical order and `rngs[b]` drives the sampling for environment `b`.
    pub fn act(
        &self,
        obs: &[&Tensor],
        ordering: &AgentOrdering,
        rngs: &mut [ChaCha8Rng],
        mode: ActMode,
    ) -> Result<ActOutput> {
        if obs.len() != rngs.len() {
            return Err(Error::contract("one rng per environment required"));
        }
        let (bsz, n, w) = (obs.len(), self.spec.n_agents, self.action_len());
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let stacked = self.stack_obs(obs, ordering)?;
        let (encoded, values) = self.encode(&p, &tape, &stacked, ordering)?;
        let mut actions = vec![vec![0.0; n * w]; bsz];
        let mut log_probs = vec![vec![0.0; n]; bsz];

        let mut decide = |m: usize, outputs: &Var, actions: &mut Vec<Vec<f64>>| -> Result<()> {
            let out = outputs.value();
            if !out.all_finite() {
                return Err(Error::numeric(format!("non-finite policy output while decoding position {m}")));
            }
            for (b, rng) in rngs.iter_mut().enumerate() {
                let dist = self.distribution(&p, &out, b, m);
                let a = match mode {
                    ActMode::Sample => dist.sample(rng),
                    ActMode::Greedy => dist.mode(),
                };
                actions[b][m * w..(m + 1) * w].copy_from_slice(&a);
            }
            Ok(())
        };

        match &self.head {
            PolicyHead::Decoder(_) => {
                for m in 0..n {
                    let outputs = self.policy_outputs(&p, &tape, &encoded, &actions, ordering, m)?;
                    decide(m, &outputs, &mut actions)?;
                    let lp = self.log_prob(&p, &tape, &outputs, &actions)?.value();
                    for (b, row) in log_probs.iter_mut().enumerate() {
                        row[m] = lp.data()[b * n + m];
                    }
                }
            }
            PolicyHead::Decentralised(_) => {
                let outputs = self.mat_dec_forward(&p, &encoded, ordering)?;
                for m in 0..n {
                    decide(m, &outputs, &mut actions)?;
                }
                let lp = self.log_prob(&p, &tape, &outputs, &actions)?.value();
                for (b, row) in log_probs.iter_mut().enumerate() {
                    row.copy_from_slice(&lp.data()[b * n..(b + 1) * n]);
                }
            }
        }

        let values = values.value();
        let action_rows: Vec<Vec<f64>> = actions.iter().map(|a| ordering.to_canonical(a, w)).collect();
        let joint = action_rows
            .iter()
            .map(|a| match self.spec.action_space {
                ActionSpace::Discrete(_) => JointAction::Discrete(a.iter().map(|&x| x as usize).collect()),
                ActionSpace::Continuous(d) => JointAction::Continuous(a.chunks(d).map(<[f64]>::to_vec).collect()),
            })
            .collect();
        Ok(ActOutput {
            actions: joint,
            action_rows,
            log_probs: log_probs.iter().map(|l| ordering.to_canonical(l, 1)).collect(),
            values: (0..bsz)
                .map(|b| ordering.to_canonical(&values.data()[b * n..(b + 1) * n], 1))
                .collect(),
        })
    }

    /// Teacher-forced pass over a batch. `obs[b]` is canonical `[n, obs_dim]`,
    /// `actions[b]` canonical `[n * action_len]`. Outputs are in decoding order.
    pub fn evaluate<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        obs: &[&Tensor],
        actions: &[&[f64]],
        ordering: &AgentOrdering,
    ) -> Result<PolicyEval<'t>> {
        if obs.len() != actions.len() {
            return Err(Error::contract(format!(
                "batch mismatch: {} observations, {} actions",
                obs.len(),
                actions.len()
            )));
        }
        let (n, w) = (self.spec.n_agents, self.action_len());
        if let Some(bad) = actions.iter().find(|a| a.len() != n * w) {
            return Err(Error::shape("evaluate actions", &[n * w], &[bad.len()]));
        }
        let decoding: Vec<Vec<f64>> = actions.iter().map(|a| ordering.to_decoding(a, w)).collect();
        let stacked = self.stack_obs(obs, ordering)?;
        let (encoded, values) = self.encode(p, tape, &stacked, ordering)?;
        let outputs = self.policy_outputs(p, tape, &encoded, &decoding, ordering, n)?;
        Ok(PolicyEval {
            log_probs: self.log_prob(p, tape, &outputs, &decoding)?,
            entropy: self.entropy(p, tape, &outputs)?,
            values,
        })
    }

    /// Per-agent values from the target network, `[B][n]` canonical order.
    pub fn target_values(&self, obs: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let n = self.spec.n_agents;
        let ordering = AgentOrdering::identity(n);
        let tape = Tape::new();
        let mut p = self.params.bind(&tape, false);
        for (id, t) in &self.target {
            p.rebind(*id, tape.constant(t.clone()));
        }
        let stacked = self.stack_obs(obs, &ordering)?;
        let (_, values) = self.encode(&p, &tape, &stacked, &ordering)?;
        let v = values.value();
        Ok(v.data().chunks(n).map(<[f64]>::to_vec).collect())
    }

    /// Per-agent values from the online network, `[B][n]` canonical order.
    pub fn values(&self, obs: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let n = self.spec.n_agents;
        let ordering = AgentOrdering::identity(n);
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let stacked = self.stack_obs(obs, &ordering)?;
        let (_, values) = self.encode(&p, &tape, &stacked, &ordering)?;
        let v = values.value();
        Ok(v.data().chunks(n).map(<[f64]>::to_vec).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn spec(variant: Variant, action_space: ActionSpace, n: usize) -> ModelSpec {
        ModelSpec {
            n_agents: n,
            obs_dim: 3,
            action_space,
            d_model: 8,
            n_heads: 1,
            n_blocks: 1,
            activation: Activation::Gelu,
            variant,
        }
    }

    fn obs(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![n, 3], (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ordering_round_trip_and_validation() {
        let o = AgentOrdering::new(vec![2, 0, 1]).unwrap();
        let data = [10, 11, 20, 21, 30, 31];
        let dec = o.to_decoding(&data, 2);
        assert_eq!(dec, vec![30, 31, 10, 11, 20, 21]);
        assert_eq!(o.to_canonical(&dec, 2), data.to_vec());
        assert_eq!(o.inverse().inverse(), o);
        assert!(AgentOrdering::new(vec![0, 0, 1]).is_err());
        assert!(AgentOrdering::new(vec![0, 3]).is_err());
    }

    #[test]
    fn uniform_categorical_entropy_is_ln_k() {
        let d = ActionDistribution::Categorical { logits: vec![0.3; 4] };
        assert!((d.entropy() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn greedy_acting_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = MatModel::new(spec(Variant::Mat, ActionSpace::Discrete(3), 3), &mut rng).unwrap();
        let o = obs(3, &mut rng);
        let ord = AgentOrdering::random(3, &mut rng);
        let mut r1 = vec![ChaCha8Rng::seed_from_u64(1)];
        let mut r2 = vec![ChaCha8Rng::seed_from_u64(2)];
        let a = model.act(&[&o], &ord, &mut r1, ActMode::Greedy).unwrap();
        let b = model.act(&[&o], &ord, &mut r2, ActMode::Greedy).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn target_matches_online_until_params_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = MatModel::new(spec(Variant::Mat, ActionSpace::Discrete(2), 2), &mut rng).unwrap();
        let o = obs(2, &mut rng);
        assert_eq!(model.values(&[&o]).unwrap(), model.target_values(&[&o]).unwrap());
        for t in model.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.01);
        }
        assert_ne!(model.values(&[&o]).unwrap(), model.target_values(&[&o]).unwrap());
        model.sync_target();
        assert_eq!(model.values(&[&o]).unwrap(), model.target_values(&[&o]).unwrap());
        let before: Vec<Tensor> = model.target_params().map(|(_, t)| t.clone()).collect();
        model.sync_target();
        let after: Vec<Tensor> = model.target_params().map(|(_, t)| t.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn continuous_actions_are_finite_and_log_std_starts_at_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = MatModel::new(spec(Variant::Mat, ActionSpace::Continuous(2), 2), &mut rng).unwrap();
        let id = model.params().find("policy.log_std").unwrap();
        assert!(model.params().get(id).data().iter().all(|v| (v.exp() - 0.5).abs() < 1e-15));
        let o = obs(2, &mut rng);
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(5)];
        let out = model.act(&[&o], &AgentOrdering::identity(2), &mut rngs, ActMode::Sample).unwrap();
        assert!(out.action_rows[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mat_dec_has_one_distribution_per_agent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in [2, 3] {
            let model = MatModel::new(spec(Variant::MatDec, ActionSpace::Discrete(4), n), &mut rng).unwrap();
            let o = obs(n, &mut rng);
            let d = model.distributions(&o, &vec![0.0; n], &AgentOrdering::identity(n)).unwrap();
            assert_eq!(d.len(), n);
        }
    }

    #[test]
    fn evaluate_rejects_batch_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = MatModel::new(spec(Variant::Mat, ActionSpace::Discrete(2), 2), &mut rng).unwrap();
        let o = obs(2, &mut rng);
        let tape = Tape::new();
        let p = model.params().bind(&tape, true);
        let ord = AgentOrdering::identity(2);
        assert!(model.evaluate(&p, &tape, &[&o, &o], &[&[0.0, 1.0]], &ord).is_err());
        assert!(model.evaluate(&p, &tape, &[&o], &[&[0.0]], &ord).is_err());
    }
}

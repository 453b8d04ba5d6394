//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use mat_core::autodiff::gradcheck::{max_relative_error, numeric_gradient, FLOOR, STEP};
use mat_core::autodiff::{Tape, Tensor, Var};
use mat_core::envs::{ActionSpace, TabularGame};
use mat_core::oracle::{exact_policy_eval, ExactValues, Policy};
use mat_core::model::{ActMode, ActionDistribution, AgentOrdering, MatModel, ModelSpec, Variant};
use mat_core::nn::{Bound, ParamId};
use mat_core::training::{decoder_loss, encoder_loss};
use mat_core::transformer::Activation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Compares the tape gradient of `f` against central differences for every
/// input and returns the worst relative error.
pub fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&tape, &vars);
    let grads = loss.backward().unwrap();
    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item().unwrap()
    };
    (0..inputs.len())
        .map(|i| {
            let numeric = numeric_gradient(eval, inputs, i, STEP);
            max_relative_error(grads.wrt(vars[i]).data(), numeric.data(), FLOOR)
        })
        .fold(0.0, f64::max)
}

/// Weighted sum so that every output entry gets a distinct upstream gradient.
pub fn probe<'t>(tape: &'t Tape, x: Var<'t>) -> Var<'t> {
    let n = x.value().len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
    let w = tape.constant(Tensor::new(x.shape(), w).unwrap());
    x.mul(&w).unwrap().sum()
}


/// Every differentiable primitive with the input shapes it is checked at.
pub const PRIMITIVES: &[(&str, &[&[usize]])] = &[
    ("add", &[&[2, 3], &[2, 3]]),
    ("sub", &[&[2, 3], &[2, 3]]),
    ("mul", &[&[2, 3], &[2, 3]]),
    ("add_row", &[&[2, 3], &[3]]),
    ("mul_row", &[&[2, 3], &[3]]),
    ("matmul", &[&[2, 2, 3], &[3, 4]]),
    ("bmm", &[&[2, 2, 3], &[2, 3, 2]]),
    ("bmm_nt", &[&[2, 2, 3], &[2, 4, 3]]),
    ("softmax", &[&[2, 4, 3]]),
    ("masked_softmax", &[&[2, 3, 3]]),
    ("log_softmax", &[&[2, 4]]),
    ("layer_norm", &[&[3, 4], &[4], &[4]]),
    ("relu", &[&[7]]),
    ("gelu", &[&[7]]),
    ("tanh", &[&[7]]),
    ("exp", &[&[7]]),
    ("log", &[&[7]]),
    ("mean", &[&[3, 2]]),
    ("sum_last", &[&[3, 2]]),
    ("minimum", &[&[6], &[6]]),
    ("clip", &[&[9]]),
    ("gather_last", &[&[3, 4]]),
    ("concat_last", &[&[2, 2], &[2, 3]]),
    ("take_position", &[&[2, 3, 2]]),
    ("stack_positions", &[&[2, 3], &[2, 3]]),
    ("scale", &[&[5]]),
    ("neg", &[&[5]]),
    ("add_scalar", &[&[5]]),
    ("square", &[&[5]]),
    ("sum", &[&[2, 3]]),
    ("reshape", &[&[2, 3]]),
];

pub fn apply<'t>(name: &str, tape: &'t Tape, v: &[Var<'t>]) -> Var<'t> {
    let out = match name {
        "add" => v[0].add(&v[1]).unwrap(),
        "sub" => v[0].sub(&v[1]).unwrap(),
        "mul" => v[0].mul(&v[1]).unwrap(),
        "add_row" => v[0].add_row(&v[1]).unwrap(),
        "mul_row" => v[0].mul_row(&v[1]).unwrap(),
        "matmul" => v[0].matmul(&v[1]).unwrap(),
        "bmm" => v[0].bmm(&v[1]).unwrap(),
        "bmm_nt" => v[0].bmm_nt(&v[1]).unwrap(),
        "softmax" => v[0].softmax(1).unwrap(),
        "masked_softmax" => {
            let causal = [true, false, false, true, true, false, true, true, true];
            v[0].masked_softmax(&causal).unwrap()
        }
        "log_softmax" => v[0].log_softmax().unwrap(),
        "layer_norm" => v[0].layer_norm(&v[1], &v[2]).unwrap(),
        "relu" => v[0].relu(),
        "gelu" => v[0].gelu(),
        "tanh" => v[0].tanh(),
        "exp" => v[0].exp(),
        "log" => v[0].square().add_scalar(0.5).log().unwrap(),
        "mean" => return v[0].mean(),
        "sum_last" => v[0].sum_last(),
        "minimum" => v[0].minimum(&v[1]).unwrap(),
        "clip" => v[0].scale(1.7).clip(-0.6, 0.9),
        "gather_last" => v[0].gather_last(&[2, 0, 1]).unwrap(),
        "concat_last" => Var::concat_last(&[v[0], v[1]]).unwrap(),
        "take_position" => v[0].take_position(1).unwrap(),
        "stack_positions" => Var::stack_positions(&[v[0], v[1]]).unwrap(),
        "scale" => v[0].scale(-1.3),
        "neg" => v[0].neg(),
        "add_scalar" => v[0].add_scalar(0.7).square(),
        "square" => v[0].square(),
        "sum" => return v[0].sum(),
        "reshape" => v[0].reshape(&[3, 2]).unwrap(),
        other => panic!("unknown primitive {other}"),
    };
    probe(tape, out)
}

/// Piecewise primitives have kinks where central differences straddle two
/// branches; such draws are resampled.
pub fn near_kink(name: &str, inputs: &[Tensor]) -> bool {
    let close = |x: f64, k: f64| (x - k).abs() < 1e-3;
    match name {
        "relu" => inputs[0].data().iter().any(|&x| close(x, 0.0)),
        "clip" => inputs[0].data().iter().any(|&x| close(x, -0.6 / 1.7) || close(x, 0.9 / 1.7)),
        "minimum" => inputs[0].data().iter().zip(inputs[1].data()).any(|(&a, &b)| close(a, b)),
        _ => false,
    }
}


/// Small architecture used throughout the tests: 3-dimensional observations,
/// `d_model = 8`, two heads, two blocks.
pub fn small_spec(n_agents: usize, action_space: ActionSpace, variant: Variant) -> ModelSpec {
    ModelSpec {
        n_agents,
        obs_dim: 3,
        action_space,
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        activation: Activation::Gelu,
        variant,
    }
}

pub fn small_model(n_agents: usize, action_space: ActionSpace, variant: Variant, seed: u64) -> MatModel {
    MatModel::new(small_spec(n_agents, action_space, variant), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Random model with its output layers rescaled so that the policy is far
/// from uniform; freshly initialised heads are nearly flat.
pub fn sharpened_model(n_agents: usize, action_space: ActionSpace, variant: Variant, seed: u64) -> MatModel {
    let mut model = small_model(n_agents, action_space, variant, seed);
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        if name.ends_with(".out.weight") {
            for x in model.params_mut().get_mut(id).data_mut() {
                *x *= 30.0;
            }
        }
    }
    model
}

pub fn random_obs(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Tensor {
    random(&[spec.n_agents, spec.obs_dim], rng)
}

/// Canonical joint action, `n * action_len` values.
pub fn random_actions(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match spec.action_space {
        ActionSpace::Discrete(k) => (0..spec.n_agents).map(|_| rng.random_range(0..k) as f64).collect(),
        ActionSpace::Continuous(d) => (0..spec.n_agents * d).map(|_| rng.random_range(-1.5..1.5)).collect(),
    }
}

/// Samples joint actions autoregressively, re-scores them with one
/// teacher-forced pass and returns the largest absolute log-prob gap.
pub fn teacher_forcing_gap(model: &MatModel, batch: usize, rng: &mut ChaCha8Rng) -> f64 {
    let spec = *model.spec();
    let obs: Vec<Tensor> = (0..batch).map(|_| random_obs(&spec, rng)).collect();
    let obs_refs: Vec<&Tensor> = obs.iter().collect();
    let ordering = AgentOrdering::random(spec.n_agents, rng);
    let mut rngs: Vec<ChaCha8Rng> = (0..batch).map(|_| ChaCha8Rng::seed_from_u64(rng.random())).collect();
    let out = model.act(&obs_refs, &ordering, &mut rngs, ActMode::Sample).unwrap();

    let tape = Tape::new();
    let p = model.params().bind(&tape, false);
    let acts: Vec<&[f64]> = out.action_rows.iter().map(Vec::as_slice).collect();
    let eval = model.evaluate(&p, &tape, &obs_refs, &acts, &ordering).unwrap();
    let lp = eval.log_probs.value();
    let n = spec.n_agents;
    let mut worst: f64 = 0.0;
    for b in 0..batch {
        let canonical = ordering.to_canonical(&lp.data()[b * n..(b + 1) * n], 1);
        for (x, y) in canonical.iter().zip(&out.log_probs[b]) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

/// Changes the actions at decoding positions `m..n` and checks that the
/// distribution parameters of rows `0..=m` stay bit-identical. Returns
/// `(rows_unchanged, later_row_changed)`.
pub fn causality_trial(model: &MatModel, rng: &mut ChaCha8Rng) -> (bool, bool) {
    let spec = *model.spec();
    let n = spec.n_agents;
    let len = match spec.action_space {
        ActionSpace::Discrete(_) => 1,
        ActionSpace::Continuous(d) => d,
    };
    let obs = random_obs(&spec, rng);
    let ordering = AgentOrdering::random(n, rng);
    let base = random_actions(&spec, rng);
    let m = rng.random_range(0..n);
    let mut changed = base.clone();
    loop {
        let fresh = random_actions(&spec, rng);
        changed[m * len..].copy_from_slice(&fresh[m * len..]);
        if changed != base {
            break;
        }
    }
    let before = model.distributions(&obs, &base, &ordering).unwrap();
    let after = model.distributions(&obs, &changed, &ordering).unwrap();
    let unchanged = (0..=m).all(|r| bits(&before[r]) == bits(&after[r]));
    let later = (m + 1..n).any(|r| bits(&before[r]) != bits(&after[r]));
    (unchanged, later)
}

fn bits(d: &ActionDistribution) -> Vec<u64> {
    match d {
        ActionDistribution::Categorical { logits } => logits.iter().map(|x| x.to_bits()).collect(),
        ActionDistribution::Gaussian { mean, log_std } => mean.iter().chain(log_std).map(|x| x.to_bits()).collect(),
    }
}

/// Encodes a batch under the identity order and under a random order and
/// returns the largest mismatch between corresponding encoding and value
/// entries.
pub fn equivariance_gap(model: &MatModel, batch: usize, rng: &mut ChaCha8Rng) -> f64 {
    let spec = *model.spec();
    let (n, d) = (spec.n_agents, spec.obs_dim);
    let obs: Vec<Tensor> = (0..batch).map(|_| random_obs(&spec, rng)).collect();
    let stack = |ordering: &AgentOrdering| {
        let data = obs.iter().flat_map(|o| ordering.to_decoding(o.data(), d)).collect();
        Tensor::new(vec![batch, n, d], data).unwrap()
    };
    let encode = |ordering: &AgentOrdering| {
        let tape = Tape::new();
        let p = model.params().bind(&tape, false);
        let (e, v) = model.encode(&p, &tape, &stack(ordering), ordering).unwrap();
        let (e, v) = ((*e.value()).clone(), (*v.value()).clone());
        (e, v)
    };
    let identity = AgentOrdering::identity(n);
    let perm = AgentOrdering::random(n, rng);
    let (e0, v0) = encode(&identity);
    let (e1, v1) = encode(&perm);
    let w = spec.d_model;
    let mut worst: f64 = 0.0;
    for b in 0..batch {
        for m in 0..n {
            let a = perm.agent(m);
            let r1 = &e1.data()[(b * n + m) * w..(b * n + m + 1) * w];
            let r0 = &e0.data()[(b * n + a) * w..(b * n + a + 1) * w];
            for (x, y) in r1.iter().zip(r0) {
                worst = worst.max((x - y).abs());
            }
            worst = worst.max((v1.data()[b * n + m] - v0.data()[b * n + a]).abs());
        }
    }
    worst
}

/// Random rollout segment for GAE: rewards, values, done flags (at least
/// one) and a bootstrap value.
pub fn random_segment(len: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<bool>, f64) {
    let rewards = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let values = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut dones: Vec<bool> = (0..len).map(|_| rng.random_bool(0.15)).collect();
    let forced = rng.random_range(0..len);
    dones[forced] = true;
    (rewards, values, dones, rng.random_range(-2.0..2.0))
}

/// Which of the two training losses a gradient check differentiates.
#[derive(Clone, Copy, Debug)]
pub enum LossKind {
    Encoder,
    Decoder,
}

/// A toy batch for the loss gradient checks.
pub struct LossInstance {
    pub obs: Vec<Tensor>,
    pub actions: Vec<Vec<f64>>,
    pub ordering: AgentOrdering,
    pub targets: Tensor,
    pub old_log_probs: Tensor,
    pub advantages: Tensor,
    pub clip: f64,
    pub entropy_coef: f64,
}

impl LossInstance {
    /// `steps` samples; old log-probs are the current ones plus noise, kept
    /// away from the clip boundaries.
    pub fn random(model: &MatModel, steps: usize, rng: &mut ChaCha8Rng) -> Self {
        let spec = *model.spec();
        let n = spec.n_agents;
        let obs: Vec<Tensor> = (0..steps).map(|_| random_obs(&spec, rng)).collect();
        let actions: Vec<Vec<f64>> = (0..steps).map(|_| random_actions(&spec, rng)).collect();
        let ordering = AgentOrdering::random(n, rng);
        let clip = 0.2;
        let current = {
            let tape = Tape::new();
            let p = model.params().bind(&tape, false);
            let obs_refs: Vec<&Tensor> = obs.iter().collect();
            let acts: Vec<&[f64]> = actions.iter().map(Vec::as_slice).collect();
            let lp = model.evaluate(&p, &tape, &obs_refs, &acts, &ordering).unwrap().log_probs.value();
            (*lp).clone()
        };
        let old: Vec<f64> = current
            .data()
            .iter()
            .map(|lp| loop {
                let shift: f64 = rng.random_range(-0.4..0.4);
                let gap = (shift.exp() - 1.0).abs() - clip;
                if gap.abs() > 1e-2 {
                    break lp - shift;
                }
            })
            .collect();
        Self {
            targets: random(&[steps, n], rng),
            old_log_probs: Tensor::new(vec![steps, n], old).unwrap(),
            advantages: random(&[steps, n], rng),
            obs,
            actions,
            ordering,
            clip,
            entropy_coef: 0.01,
        }
    }

    pub fn loss<'t>(&self, model: &MatModel, tape: &'t Tape, p: &Bound<'t>, kind: LossKind) -> Var<'t> {
        let obs: Vec<&Tensor> = self.obs.iter().collect();
        let acts: Vec<&[f64]> = self.actions.iter().map(Vec::as_slice).collect();
        let eval = model.evaluate(p, tape, &obs, &acts, &self.ordering).unwrap();
        match kind {
            LossKind::Encoder => encoder_loss(tape, &eval.values, &self.targets, model.spec().variant).unwrap(),
            LossKind::Decoder => {
                let labels: Vec<usize> = (0..self.obs.len()).collect();
                decoder_loss(
                    tape,
                    &eval.log_probs,
                    &self.old_log_probs,
                    &self.advantages,
                    &eval.entropy,
                    self.clip,
                    self.entropy_coef,
                    &labels,
                )
                .unwrap()
                .loss
            }
        }
    }
}

/// Worst relative error between the tape gradient of a loss and central
/// differences, over every parameter whose name passes `select`.
pub fn loss_gradient_error(model: &MatModel, inst: &LossInstance, kind: LossKind, select: impl Fn(&str) -> bool) -> f64 {
    let tape = Tape::new();
    let p = model.params().bind(&tape, true);
    let grads = inst.loss(model, &tape, &p, kind).backward().unwrap();
    let analytic = p.gradients(&grads);

    let mut work = model.clone();
    let eval = |work: &MatModel| {
        let tape = Tape::new();
        let p = work.params().bind(&tape, false);
        inst.loss(work, &tape, &p, kind).item().unwrap()
    };
    let ids: Vec<ParamId> = model.params().ids().filter(|&id| select(model.params().name(id))).collect();
    assert!(!ids.is_empty(), "no parameters selected");
    let mut a = Vec::new();
    let mut num = Vec::new();
    for id in ids {
        for i in 0..model.params().get(id).len() {
            let orig = model.params().get(id).data()[i];
            work.params_mut().get_mut(id).data_mut()[i] = orig + STEP;
            let plus = eval(&work);
            work.params_mut().get_mut(id).data_mut()[i] = orig - STEP;
            let minus = eval(&work);
            work.params_mut().get_mut(id).data_mut()[i] = orig;
            num.push((plus - minus) / (2.0 * STEP));
            a.push(analytic[id.index()].data()[i]);
        }
    }
    max_relative_error(&a, &num, FLOOR)
}

/// Random tabular game with 2 or 3 agents, up to 5 states and between 1 and
/// 3 actions per agent (counts may differ between agents), plus a random
/// product policy and its exact values.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (TabularGame, Policy, ExactValues) {
    let agents = rng.random_range(2..=3);
    let states = rng.random_range(1..=5);
    let counts: Vec<usize> = (0..agents).map(|_| rng.random_range(1..=3)).collect();
    let joint: usize = counts.iter().product();
    let row = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..states).map(|_| rng.random_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / z).collect::<Vec<f64>>()
    };
    let transitions = (0..states).map(|_| (0..joint).map(|_| row(rng)).collect()).collect();
    let rewards = (0..states).map(|_| (0..joint).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let gamma = rng.random_range(0.5..0.95);
    let game = TabularGame::new(counts, transitions, rewards, gamma, vec![1.0 / states as f64; states]).unwrap();
    let policy = Policy::random_product(&game, rng);
    let values = exact_policy_eval(&game, &policy).unwrap();
    (game, policy, values)
}

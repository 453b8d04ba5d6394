//! On-policy training: rollout collection with the autoregressive policy,
//! advantage estimation, the value (encoder) and clipped policy (decoder)
//! losses, and Adam updates.

mod buffer;
mod loss;
mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{compute_gae, gae, normalize_advantages, AdvantageMode, TrajectoryBuffer, Transition};
pub use loss::{decoder_loss, encoder_loss, DecoderLoss};
pub use optim::{clip_grad_norm, global_norm, optimizer_step, AdamSettings, OptimState, BETA1, BETA2};

use crate::autodiff::{Tape, Tensor};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::model::{ActMode, ActOutput, AgentOrdering, MatModel, Variant};

/// Environment variable capping the number of rollout worker threads.
pub const THREADS_ENV: &str = "MAT_THREADS";

/// Hyperparameters of the training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub ppo_epochs: usize,
    pub num_minibatch: usize,
    /// Steps collected per environment per iteration.
    pub rollout_len: usize,
    /// Parallel environments.
    pub n_envs: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
    /// PPO epochs between hard copies of the value path into the target.
    pub target_sync_epochs: usize,
    pub normalize_advantages: bool,
    /// Rollout worker threads (further capped by `MAT_THREADS`).
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.05,
            entropy_coef: 0.01,
            ppo_epochs: 10,
            num_minibatch: 1,
            rollout_len: 20,
            n_envs: 8,
            lr_actor: 5e-4,
            lr_critic: 5e-4,
            max_grad_norm: 10.0,
            adam_eps: 1e-5,
            target_sync_epochs: 10,
            normalize_advantages: true,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, as `field: reason`.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                v.push(msg.to_string());
            }
        };
        check((0.0..1.0).contains(&self.gamma), "gamma: must lie in [0, 1)");
        check((0.0..=1.0).contains(&self.gae_lambda), "gae_lambda: must lie in [0, 1]");
        check(self.clip > 0.0 && self.clip < 1.0, "clip: must lie in (0, 1)");
        check(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite(), "entropy_coef: must be non-negative");
        check(self.ppo_epochs > 0, "ppo_epochs: must be positive");
        check(self.num_minibatch > 0, "num_minibatch: must be positive");
        check(self.rollout_len > 0, "rollout_len: must be positive");
        check(self.n_envs > 0, "n_envs: must be positive");
        check(self.lr_actor >= 0.0 && self.lr_actor.is_finite(), "lr_actor: must be non-negative");
        check(self.lr_critic >= 0.0 && self.lr_critic.is_finite(), "lr_critic: must be non-negative");
        check(self.max_grad_norm > 0.0, "max_grad_norm: must be positive");
        check(self.adam_eps > 0.0, "adam_eps: must be positive");
        check(self.target_sync_epochs > 0, "target_sync_epochs: must be positive");
        check(self.workers > 0, "workers: must be positive");
        check(
            self.num_minibatch <= self.rollout_len * self.n_envs,
            "num_minibatch: exceeds the number of samples per iteration",
        );
        v
    }

    fn adam(&self) -> AdamSettings {
        AdamSettings {
            lr_encoder: self.lr_critic,
            lr_decoder: self.lr_actor,
            eps: self.adam_eps,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

/// Per-iteration metrics, in the column order of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iteration: u64,
    pub env_steps: u64,
    pub mean_return: f64,
    pub encoder_loss: f64,
    pub decoder_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub explained_variance: f64,
    pub wall_seconds: f64,
}

impl Metrics {
    pub fn all_finite(&self) -> bool {
        [
            self.mean_return,
            self.encoder_loss,
            self.decoder_loss,
            self.entropy,
            self.clip_fraction,
            self.explained_variance,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Everything that evolves during training.
pub struct Trainer {
    pub model: MatModel,
    pub optim: OptimState,
    pub config: TrainConfig,
    /// Drives agent orderings and minibatch shuffles.
    pub rng: ChaCha8Rng,
    /// One stream per environment for its dynamics and action sampling.
    pub env_rngs: Vec<ChaCha8Rng>,
    pub iteration: u64,
    pub env_steps: u64,
    pub epochs_done: u64,
    pub last_mean_return: f64,
    envs: Vec<Box<dyn Environment>>,
    obs: Vec<Tensor>,
    running_returns: Vec<f64>,
}

/// Stream ids derived from the run seed.
const TRAINER_STREAM: u64 = 1;
const ENV_STREAM_BASE: u64 = 16;

/// Random generator for a given seed and stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl Trainer {
    /// Fresh trainer; environments are reset with their own streams.
    pub fn new(model: MatModel, envs: Vec<Box<dyn Environment>>, config: TrainConfig, seed: u64) -> Result<Self> {
        let env_rngs = (0..envs.len() as u64).map(|e| stream_rng(seed, ENV_STREAM_BASE + e)).collect();
        let optim = OptimState::new(model.params());
        Self::resume(model, optim, envs, config, stream_rng(seed, TRAINER_STREAM), env_rngs)
    }

    /// Trainer from saved state. Environments start fresh episodes.
    pub fn resume(
        model: MatModel,
        optim: OptimState,
        mut envs: Vec<Box<dyn Environment>>,
        config: TrainConfig,
        rng: ChaCha8Rng,
        mut env_rngs: Vec<ChaCha8Rng>,
    ) -> Result<Self> {
        let violations = config.violations();
        if !violations.is_empty() {
            return Err(Error::Config(violations));
        }
        if envs.len() != config.n_envs || env_rngs.len() != envs.len() {
            return Err(Error::contract(format!(
                "{} environments and {} rng streams for n_envs = {}",
                envs.len(),
                env_rngs.len(),
                config.n_envs
            )));
        }
        let spec = model.spec();
        for env in &envs {
            if env.n_agents() != spec.n_agents || env.obs_dim() != spec.obs_dim || env.action_space() != spec.action_space {
                return Err(Error::contract("environment does not match the model's agents, observations or actions"));
            }
        }
        let obs = envs.iter_mut().zip(env_rngs.iter_mut()).map(|(e, r)| e.reset(r)).collect();
        Ok(Self {
            model,
            optim,
            config,
            rng,
            env_rngs,
            iteration: 0,
            env_steps: 0,
            epochs_done: 0,
            last_mean_return: 0.0,
            running_returns: vec![0.0; envs.len()],
            envs,
            obs,
        })
    }

    fn workers(&self) -> usize {
        let cap = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .unwrap_or(usize::MAX);
        self.config.workers.min(cap).min(self.envs.len()).max(1)
    }

    /// Samples actions for every environment, fanning out across worker
    /// threads. Each environment samples from its own stream, so the result
    /// does not depend on the number of workers.
    fn act_all(&mut self, ordering: &AgentOrdering) -> Result<ActOutput> {
        let workers = self.workers();
        let obs: Vec<&Tensor> = self.obs.iter().collect();
        if workers == 1 {
            return self.model.act(&obs, ordering, &mut self.env_rngs, ActMode::Sample);
        }
        let chunk = obs.len().div_ceil(workers);
        let model = &self.model;
        let parts: Vec<Result<ActOutput>> = std::thread::scope(|s| {
            let handles: Vec<_> = obs
                .chunks(chunk)
                .zip(self.env_rngs.chunks_mut(chunk))
                .map(|(o, r)| s.spawn(move || model.act(o, ordering, r, ActMode::Sample)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::contract("rollout worker panicked"))))
                .collect()
        });
        let mut out = ActOutput {
            actions: Vec::new(),
            action_rows: Vec::new(),
            log_probs: Vec::new(),
            values: Vec::new(),
        };
        for part in parts {
            let p = part?;
            out.actions.extend(p.actions);
            out.action_rows.extend(p.action_rows);
            out.log_probs.extend(p.log_probs);
            out.values.extend(p.values);
        }
        Ok(out)
    }

    /// Runs the current policy for `rollout_len` steps in every environment.
    /// Returns the buffer and the returns of episodes that finished.
    pub fn collect(&mut self, ordering: AgentOrdering) -> Result<(TrajectoryBuffer, Vec<f64>)> {
        let (steps, n_envs) = (self.config.rollout_len, self.envs.len());
        let mut buffer = TrajectoryBuffer::new(steps, n_envs, self.model.spec().n_agents, ordering.clone())?;
        let mut finished = Vec::new();
        for _ in 0..steps {
            let out = self.act_all(&ordering)?;
            for e in 0..n_envs {
                let step = self.envs[e].step(&out.actions[e], &mut self.env_rngs[e])?;
                self.running_returns[e] += step.reward;
                let next = if step.done {
                    finished.push(std::mem::take(&mut self.running_returns[e]));
                    self.envs[e].reset(&mut self.env_rngs[e])
                } else {
                    step.obs
                };
                let obs = std::mem::replace(&mut self.obs[e], next);
                buffer.push(Transition {
                    obs,
                    actions: out.action_rows[e].clone(),
                    log_probs: out.log_probs[e].clone(),
                    values: out.values[e].clone(),
                    reward: step.reward,
                    done: step.done,
                })?;
            }
        }
        let obs: Vec<&Tensor> = self.obs.iter().collect();
        let values = self.model.values(&obs)?;
        buffer.set_bootstrap(self.obs.clone(), values)?;
        Ok((buffer, finished))
    }

    /// `R + γ (1 - done) V̄(o')` for every sample and agent, canonical order.
    fn bellman_targets(&self, buffer: &TrajectoryBuffer) -> Result<Vec<Vec<f64>>> {
        let next: Vec<&Tensor> = (0..buffer.len()).map(|k| buffer.next_obs(k)).collect::<Result<_>>()?;
        let v_next = self.model.target_values(&next)?;
        Ok(buffer
            .transitions()
            .iter()
            .zip(v_next)
            .map(|(tr, v)| {
                let live = if tr.done { 0.0 } else { self.config.gamma };
                v.iter().map(|x| tr.reward + live * x).collect()
            })
            .collect())
    }

    /// One gradient step on the samples `chunk`. Returns encoder loss,
    /// decoder loss, mean entropy and clip fraction.
    fn update(
        &mut self,
        buffer: &TrajectoryBuffer,
        chunk: &[usize],
        advantages: &[Vec<f64>],
        targets: &[Vec<f64>],
    ) -> Result<[f64; 4]> {
        let ordering = buffer.ordering();
        let n = buffer.n_agents();
        let rows = |per_sample: Vec<&[f64]>| -> Result<Tensor> {
            let data = per_sample.into_iter().flat_map(|r| ordering.to_decoding(r, 1)).collect();
            Tensor::new(vec![chunk.len(), n], data)
        };
        let old = rows(chunk.iter().map(|&k| buffer.transition(k).log_probs.as_slice()).collect())?;
        let adv = rows(chunk.iter().map(|&k| advantages[k].as_slice()).collect())?;
        let tgt = rows(chunk.iter().map(|&k| targets[k].as_slice()).collect())?;
        let labels: Vec<usize> = chunk.iter().map(|&k| buffer.step_of(k).0).collect();

        let tape = Tape::new();
        let p = self.model.params().bind(&tape, true);
        let obs: Vec<&Tensor> = chunk.iter().map(|&k| &buffer.transition(k).obs).collect();
        let acts: Vec<&[f64]> = chunk.iter().map(|&k| buffer.transition(k).actions.as_slice()).collect();
        let eval = self.model.evaluate(&p, &tape, &obs, &acts, ordering)?;
        let enc = encoder_loss(&tape, &eval.values, &tgt, self.model.spec().variant)?;
        let dec = decoder_loss(
            &tape,
            &eval.log_probs,
            &old,
            &adv,
            &eval.entropy,
            self.config.clip,
            self.config.entropy_coef,
            &labels,
        )?;
        let total = enc.add(&dec.loss)?;
        let values = [enc.item()?, dec.loss.item()?, eval.entropy.mean().item()?, dec.clip_fraction];
        if !total.item()?.is_finite() {
            return Err(Error::numeric(format!("non-finite loss at iteration {}", self.iteration)));
        }
        let grads = total.backward()?;
        let mut g = p.gradients(&grads);
        optimizer_step(self.model.params_mut(), &mut g, &mut self.optim, &self.config.adam())?;
        Ok(values)
    }

    /// One collection + training iteration. On error the parameters,
    /// optimiser state and target network are left as they were.
    pub fn train_iteration(&mut self) -> Result<Metrics> {
        let start = Instant::now();
        let n = self.model.spec().n_agents;
        let ordering = AgentOrdering::random(n, &mut self.rng);
        let (mut buffer, finished) = self.collect(ordering)?;
        let mode = match self.model.spec().variant {
            Variant::Mat => AdvantageMode::Joint,
            Variant::MatDec => AdvantageMode::PerAgent,
        };
        compute_gae(&mut buffer, self.config.gamma, self.config.gae_lambda, mode)?;
        let explained_variance = explained_variance(
            &(0..buffer.len()).map(|k| buffer.joint_value(k)).collect::<Vec<_>>(),
            &buffer
                .value_targets()
                .iter()
                .map(|t| t.iter().sum::<f64>() / n as f64)
                .collect::<Vec<_>>(),
        );
        let mut advantages = buffer.advantages().to_vec();
        if self.config.normalize_advantages {
            normalize_advantages(&mut advantages);
        }

        let snapshot = (self.model.clone(), self.optim.clone(), self.epochs_done);
        let result = self.optimise(&buffer, &advantages);
        let sums = match result {
            Ok(s) => s,
            Err(e) => {
                (self.model, self.optim, self.epochs_done) = snapshot;
                return Err(e);
            }
        };

        self.iteration += 1;
        self.env_steps += buffer.len() as u64;
        if !finished.is_empty() {
            self.last_mean_return = finished.iter().sum::<f64>() / finished.len() as f64;
        }
        Ok(Metrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            mean_return: self.last_mean_return,
            encoder_loss: sums[0],
            decoder_loss: sums[1],
            entropy: sums[2],
            clip_fraction: sums[3],
            explained_variance,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// PPO epochs over shuffled minibatches; returns averaged statistics.
    fn optimise(&mut self, buffer: &TrajectoryBuffer, advantages: &[Vec<f64>]) -> Result<[f64; 4]> {
        let size = buffer.len().div_ceil(self.config.num_minibatch);
        let mut sums = [0.0; 4];
        let mut updates = 0.0;
        for _ in 0..self.config.ppo_epochs {
            let targets = self.bellman_targets(buffer)?;
            let mut idx: Vec<usize> = (0..buffer.len()).collect();
            idx.shuffle(&mut self.rng);
            for chunk in idx.chunks(size) {
                let s = self.update(buffer, chunk, advantages, &targets)?;
                sums.iter_mut().zip(s).for_each(|(a, b)| *a += b);
                updates += 1.0;
            }
            self.epochs_done += 1;
            if self.epochs_done % self.config.target_sync_epochs as u64 == 0 {
                self.model.sync_target();
            }
        }
        Ok(sums.map(|s| s / updates))
    }
}

/// `1 - Var(y - ŷ) / Var(y)`; 0 when the targets are constant.
pub fn explained_variance(predicted: &[f64], targets: &[f64]) -> f64 {
    let var = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
    };
    let vy = var(targets);
    if targets.is_empty() || vy < 1e-12 {
        return 0.0;
    }
    let resid: Vec<f64> = targets.iter().zip(predicted).map(|(y, p)| y - p).collect();
    1.0 - var(&resid) / vy
}

/// Summary of evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Plays `episodes` full episodes; each draws a fresh agent ordering.
pub fn evaluate_policy(
    model: &MatModel,
    env: &mut dyn Environment,
    episodes: usize,
    mode: ActMode,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::contract("evaluation needs at least one episode"));
    }
    let n = model.spec().n_agents;
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        let ordering = AgentOrdering::random(n, rng);
        let mut total = 0.0;
        for _ in 0..env.horizon() {
            let out = model.act(&[&obs], &ordering, std::slice::from_mut(rng), mode)?;
            let step = env.step(&out.actions[0], rng)?;
            total += step.reward;
            obs = step.obs;
            if step.done {
                break;
            }
        }
        returns.push(total);
    }
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / episodes as f64).sqrt();
    Ok(EvalReport { returns, mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_violations_are_listed() {
        assert!(TrainConfig::default().violations().is_empty());
        let bad = TrainConfig {
            gamma: 1.0,
            clip: 0.0,
            lr_actor: -1.0,
            ..TrainConfig::default()
        };
        let v = bad.violations();
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v[0].starts_with("gamma"));
    }

    #[test]
    fn explained_variance_edges() {
        assert_eq!(explained_variance(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert_eq!(explained_variance(&[0.0, 0.0], &[3.0, 3.0]), 0.0);
    }
}

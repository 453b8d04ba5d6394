use rand_chacha::ChaCha8Rng;

use super::{check_actions, dummy_obs, ActionSpace, Environment, JointAction, JointStep};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Repeated lock-opening game that rewards correlated randomisation.
///
/// Each step the `n` agents pick one of `k` keys. The lock opens (reward 1)
/// only when every agent picks the same key and that key differs from the
/// key that opened the previous lock in this episode; any other joint action
/// earns 0. The first lock of an episode accepts any agreed key.
///
/// Observations are a constant dummy value, so the last key is hidden and a
/// policy can only beat "open once" by randomising which key to use while
/// keeping all agents in agreement. An autoregressive joint policy does this
/// by letting later agents copy the first agent's sampled key: the best
/// achievable return is `1 + (horizon - 1)(k - 1)/k`. A product of
/// independent per-agent policies cannot keep agreement and randomness at
/// once and is limited to about 1.
#[derive(Clone, Debug)]
pub struct SequentialUnlock {
    n: usize,
    k: usize,
    horizon: usize,
    last_key: Option<usize>,
    t: usize,
}

impl SequentialUnlock {
    pub const DEFAULT_KEYS: usize = 3;
    pub const DEFAULT_HORIZON: usize = 5;

    pub fn new(n: usize) -> Result<Self> {
        Self::with_params(n, Self::DEFAULT_KEYS, Self::DEFAULT_HORIZON)
    }

    pub fn with_params(n: usize, k: usize, horizon: usize) -> Result<Self> {
        if n == 0 || k < 2 || horizon == 0 {
            return Err(Error::contract("unlock game needs n >= 1, k >= 2, horizon >= 1"));
        }
        Ok(Self {
            n,
            k,
            horizon,
            last_key: None,
            t: 0,
        })
    }

    /// Expected return of uniformly random independent agents.
    pub fn random_return(&self) -> f64 {
        let agree = (self.k as f64).powi(1 - self.n as i32);
        // A failed step leaves the previous key in place, so the last key is
        // always uniform once any lock has opened.
        let mut total = 0.0;
        let mut p_open_before = 0.0;
        for _ in 0..self.horizon {
            let fresh = 1.0 - p_open_before;
            let p = agree * (fresh + p_open_before * (self.k - 1) as f64 / self.k as f64);
            total += p;
            p_open_before = p_open_before + fresh * agree;
        }
        total
    }
}

impl Environment for SequentialUnlock {
    fn n_agents(&self) -> usize {
        self.n
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(self.k)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reward_bound(&self) -> f64 {
        1.0
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Tensor {
        self.last_key = None;
        self.t = 0;
        dummy_obs(self.n)
    }

    fn step(&mut self, action: &JointAction, _rng: &mut ChaCha8Rng) -> Result<JointStep> {
        let actions = action.discrete()?;
        check_actions(actions, self.n, self.k)?;
        if self.t >= self.horizon {
            return Err(Error::Env("step after episode end".into()));
        }
        self.t += 1;
        let key = actions[0];
        let agreed = actions.iter().all(|&a| a == key);
        let reward = if agreed && self.last_key != Some(key) {
            self.last_key = Some(key);
            1.0
        } else {
            0.0
        };
        Ok(JointStep {
            obs: dummy_obs(self.n),
            reward,
            done: self.t == self.horizon,
            step: self.t,
        })
    }

    fn optimal_return(&self) -> Option<f64> {
        Some(1.0 + (self.horizon - 1) as f64 * (self.k - 1) as f64 / self.k as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn fresh_agreed_key_opens_the_lock() {
        let mut g = SequentialUnlock::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        g.reset(&mut rng);
        let mut play = |a: [usize; 3]| g.step(&JointAction::Discrete(a.to_vec()), &mut rng).unwrap();
        assert_eq!(play([1, 1, 1]).reward, 1.0);
        assert_eq!(play([1, 1, 1]).reward, 0.0, "same key twice");
        assert_eq!(play([0, 2, 0]).reward, 0.0, "disagreement");
        assert_eq!(play([2, 2, 2]).reward, 1.0);
        let last = play([1, 1, 1]);
        assert_eq!(last.reward, 1.0);
        assert!(last.done);
    }

    #[test]
    fn optimal_and_random_returns() {
        let g = SequentialUnlock::new(3).unwrap();
        assert!((g.optimal_return().unwrap() - (1.0 + 4.0 * 2.0 / 3.0)).abs() < 1e-12);

        // Monte Carlo check of the closed form for random play.
        let mut env = g.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let episodes = 100_000;
        let mut total = 0.0;
        for _ in 0..episodes {
            env.reset(&mut rng);
            loop {
                let a: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
                let s = env.step(&JointAction::Discrete(a), &mut rng).unwrap();
                total += s.reward;
                if s.done {
                    break;
                }
            }
        }
        let mc = total / episodes as f64;
        assert!((mc - g.random_return()).abs() < 0.01, "{mc} vs {}", g.random_return());
    }
}

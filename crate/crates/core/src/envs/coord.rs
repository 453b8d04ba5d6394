use rand_chacha::ChaCha8Rng;

use super::{check_actions, dummy_obs, joint_actions, ActionSpace, Environment, JointAction, JointStep};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MISMATCH_PENALTY: f64 = 0.1;

/// One-shot coordination game.
///
/// `n` agents each pick one of `k` actions. The team earns 1 when everyone
/// picks the designated action `k - 1`; otherwise it pays 0.1 for every
/// pair of agents whose actions differ (so all agreeing on a different
/// action earns 0). Observations are a constant dummy value.
#[derive(Clone, Debug)]
pub struct CoordMatrixGame {
    n: usize,
    k: usize,
}

impl CoordMatrixGame {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if n == 0 || k < 2 {
            return Err(Error::contract("coordination game needs n >= 1 agents and k >= 2 actions"));
        }
        Ok(Self { n, k })
    }

    pub fn designated_action(&self) -> usize {
        self.k - 1
    }

    pub fn payoff(&self, actions: &[usize]) -> f64 {
        if actions.iter().all(|&a| a == self.designated_action()) {
            return 1.0;
        }
        let mut mismatched = 0;
        for i in 0..actions.len() {
            for j in i + 1..actions.len() {
                if actions[i] != actions[j] {
                    mismatched += 1;
                }
            }
        }
        -MISMATCH_PENALTY * mismatched as f64
    }
}

impl Environment for CoordMatrixGame {
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
        1
    }

    fn reward_bound(&self) -> f64 {
        let pairs = (self.n * (self.n - 1) / 2) as f64;
        (MISMATCH_PENALTY * pairs).max(1.0)
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Tensor {
        dummy_obs(self.n)
    }

    fn step(&mut self, action: &JointAction, _rng: &mut ChaCha8Rng) -> Result<JointStep> {
        let actions = action.discrete()?;
        check_actions(actions, self.n, self.k)?;
        Ok(JointStep {
            obs: dummy_obs(self.n),
            reward: self.payoff(actions),
            done: true,
            step: 1,
        })
    }

    fn optimal_return(&self) -> Option<f64> {
        joint_actions(self.n, self.k).map(|a| self.payoff(&a)).reduce(f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn designated_action_pays_one_and_mismatch_is_penalised() {
        let mut g = CoordMatrixGame::new(2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = g.step(&JointAction::Discrete(vec![2, 2]), &mut rng).unwrap();
        assert_eq!(s.reward, 1.0);
        assert!(s.done);
        let s = g.step(&JointAction::Discrete(vec![2, 0]), &mut rng).unwrap();
        assert_eq!(s.reward, -0.1);
        let s = g.step(&JointAction::Discrete(vec![1, 1]), &mut rng).unwrap();
        assert_eq!(s.reward, 0.0);
        assert_eq!(g.optimal_return(), Some(1.0));
    }

    #[test]
    fn observation_is_constant() {
        let mut g = CoordMatrixGame::new(3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(g.reset(&mut rng).data(), &[1.0, 1.0, 1.0]);
    }
}

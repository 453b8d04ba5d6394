use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_actions, ActionSpace, Environment, JointAction, JointStep};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Grid cover task: `n` agents, `n` goal cells, shared reward equal to the
/// number of distinct goals currently occupied.
///
/// Actions: 0 stay, 1 up, 2 down, 3 left, 4 right (moves off the grid are
/// clamped). Every agent observes the full state: its own position, then all
/// agent positions, then all goal positions, each coordinate scaled to
/// `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Spread {
    n: usize,
    grid: usize,
    horizon: usize,
    agents: Vec<(usize, usize)>,
    goals: Vec<(usize, usize)>,
    t: usize,
}

impl Spread {
    pub fn new(n: usize, grid: usize, horizon: usize) -> Result<Self> {
        if n == 0 || grid < 2 || grid * grid < n || horizon == 0 {
            return Err(Error::contract("spread needs n >= 1, grid >= 2 with room for n goals, horizon >= 1"));
        }
        Ok(Self {
            n,
            grid,
            horizon,
            agents: vec![(0, 0); n],
            goals: (0..n).map(|i| (i % grid, i / grid)).collect(),
            t: 0,
        })
    }

    /// Places agents and goals explicitly.
    pub fn set_layout(&mut self, agents: Vec<(usize, usize)>, goals: Vec<(usize, usize)>) -> Result<Tensor> {
        let inside = |&(x, y): &(usize, usize)| x < self.grid && y < self.grid;
        if agents.len() != self.n || goals.len() != self.n || !agents.iter().chain(&goals).all(inside) {
            return Err(Error::contract("layout does not fit the grid"));
        }
        self.agents = agents;
        self.goals = goals;
        self.t = 0;
        Ok(self.observe())
    }

    fn covered(&self) -> usize {
        self.goals.iter().filter(|g| self.agents.contains(g)).count()
    }

    fn observe(&self) -> Tensor {
        let scale = (self.grid - 1) as f64;
        let mut shared = Vec::with_capacity(4 * self.n);
        for &(x, y) in self.agents.iter().chain(&self.goals) {
            shared.push(x as f64 / scale);
            shared.push(y as f64 / scale);
        }
        let mut data = Vec::with_capacity(self.n * (2 + shared.len()));
        for &(x, y) in &self.agents {
            data.push(x as f64 / scale);
            data.push(y as f64 / scale);
            data.extend_from_slice(&shared);
        }
        Tensor::new(vec![self.n, self.obs_dim()], data).expect("spread obs")
    }
}

impl Environment for Spread {
    fn n_agents(&self) -> usize {
        self.n
    }

    fn obs_dim(&self) -> usize {
        2 + 4 * self.n
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(5)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reward_bound(&self) -> f64 {
        self.n as f64
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Tensor {
        let cells = self.grid * self.grid;
        let mut goals: Vec<usize> = Vec::with_capacity(self.n);
        while goals.len() < self.n {
            let c = rng.random_range(0..cells);
            if !goals.contains(&c) {
                goals.push(c);
            }
        }
        self.goals = goals.iter().map(|c| (c % self.grid, c / self.grid)).collect();
        self.agents = (0..self.n)
            .map(|_| (rng.random_range(0..self.grid), rng.random_range(0..self.grid)))
            .collect();
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &JointAction, _rng: &mut ChaCha8Rng) -> Result<JointStep> {
        let actions = action.discrete()?;
        check_actions(actions, self.n, 5)?;
        if self.t >= self.horizon {
            return Err(Error::Env("step after episode end".into()));
        }
        let top = self.grid - 1;
        for (pos, &a) in self.agents.iter_mut().zip(actions) {
            let (x, y) = *pos;
            *pos = match a {
                1 => (x, y.saturating_sub(1)),
                2 => (x, (y + 1).min(top)),
                3 => (x.saturating_sub(1), y),
                4 => ((x + 1).min(top), y),
                _ => (x, y),
            };
        }
        self.t += 1;
        Ok(JointStep {
            obs: self.observe(),
            reward: self.covered() as f64,
            done: self.t == self.horizon,
            step: self.t,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn agents_on_distinct_goals_earn_n() {
        let mut env = Spread::new(2, 4, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.set_layout(vec![(1, 1), (2, 3)], vec![(1, 1), (2, 3)]).unwrap();
        let s = env.step(&JointAction::Discrete(vec![0, 0]), &mut rng).unwrap();
        assert_eq!(s.reward, 2.0);
        // both agents on the same goal cover only one
        env.set_layout(vec![(1, 1), (1, 1)], vec![(1, 1), (2, 3)]).unwrap();
        let s = env.step(&JointAction::Discrete(vec![0, 0]), &mut rng).unwrap();
        assert_eq!(s.reward, 1.0);
    }

    #[test]
    fn moves_clamp_at_walls() {
        let mut env = Spread::new(1, 3, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.set_layout(vec![(0, 0)], vec![(2, 2)]).unwrap();
        let s = env.step(&JointAction::Discrete(vec![1]), &mut rng).unwrap();
        assert_eq!(&s.obs.data()[..2], &[0.0, 0.0]);
        let s = env.step(&JointAction::Discrete(vec![4]), &mut rng).unwrap();
        assert_eq!(&s.obs.data()[..2], &[0.5, 0.0]);
    }
}

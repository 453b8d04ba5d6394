//! Sequential greedy improvement: each agent in turn picks the action with
//! the largest local advantage given the earlier choices. The search looks
//! at `Σ|A^i|` candidates instead of `Π|A^i|` joint actions and never
//! yields a negative joint advantage.

use mat_core::envs::make_tabular_random;
use mat_core::oracle::{exact_policy_eval, sequential_greedy_improvement, Policy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mat_core::Result<()> {
    let game = make_tabular_random(4, 3, 3, 0.9, 5)?;
    let policy = Policy::random_product(&game, &mut ChaCha8Rng::seed_from_u64(1));
    let values = exact_policy_eval(&game, &policy)?;
    for s in 0..game.n_states() {
        let trace = sequential_greedy_improvement(&game, &policy, &values, s, &[3, 1, 0, 2])?;
        let best = (0..game.n_joint())
            .map(|j| values.q[s][j] - values.v[s])
            .fold(f64::NEG_INFINITY, f64::max);
        println!(
            "state {s}: greedy {:?} advantage {:+.4} (best joint {:+.4}); local {:+.4?}; examined {} of {} joint actions",
            trace.actions,
            trace.joint_advantage,
            best,
            trace.local_advantages,
            trace.actions_examined,
            trace.joint_actions
        );
    }
    Ok(())
}

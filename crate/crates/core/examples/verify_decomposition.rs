//! Walks through the multi-agent advantage decomposition on one random
//! tabular game, then runs the randomized verification suite.
//!
//! Usage: `verify_decomposition [games]`

use mat_core::envs::make_tabular_random;
use mat_core::oracle::{
    exact_policy_eval, multi_agent_advantage, verification_suite, Policy, DECOMPOSITION_TOLERANCE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mat_core::Result<()> {
    let games: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);

    let game = make_tabular_random(3, 4, 3, 0.9, 42)?;
    let policy = Policy::random_product(&game, &mut ChaCha8Rng::seed_from_u64(7));
    let values = exact_policy_eval(&game, &policy)?;
    println!("3 agents, 4 states, 3 actions each; V = {:.4?}", values.v);

    let (s, actions, order) = (2, [0, 2, 1], [1, 2, 0]);
    let joint = multi_agent_advantage(&game, &policy, &values, s, &[], &[], &[0, 1, 2], &actions)?;
    println!("state {s}, joint action {actions:?}: joint advantage {joint:+.6}");
    let mut total = 0.0;
    for m in 0..order.len() {
        let prior = &order[..m];
        let prior_actions: Vec<usize> = prior.iter().map(|&i| actions[i]).collect();
        let agent = order[m];
        let local = multi_agent_advantage(&game, &policy, &values, s, prior, &prior_actions, &[agent], &[actions[agent]])?;
        total += local;
        println!("  agent {agent} after {prior:?}: local advantage {local:+.6}, running sum {total:+.6}");
    }
    println!("  |joint - sum| = {:.2e}", (joint - total).abs());

    let report = verification_suite(0, games, false)?;
    print!("{report}");
    println!(
        "suite {} (tolerance {DECOMPOSITION_TOLERANCE:e})",
        if report.passed(DECOMPOSITION_TOLERANCE) { "passed" } else { "FAILED" }
    );
    Ok(())
}

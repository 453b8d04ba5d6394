//! Trains the autoregressive model on a two-agent coordination game and
//! reports greedy evaluation returns as training progresses.

use mat_core::envs::{CoordMatrixGame, Environment};
use mat_core::model::{ActMode, MatModel, ModelSpec, Variant};
use mat_core::training::{evaluate_policy, stream_rng, TrainConfig, Trainer};
use mat_core::transformer::Activation;

fn main() -> mat_core::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let game = CoordMatrixGame::new(2, 3)?;
    let optimal = game.optimal_return().expect("enumerable");
    let spec = ModelSpec {
        n_agents: 2,
        obs_dim: game.obs_dim(),
        action_space: game.action_space(),
        d_model: 64,
        n_heads: 1,
        n_blocks: 1,
        activation: Activation::Gelu,
        variant: Variant::Mat,
    };
    let model = MatModel::new(spec, &mut stream_rng(seed, 0))?;
    let config = TrainConfig {
        rollout_len: 4,
        n_envs: 8,
        ..TrainConfig::default()
    };
    let envs = (0..config.n_envs)
        .map(|_| Box::new(game.clone()) as Box<dyn Environment>)
        .collect();
    let mut trainer = Trainer::new(model, envs, config, seed)?;
    let mut eval_env = game.clone();
    let start = std::time::Instant::now();
    for it in 1..=300 {
        let m = trainer.train_iteration()?;
        if it % 20 == 0 {
            let report = evaluate_policy(&trainer.model, &mut eval_env, 10, ActMode::Greedy, &mut stream_rng(seed, 99))?;
            println!(
                "iter {it:4}  sampled return {:+.3}  greedy {:+.3}  entropy {:.3}  {:.1}s",
                m.mean_return,
                report.mean,
                m.entropy,
                start.elapsed().as_secs_f64()
            );
            if report.mean >= 0.95 * optimal {
                println!("reached {:.0}% of the optimal return {optimal}", 100.0 * report.mean / optimal);
                break;
            }
        }
    }
    Ok(())
}

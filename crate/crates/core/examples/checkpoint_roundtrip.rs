//! Trains a few iterations through the run configuration API, saves a
//! checkpoint, restores it and checks that greedy evaluation is unchanged
//! and that resumed training continues exactly where it stopped.

use mat_core::checkpoint::Checkpoint;
use mat_core::cli::{new_trainer, restore_trainer};
use mat_core::config::MatConfig;
use mat_core::model::ActMode;
use mat_core::training::{evaluate_policy, stream_rng};

const CONFIG: &str = r#"
seed = 3
[env]
name = "coord"
n_agents = 2
actions = 3
[train]
rollout_len = 4
n_envs = 4
"#;

fn main() -> mat_core::Result<()> {
    let config = MatConfig::parse(CONFIG)?;
    let mut trainer = new_trainer(&config)?;
    for _ in 0..5 {
        trainer.train_iteration()?;
    }
    let dir = std::env::temp_dir().join(format!("mat-checkpoint-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("ckpt.bin");
    Checkpoint::from_trainer(&trainer, &config.to_toml()?).save(&path)?;
    println!("saved {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let ckpt = Checkpoint::load(&path)?;
    let mut restored = restore_trainer(&config, &ckpt)?;
    let play = |model: &mat_core::model::MatModel| -> mat_core::Result<Vec<f64>> {
        let mut env = config.build_env()?;
        Ok(evaluate_policy(model, env.as_mut(), 10, ActMode::Greedy, &mut stream_rng(0, 7))?.returns)
    };
    println!("greedy returns before save: {:?}", play(&trainer.model)?);
    println!("greedy returns after load:  {:?}", play(&restored.model)?);

    let a = trainer.train_iteration()?;
    let b = restored.train_iteration()?;
    println!(
        "next iteration, original vs restored: encoder loss {:.6} / {:.6}, decoder loss {:.6} / {:.6}",
        a.encoder_loss, b.encoder_loss, a.decoder_loss, b.decoder_loss
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

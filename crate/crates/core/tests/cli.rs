use std::fs;
use std::path::{Path, PathBuf};

use mat_core::checkpoint::Checkpoint;
use mat_core::cli::{
    cmd_eval, cmd_inspect, cmd_train, cmd_verify, exit_code, model_from_checkpoint, restore_trainer, run, EvalArgs,
    TrainArgs, VerifyArgs, EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, EXIT_VERIFY, METRICS_FILE,
};
use mat_core::config::{EvalMode, MatConfig};
use mat_core::model::ActMode;
use mat_core::training::{evaluate_policy, stream_rng};
use mat_core::Error;
use tempfile::TempDir;

const COORD: &str = r#"
seed = 5
iterations = 3

[env]
name = "coord"
n_agents = 2
actions = 3

[model]
d_model = 16

[train]
rollout_len = 2
n_envs = 4
ppo_epochs = 2
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn train(dir: &Path, text: &str, out: &str, set: &[&str]) -> mat_core::cli::TrainSummary {
    cmd_train(&TrainArgs {
        config: write_config(dir, text),
        set: set.iter().map(|s| s.to_string()).collect(),
        seed: None,
        out: Some(dir.join(out)),
        quiet: true,
    })
    .unwrap()
}

fn eval_args(checkpoint: &Path) -> EvalArgs {
    EvalArgs {
        checkpoint: checkpoint.to_path_buf(),
        config: None,
        set: Vec::new(),
        episodes: Some(5),
        mode: Some(EvalMode::Greedy),
        seed: 3,
    }
}

/// Metric columns of a CSV file with the wall-clock column removed.
fn metric_columns(path: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let headers = reader.headers().unwrap().clone();
    let wall = headers.iter().position(|h| h == "wall_seconds").unwrap();
    reader
        .records()
        .map(|r| {
            r.unwrap()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != wall)
                .map(|(_, f)| f.to_string())
                .collect()
        })
        .collect()
}

#[test]
fn smoke_run_writes_three_rows_and_one_checkpoint() {
    let dir = TempDir::new().unwrap();
    let summary = train(dir.path(), COORD, "run", &[]);
    assert_eq!(summary.metrics.len(), 3);
    assert_eq!(metric_columns(&summary.out_dir.join(METRICS_FILE)).len(), 3);
    let ckpts: Vec<_> = fs::read_dir(summary.out_dir.join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
    assert_eq!(summary.checkpoints.len(), 1);
    assert!(summary.checkpoints[0].ends_with("ckpt_000003.bin"));
    let stored = fs::read_to_string(summary.out_dir.join("config.toml")).unwrap();
    let mut expected = MatConfig::parse(COORD).unwrap();
    expected.out_dir = summary.out_dir.display().to_string();
    assert_eq!(MatConfig::parse(&stored).unwrap(), expected);
}

#[test]
fn checkpoint_cadence_and_retention() {
    let dir = TempDir::new().unwrap();
    let summary = train(
        dir.path(),
        COORD,
        "run",
        &["iterations=7", "checkpoint.interval=2", "checkpoint.keep=2"],
    );
    let names: Vec<String> = summary
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["ckpt_000006.bin", "ckpt_000007.bin"]);
    assert_eq!(fs::read_dir(summary.out_dir.join("checkpoints")).unwrap().count(), 2);
}

#[test]
fn binary_entry_point_trains_and_reports_exit_codes() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), COORD);
    let out = dir.path().join("bin-run");
    let code = run([
        "mat",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(out.join(METRICS_FILE).exists());
    assert_eq!(run(["mat", "train"]), EXIT_INVALID);
    assert_eq!(run(["mat", "frobnicate"]), EXIT_INVALID);
}

#[test]
fn missing_env_section_is_named() {
    let text = COORD.replace("[env]\nname = \"coord\"\nn_agents = 2\nactions = 3\n", "");
    match MatConfig::parse(&text) {
        Err(Error::Config(v)) => assert!(v.iter().any(|m| m.contains("env")), "{v:?}"),
        other => panic!("expected a configuration error, got {other:?}"),
    }
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &text);
    assert_eq!(run(["mat", "train", "--config", config.to_str().unwrap()]), EXIT_INVALID);
}

#[test]
fn invalid_values_are_all_listed() {
    let err = MatConfig::parse_with_overrides(
        COORD,
        &["train.clip=1.5".into(), "model.n_heads=3".into(), "train.gamma=1.0".into()],
    )
    .unwrap_err();
    let Error::Config(v) = err else { panic!("expected a configuration error") };
    for field in ["train.clip", "model.n_heads", "train.gamma"] {
        assert!(v.iter().any(|m| m.starts_with(field)), "{field} missing from {v:?}");
    }
    let typo = MatConfig::parse_with_overrides(COORD, &["train.lr_actr=1e-3".into()]).unwrap_err();
    assert!(typo.to_string().contains("lr_actr"), "{typo}");
    let zero = MatConfig::parse_with_overrides(COORD, &["train.lr_actor=0".into()]).unwrap_err();
    assert!(zero.to_string().contains("train.lr_actor"), "{zero}");
}

#[test]
fn config_survives_a_serialisation_round_trip() {
    let config = MatConfig::parse_with_overrides(COORD, &["variant=mat-dec".into(), "train.lr_actor=1e-3".into()]).unwrap();
    assert_eq!(MatConfig::parse(&config.to_toml().unwrap()).unwrap(), config);
}

#[test]
fn equal_seeds_give_identical_metric_columns() {
    let dir = TempDir::new().unwrap();
    let a = train(dir.path(), COORD, "a", &[]);
    let b = train(dir.path(), COORD, "b", &[]);
    let c = train(dir.path(), COORD, "c", &["seed=6"]);
    let cols = |s: &mat_core::cli::TrainSummary| metric_columns(&s.out_dir.join(METRICS_FILE));
    assert_eq!(cols(&a), cols(&b));
    assert_ne!(cols(&a), cols(&c));
    // The checkpoints differ only in the stored output directory.
    let ckpt = |s: &mat_core::cli::TrainSummary| {
        let mut c = Checkpoint::load(&s.checkpoints[0]).unwrap();
        c.config.clear();
        c.to_bytes()
    };
    assert_eq!(ckpt(&a), ckpt(&b));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = TempDir::new().unwrap();
    let summary = train(dir.path(), COORD, "run", &[]);
    let path = &summary.checkpoints[0];
    let bytes = fs::read(path).unwrap();
    let ckpt = Checkpoint::load(path).unwrap();
    assert_eq!(ckpt.to_bytes(), bytes);
    let again = dir.path().join("again.bin");
    ckpt.save(&again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), bytes);

    // Greedy evaluation of the in-memory trainer equals evaluation of the
    // restored checkpoint.
    let config = MatConfig::parse(&ckpt.config).unwrap();
    let trainer = restore_trainer(&config, &ckpt).unwrap();
    let loaded = model_from_checkpoint(&config, &ckpt).unwrap();
    assert_eq!(loaded.params().tensors(), trainer.model.params().tensors());
    let play = |model: &mat_core::model::MatModel| {
        let mut env = config.build_env().unwrap();
        evaluate_policy(model, env.as_mut(), 20, ActMode::Greedy, &mut stream_rng(1, 7)).unwrap()
    };
    assert_eq!(play(&loaded), play(&trainer.model));
    let (first, _) = cmd_eval(&eval_args(path)).unwrap();
    let (second, _) = cmd_eval(&eval_args(&again)).unwrap();
    assert_eq!(first, second);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    // The coordination game ends every episode after one step, so restarting
    // the environments on resume loses nothing.
    let dir = TempDir::new().unwrap();
    let full = train(dir.path(), COORD, "full", &["iterations=4"]);
    let half = train(dir.path(), COORD, "half", &["iterations=2"]);
    let ckpt = Checkpoint::load(&half.checkpoints[0]).unwrap();
    let config = MatConfig::parse(&ckpt.config).unwrap();
    let mut trainer = restore_trainer(&config, &ckpt).unwrap();
    for expected in &full.metrics[2..] {
        let got = trainer.train_iteration().unwrap();
        assert_eq!(got.iteration, expected.iteration);
        assert_eq!(got.encoder_loss, expected.encoder_loss);
        assert_eq!(got.decoder_loss, expected.decoder_loss);
    }
    let final_ckpt = Checkpoint::load(&full.checkpoints[0]).unwrap();
    let from_full = restore_trainer(&config, &final_ckpt).unwrap().model;
    assert_eq!(from_full.params().tensors(), trainer.model.params().tensors());
}

#[test]
fn zero_episodes_is_rejected() {
    let dir = TempDir::new().unwrap();
    let summary = train(dir.path(), COORD, "run", &[]);
    let args = EvalArgs { episodes: Some(0), ..eval_args(&summary.checkpoints[0]) };
    let err = cmd_eval(&args).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    assert_eq!(exit_code(&err), EXIT_INVALID);
}

#[test]
fn architecture_mismatch_names_the_tensor() {
    let dir = TempDir::new().unwrap();
    let summary = train(dir.path(), COORD, "run", &[]);
    let args = EvalArgs { set: vec!["model.d_model=8".into()], ..eval_args(&summary.checkpoints[0]) };
    let err = cmd_eval(&args).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("architecture mismatch at tensor `encoder."), "{text}");
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = TempDir::new().unwrap();
    let summary = train(dir.path(), COORD, "run", &[]);
    let bytes = fs::read(&summary.checkpoints[0]).unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
}

#[test]
fn verify_passes_and_negative_control_fails() {
    let dir = TempDir::new().unwrap();
    let args = VerifyArgs { seed: 1, trials: 40, corrupt_rhs: false, out: Some(dir.path().to_path_buf()) };
    let report = cmd_verify(&args).unwrap();
    assert_eq!(report.trials, 40);
    let text = fs::read_to_string(dir.path().join("verify_report.txt")).unwrap();
    assert!(text.contains("trials: 40") && text.contains("max discrepancy"), "{text}");
    assert!(text.contains("permutation [2, 1, 0]"), "{text}");
    assert_eq!(run(["mat", "verify", "--trials", "40"]), EXIT_OK);
    assert_eq!(run(["mat", "verify", "--trials", "40", "--corrupt-rhs"]), EXIT_VERIFY);
    assert!(cmd_verify(&VerifyArgs { trials: 0, ..args }).is_err());
}

#[test]
fn inspect_lists_progress_and_tensors() {
    let dir = TempDir::new().unwrap();
    let summary = train(dir.path(), COORD, "run", &[]);
    let text = cmd_inspect(&summary.checkpoints[0]).unwrap();
    assert!(text.contains("iteration 3"), "{text}");
    assert!(text.contains("encoder.embed.weight"), "{text}");
    assert!(text.contains("name = \"coord\""), "{text}");
    let code = run(["mat", "inspect-checkpoint", summary.checkpoints[0].to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(run(["mat", "inspect-checkpoint", "/nonexistent/ckpt.bin"]), EXIT_INVALID);
}

#[test]
fn numeric_errors_map_to_their_own_exit_code() {
    let err = Error::Numeric("loss diverged".into());
    assert_eq!(exit_code(&err), EXIT_NUMERIC);
    assert_eq!(exit_code(&Error::Config(vec![])), EXIT_INVALID);
}

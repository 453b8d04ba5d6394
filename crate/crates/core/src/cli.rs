//! Command implementations behind the `mat` binary.
//!
//! Exit codes: 0 success, 1 invalid input (configuration, files,
//! contracts), 2 numeric failure during training or evaluation, 3 failed
//! verification.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{EvalMode, MatConfig};
use crate::error::{Error, Result};
use crate::model::MatModel;
use crate::oracle::{verification_suite, DecompositionReport, DECOMPOSITION_TOLERANCE};
use crate::training::{evaluate_policy, stream_rng, EvalReport, Metrics, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Stream used to initialise model parameters.
const INIT_STREAM: u64 = 0;
/// Stream used by evaluation episodes.
const EVAL_STREAM: u64 = 7;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Parser)]
#[command(name = "mat", version, about = "Train, evaluate and verify multi-agent transformer policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy; writes metrics.csv, config.toml and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Check the advantage decomposition on random tabular games.
    Verify(VerifyArgs),
    /// Print the contents of a checkpoint.
    InspectCheckpoint {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a configuration value, e.g. `--set train.lr_actor=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Suppress the per-iteration summary lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Configuration to build the model from; defaults to the one stored in
    /// the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<EvalMode>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random games.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Negative control: corrupt the right-hand side so verification fails.
    #[arg(long)]
    pub corrupt_rhs: bool,
    /// Also write the report to `DIR/verify_report.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_INVALID,
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(&a).map(|s| {
            println!(
                "trained {} iterations; metrics in {}",
                s.metrics.len(),
                s.out_dir.join(METRICS_FILE).display()
            );
            EXIT_OK
        }),
        Command::Eval(a) => cmd_eval(&a).map(|(r, mode)| {
            println!(
                "{} return over {} {mode:?} episodes: {:.4} ± {:.4}",
                if r.returns.len() == 1 { "single" } else { "mean" },
                r.returns.len(),
                r.mean,
                r.std
            );
            EXIT_OK
        }),
        Command::Verify(a) => cmd_verify(&a).map(|report| {
            print!("{report}");
            if report.passed(DECOMPOSITION_TOLERANCE) {
                println!("verification passed (tolerance {DECOMPOSITION_TOLERANCE:e})");
                EXIT_OK
            } else {
                eprintln!(
                    "verification FAILED: max discrepancy {:.3e} exceeds {DECOMPOSITION_TOLERANCE:e}; \
                     rerun with --seed {} --trials {} to reproduce",
                    report.max_discrepancy, a.seed, a.trials
                );
                EXIT_VERIFY
            }
        }),
        Command::InspectCheckpoint { path } => cmd_inspect(&path).map(|text| {
            print!("{text}");
            EXIT_OK
        }),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

/// Reads a configuration file and applies overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<MatConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
    MatConfig::parse_with_overrides(&text, overrides)
}

/// Fresh model and trainer for a configuration.
pub fn new_trainer(config: &MatConfig) -> Result<Trainer> {
    let model = MatModel::new(config.model_spec()?, &mut stream_rng(config.seed, INIT_STREAM))?;
    let envs = (0..config.train.n_envs).map(|_| config.build_env()).collect::<Result<Vec<_>>>()?;
    Trainer::new(model, envs, config.train.clone(), config.seed)
}

/// Model built from `config` with the parameters of `ckpt`.
pub fn model_from_checkpoint(config: &MatConfig, ckpt: &Checkpoint) -> Result<MatModel> {
    let mut model = MatModel::new(config.model_spec()?, &mut stream_rng(config.seed, INIT_STREAM))?;
    ckpt.load_into(&mut model)?;
    Ok(model)
}

/// Trainer continuing from a checkpoint. Environments begin new episodes.
pub fn restore_trainer(config: &MatConfig, ckpt: &Checkpoint) -> Result<Trainer> {
    let model = model_from_checkpoint(config, ckpt)?;
    let optim = ckpt.optim_state(&model)?;
    let (first, rest) = ckpt
        .rngs
        .split_first()
        .ok_or_else(|| Error::Checkpoint("no rng state stored".into()))?;
    let envs = (0..config.train.n_envs).map(|_| config.build_env()).collect::<Result<Vec<_>>>()?;
    let mut t = Trainer::resume(
        model,
        optim,
        envs,
        config.train.clone(),
        first.restore(),
        rest.iter().map(|r| r.restore()).collect(),
    )?;
    t.iteration = ckpt.iteration;
    t.env_steps = ckpt.env_steps;
    t.epochs_done = ckpt.epochs_done;
    t.last_mean_return = ckpt.last_mean_return;
    Ok(t)
}

pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub metrics: Vec<Metrics>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("ckpt_{iteration:06}.bin"))
}

/// Runs the configured number of iterations, logging every iteration to
/// CSV and writing checkpoints at the configured cadence plus a final one.
/// On a numeric failure training stops and checkpoints already on disk are
/// kept.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut config = load_config(&args.config, &overrides)?;
    if let Some(out) = &args.out {
        config.out_dir = out.display().to_string();
    }
    let out_dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR))?;
    let config_text = config.to_toml()?;
    fs::write(out_dir.join(CONFIG_FILE), &config_text)?;

    let mut trainer = new_trainer(&config)?;
    let mut eval_env = config.build_env()?;
    let mut eval_rng = stream_rng(config.seed, EVAL_STREAM);
    let mut writer = csv::Writer::from_path(out_dir.join(METRICS_FILE)).map_err(csv_error)?;
    let mut kept: VecDeque<PathBuf> = VecDeque::new();
    let mut all_written = Vec::new();
    let mut metrics = Vec::with_capacity(config.iterations);

    let mut save = |trainer: &Trainer, kept: &mut VecDeque<PathBuf>| -> Result<()> {
        let path = checkpoint_path(&out_dir, trainer.iteration);
        Checkpoint::from_trainer(trainer, &config_text).save(&path)?;
        all_written.push(path.clone());
        kept.push_back(path);
        while kept.len() > config.checkpoint.keep {
            if let Some(old) = kept.pop_front() {
                fs::remove_file(old)?;
            }
        }
        Ok(())
    };

    for _ in 0..config.iterations {
        let m = trainer.train_iteration()?;
        if !m.all_finite() {
            return Err(Error::numeric(format!("non-finite metrics at iteration {}", m.iteration)));
        }
        writer.serialize(&m).map_err(csv_error)?;
        writer.flush()?;
        if !args.quiet {
            println!(
                "iter {:>5}  steps {:>8}  return {:>9.4}  enc {:>9.4}  dec {:>9.4}  ent {:.4}  clip {:.3}  ev {:>7.3}",
                m.iteration,
                m.env_steps,
                m.mean_return,
                m.encoder_loss,
                m.decoder_loss,
                m.entropy,
                m.clip_fraction,
                m.explained_variance
            );
        }
        if config.eval.interval > 0 && m.iteration % config.eval.interval as u64 == 0 {
            let r = evaluate_policy(
                &trainer.model,
                eval_env.as_mut(),
                config.eval.episodes,
                config.eval.mode.into(),
                &mut eval_rng,
            )?;
            if !args.quiet {
                println!("eval  {:>5}  {:?} return {:.4} ± {:.4}", m.iteration, config.eval.mode, r.mean, r.std);
            }
        }
        let at_cadence = m.iteration % config.checkpoint.interval as u64 == 0;
        metrics.push(m);
        if at_cadence {
            save(&trainer, &mut kept)?;
        }
    }
    if kept.back() != Some(&checkpoint_path(&out_dir, trainer.iteration)) {
        save(&trainer, &mut kept)?;
    }
    Ok(TrainSummary {
        out_dir,
        metrics,
        checkpoints: kept.into_iter().collect(),
    })
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Loads a checkpoint into the architecture given by `--config` (or the
/// stored configuration) and plays evaluation episodes.
pub fn cmd_eval(args: &EvalArgs) -> Result<(EvalReport, EvalMode)> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let config = match &args.config {
        Some(path) => load_config(path, &args.set)?,
        None => MatConfig::parse_with_overrides(&ckpt.config, &args.set)?,
    };
    let model = model_from_checkpoint(&config, &ckpt)?;
    let episodes = args.episodes.unwrap_or(config.eval.episodes);
    let mode = args.mode.unwrap_or(config.eval.mode);
    let mut env = config.build_env()?;
    let report = evaluate_policy(&model, env.as_mut(), episodes, mode.into(), &mut stream_rng(args.seed, EVAL_STREAM))?;
    Ok((report, mode))
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<DecompositionReport> {
    if args.trials == 0 {
        return Err(Error::contract("verification needs at least one trial"));
    }
    let report = verification_suite(args.seed, args.trials, args.corrupt_rhs)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("verify_report.txt"), report.to_string())?;
    }
    Ok(report)
}

pub fn cmd_inspect(path: &Path) -> Result<String> {
    use std::fmt::Write;
    let c = Checkpoint::load(path)?;
    let mut s = String::new();
    let numel = |list: &crate::checkpoint::NamedTensors| list.iter().map(|(_, t)| t.len()).sum::<usize>();
    let _ = writeln!(s, "checkpoint {} (format version {})", path.display(), crate::checkpoint::VERSION);
    let _ = writeln!(s, "iteration {}  env_steps {}  ppo epochs {}", c.iteration, c.env_steps, c.epochs_done);
    let _ = writeln!(s, "last mean return {}", c.last_mean_return);
    let _ = writeln!(s, "optimizer step {}  rng streams {}", c.adam_step, c.rngs.len());
    let _ = writeln!(
        s,
        "parameters: {} tensors, {} values; target: {} tensors, {} values",
        c.params.len(),
        numel(&c.params),
        c.target.len(),
        numel(&c.target)
    );
    for (name, t) in &c.params {
        let _ = writeln!(s, "  {name:<40} {:?}", t.shape());
    }
    let _ = writeln!(s, "config:");
    for line in c.config.lines() {
        let _ = writeln!(s, "  {line}");
    }
    Ok(s)
}

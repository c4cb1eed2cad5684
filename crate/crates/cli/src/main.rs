//! `ntnnr`: train, evaluate, sweep and inspect attention-communication policies.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ntnnr_core::config::{EnvKind, Regularizer, RunConfig, TrainConfig};
use ntnnr_core::policy::ScoringVariant;
use ntnnr_core::run::{self, RunError};
use ntnnr_core::selftest;

#[derive(Parser)]
#[command(name = "ntnnr", version, about = "Tensor-nuclear-norm regularized attention communication for multi-agent RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics, checkpoints and a config snapshot.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Build the network from this config instead of the stored one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-step replay records (JSON lines) here.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Print the result as one JSON object.
        #[arg(long)]
        json: bool,
    },
    /// Train one run per (beta1, beta2) pair and write a success-rate grid.
    SweepBeta {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated layer-1 scaling values (grid rows).
        #[arg(long, value_delimiter = ',', required = true)]
        beta1: Vec<f64>,
        /// Comma-separated layer-2 scaling values (grid columns).
        #[arg(long, value_delimiter = ',', required = true)]
        beta2: Vec<f64>,
    },
    /// Write attention tensors of greedy episodes as JSON lines.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numerical oracle and invariant checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat TOML config; without it the `--preset` values are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base values when no config file is given.
    #[arg(long, default_value = "desk_pp")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sequential workers and zero wall-clock column for byte-identical output.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    regularizer: Option<Regularizer>,
    #[arg(long)]
    scoring: Option<ScoringVariant>,
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, RunError> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::with_train(
                TrainConfig::preset(&self.preset)
                    .ok_or_else(|| RunError::Usage(format!("unknown preset `{}`", self.preset)))?,
            ),
        };
        let t = &mut run.train;
        if let Some(s) = self.seed {
            t.seed = s;
        }
        if self.deterministic {
            t.deterministic = true;
        }
        if let Some(r) = self.regularizer {
            t.regularizer = r;
        }
        if let Some(s) = self.scoring {
            t.scoring = s;
        }
        if let Some(e) = self.env {
            t.env = e;
        }
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(out) = &self.out {
            run.out_dir = out.display().to_string();
        }
        run.train.validate()?;
        Ok(run)
    }
}

fn read_config(path: Option<&Path>) -> Result<Option<TrainConfig>, RunError> {
    Ok(match path {
        Some(p) => Some(RunConfig::load(p)?.train),
        None => None,
    })
}

fn execute(cli: Cli) -> Result<ExitCode, RunError> {
    match cli.command {
        Command::Train { run } => {
            let run = run.resolve()?;
            let outcome = run::train(&run, |m| {
                eprintln!(
                    "epoch {:>4}  reward {:>9.4}  success {:.3}  ntnn {:.4} / {:.4}",
                    m.epoch, m.mean_reward, m.success_rate, m.ntnn[0], m.ntnn[1]
                );
            })?;
            println!("wrote {}", outcome.out_dir.display());
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            config,
            replay,
            json,
        } => {
            if episodes == 0 {
                return Err(RunError::Usage("--episodes must be at least 1".into()));
            }
            let override_config = read_config(config.as_deref())?;
            let (config, params) = run::load_checkpoint(&checkpoint, override_config.as_ref())?;
            let r = run::eval(&config, &params, episodes, seed, replay.as_deref())?;
            if json {
                let v = serde_json::json!({
                    "episodes": episodes,
                    "seed": seed,
                    "mean_reward": r.mean_reward,
                    "success_rate": r.success_rate,
                });
                println!("{v}");
            } else {
                println!("episodes {episodes}");
                println!("mean_reward {}", r.mean_reward);
                println!("success_rate {}", r.success_rate);
            }
        }
        Command::SweepBeta { run, beta1, beta2 } => {
            let base = run.resolve()?;
            let grid = run::sweep_beta(&base, &beta1, &beta2, |b1, b2, r| match r {
                Ok(v) => eprintln!("beta1={b1} beta2={b2}: final success {v:.3}"),
                Err(e) => eprintln!("beta1={b1} beta2={b2}: failed: {e}"),
            })?;
            print!("{}", grid.to_csv());
        }
        Command::ExportAttention {
            checkpoint,
            episodes,
            seed,
            out,
        } => {
            let (config, params) = run::load_checkpoint(&checkpoint, None)?;
            let n = run::export_attention(&config, &params, episodes, seed, &out)?;
            println!("wrote {n} records to {}", out.display());
        }
        Command::Selftest { seed } => {
            let checks = selftest::run_all(seed);
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", checks.len());
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

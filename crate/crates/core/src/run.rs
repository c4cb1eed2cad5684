//! Run orchestration shared by the command-line tool and the acceptance suite:
//! training with on-disk artifacts, greedy evaluation, beta sweeps and
//! attention export.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig, TrainConfig};
use crate::envs::EnvError;
use crate::metrics::{attention_records, replay, write_jsonl, MetricsWriter};
use crate::policy::PolicyParams;
use crate::training::{evaluate, EpochMetrics, EvalReport, TrainError, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const UPDATES_FILE: &str = "updates.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";
pub const ATTENTION_FILE: &str = "attention.jsonl";
pub const REPLAY_FILE: &str = "replay.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Per-update log of the adaptive weight inputs: the policy-gradient magnitude
/// that scales the weights, each layer's regularizer loss and the resulting weight.
pub const UPDATES_HEADER: &str = "epoch,update,loss_rl_abs,loss_ntnnr_l1,loss_ntnnr_l2,lambda_layer1,lambda_layer2,grad_norm";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl RunError {
    /// 2 for configuration and usage problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) | Self::Train(TrainError::Config(_)) => 2,
            Self::Checkpoint(CheckpointError::Shape(_) | CheckpointError::Config(_)) => 2,
            Self::Train(TrainError::Numerical { .. } | TrainError::Adjacency(_)) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct UpdateLog {
    w: BufWriter<File>,
}

impl UpdateLog {
    fn create(path: &Path) -> std::io::Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{UPDATES_HEADER}")?;
        w.flush()?;
        Ok(Self { w })
    }

    fn write(&mut self, m: &EpochMetrics) -> std::io::Result<()> {
        for (i, u) in m.updates.iter().enumerate() {
            writeln!(
                self.w,
                "{},{},{},{},{},{},{},{}",
                m.epoch,
                i + 1,
                u.lambda_numerator,
                u.summary.loss_reg[0],
                u.summary.loss_reg[1],
                u.lambda[0],
                u.lambda[1],
                u.grad_norm
            )?;
        }
        self.w.flush()
    }
}

/// Everything a finished training run produced.
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub params: PolicyParams,
    pub out_dir: PathBuf,
}

/// Trains to the configured epoch count inside `run.out_dir`, writing the
/// resolved config, the metrics and update logs (flushed every epoch), periodic
/// and final checkpoints, and the optional attention and replay exports.
pub fn train(run: &RunConfig, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome, RunError> {
    run.train.validate()?;
    let out = PathBuf::from(&run.out_dir);
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let snapshot = out.join(CONFIG_SNAPSHOT);
    std::fs::write(&snapshot, run.to_toml_string()).map_err(io_err(&snapshot))?;
    let csv = out.join(METRICS_FILE);
    let mut writer = MetricsWriter::create(&csv).map_err(io_err(&csv))?;
    let upd = out.join(UPDATES_FILE);
    let mut update_log = UpdateLog::create(&upd).map_err(io_err(&upd))?;

    let mut trainer = Trainer::new(run.train.clone())?;
    let mut metrics = Vec::with_capacity(run.train.epochs);
    for _ in 0..run.train.epochs {
        let m = trainer.train_epoch()?;
        writer.write(&m).map_err(io_err(&csv))?;
        update_log.write(&m).map_err(io_err(&upd))?;
        if run.checkpoint_interval > 0 && m.epoch % run.checkpoint_interval == 0 {
            let dir = out.join("checkpoints");
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            checkpoint::save(&dir.join(format!("epoch_{:05}.ckpt", m.epoch)), &run.train, trainer.params())?;
        }
        on_epoch(&m);
        metrics.push(m);
    }
    checkpoint::save(&out.join(FINAL_CHECKPOINT), &run.train, trainer.params())?;
    let params = trainer.params().clone();
    let env_config = run.train.env_config();
    if run.export_attention {
        export_attention_with(&params, &env_config, run.export_episodes, run.train.seed, &out.join(ATTENTION_FILE))?;
    }
    if run.replay {
        let path = out.join(REPLAY_FILE);
        let (_, records) = replay(&params, &env_config, run.eval_episodes, run.train.seed)?;
        write_jsonl(&path, &records).map_err(io_err(&path))?;
    }
    Ok(TrainOutcome {
        metrics,
        params,
        out_dir: out,
    })
}

/// Loads a checkpoint. With `config`, the network is built from that
/// configuration instead of the stored one and must match the stored shapes.
pub fn load_checkpoint(path: &Path, config: Option<&TrainConfig>) -> Result<(TrainConfig, PolicyParams), RunError> {
    Ok(checkpoint::load(path)?.into_params(config)?)
}

/// Greedy evaluation; writes a replay dump to `replay_path` when given.
pub fn eval(
    config: &TrainConfig,
    params: &PolicyParams,
    episodes: usize,
    seed: u64,
    replay_path: Option<&Path>,
) -> Result<EvalReport, RunError> {
    if episodes == 0 {
        return Err(RunError::Usage("episodes must be at least 1".into()));
    }
    let env_config = config.env_config();
    let report = evaluate(params, &env_config, episodes, seed)?;
    if let Some(path) = replay_path {
        let (_, records) = replay(params, &env_config, episodes, seed)?;
        write_jsonl(path, &records).map_err(io_err(path))?;
    }
    Ok(report)
}

fn export_attention_with(
    params: &PolicyParams,
    env_config: &crate::envs::EnvConfig,
    episodes: usize,
    seed: u64,
    out: &Path,
) -> Result<usize, RunError> {
    let report = evaluate(params, env_config, episodes, seed)?;
    let records = attention_records(&report.episodes);
    write_jsonl(out, &records).map_err(io_err(out))?;
    Ok(records.len())
}

/// Writes the attention tensors of `episodes` greedy episodes as JSON lines and
/// returns the record count.
pub fn export_attention(
    config: &TrainConfig,
    params: &PolicyParams,
    episodes: usize,
    seed: u64,
    out: &Path,
) -> Result<usize, RunError> {
    if episodes == 0 {
        return Err(RunError::Usage("episodes must be at least 1".into()));
    }
    export_attention_with(params, &config.env_config(), episodes, seed, out)
}

/// Final success rate of a run: the mean over the last tenth of its epochs (at
/// least one).
pub fn final_success(metrics: &[EpochMetrics]) -> f64 {
    let n = (metrics.len() / 10).max(1).min(metrics.len());
    if n == 0 {
        return f64::NAN;
    }
    metrics[metrics.len() - n..].iter().map(|m| m.success_rate).sum::<f64>() / n as f64
}

/// Rows follow `beta1`, columns follow `beta2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    /// Final success rate per cell, or the error that stopped the cell.
    pub cells: Vec<Vec<Result<f64, String>>>,
}

impl SweepGrid {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("beta1\\beta2");
        for b in &self.beta2 {
            write!(s, ",{b}").unwrap();
        }
        s.push('\n');
        for (b1, row) in self.beta1.iter().zip(&self.cells) {
            write!(s, "{b1}").unwrap();
            for cell in row {
                match cell {
                    Ok(v) => write!(s, ",{v}").unwrap(),
                    Err(_) => s.push_str(",failed"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// One training run per (beta1, beta2) pair under `base.out_dir/b1_<x>_b2_<y>`.
/// A failing cell is recorded and the sweep moves on. Writes the grid to
/// `sweep.csv` and failure messages to `sweep_errors.txt`.
pub fn sweep_beta(
    base: &RunConfig,
    beta1: &[f64],
    beta2: &[f64],
    mut on_cell: impl FnMut(f64, f64, &Result<f64, String>),
) -> Result<SweepGrid, RunError> {
    if beta1.is_empty() || beta2.is_empty() {
        return Err(RunError::Usage("beta lists must not be empty".into()));
    }
    if let Some(b) = beta1.iter().chain(beta2).find(|b| !(b.is_finite() && **b >= 0.0)) {
        return Err(RunError::Usage(format!("beta {b} must be finite and non-negative")));
    }
    let root = PathBuf::from(&base.out_dir);
    std::fs::create_dir_all(&root).map_err(io_err(&root))?;
    let mut cells = Vec::with_capacity(beta1.len());
    let mut errors = String::new();
    for &b1 in beta1 {
        let mut row = Vec::with_capacity(beta2.len());
        for &b2 in beta2 {
            let mut cell = base.clone();
            cell.train.beta1 = b1;
            cell.train.beta2 = b2;
            cell.out_dir = root.join(format!("b1_{b1}_b2_{b2}")).display().to_string();
            let result = train(&cell, |_| {}).map(|o| final_success(&o.metrics)).map_err(|e| e.to_string());
            if let Err(e) = &result {
                writeln!(errors, "beta1={b1} beta2={b2}: {e}").unwrap();
            }
            on_cell(b1, b2, &result);
            row.push(result);
        }
        cells.push(row);
    }
    let grid = SweepGrid {
        beta1: beta1.to_vec(),
        beta2: beta2.to_vec(),
        cells,
    };
    let path = root.join(SWEEP_FILE);
    std::fs::write(&path, grid.to_csv()).map_err(io_err(&path))?;
    if !errors.is_empty() {
        let path = root.join("sweep_errors.txt");
        std::fs::write(&path, errors).map_err(io_err(&path))?;
    }
    Ok(grid)
}

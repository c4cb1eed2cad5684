//! Per-epoch metrics CSV and JSON-lines exports of attention tensors and replays.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::adjacency::{tube_softmax, AdjacencyTensor};
use crate::envs::{EnvConfig, EnvError, ReplayRecord};
use crate::policy::PolicyParams;
use crate::training::{run_episode, EpochMetrics, Trajectory};

pub const CSV_HEADER: &str = "epoch,env_steps,mean_reward,success_rate,ntnn_layer1,ntnn_layer2,\
lambda_layer1,lambda_layer2,loss_rl,loss_ntnnr_l1,loss_ntnnr_l2,wall_clock_s";

/// Formats one CSV row. Floats use the shortest representation that parses back
/// to the same value.
pub fn csv_row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        m.epoch,
        m.env_steps,
        m.mean_reward,
        m.success_rate,
        m.ntnn[0],
        m.ntnn[1],
        m.lambda[0],
        m.lambda[1],
        m.loss_rl,
        m.loss_ntnnr[0],
        m.loss_ntnnr[1],
        m.wall_clock_s
    )
}

/// Appends rows and flushes after each, so an interrupted run leaves a valid prefix.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    /// Truncates `path` and writes the header.
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{CSV_HEADER}")?;
        file.flush()?;
        Ok(Self { file })
    }

    /// Opens an existing file for appending.
    pub fn append(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            file: OpenOptions::new().append(true).open(path)?,
        })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> std::io::Result<()> {
        writeln!(self.file, "{}", csv_row(m))?;
        self.file.flush()
    }
}

/// A parsed metrics CSV: column names and numeric rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

pub fn read_metrics_csv(path: &Path) -> std::io::Result<MetricsTable> {
    let bad = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or_else(|| bad("empty metrics file".into()))??;
    let columns: Vec<String> = header.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let row = line
            .split(',')
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != columns.len() {
            return Err(bad(format!("row {} has {} fields", i + 1, row.len())));
        }
        rows.push(row);
    }
    Ok(MetricsTable { columns, rows })
}

/// One attention matrix of one head at one step.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionRecord {
    pub episode: usize,
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub n_agents: usize,
    /// Row-major `N x N` softmax attention.
    pub matrix: Vec<f64>,
    /// The same slice after tube normalization across heads; `None` for
    /// single-head layers, where no normalization applies.
    pub tube_matrix: Option<Vec<f64>>,
}

/// Attention records of every step, layer and head of the given trajectories.
pub fn attention_records(trajectories: &[Trajectory]) -> Vec<AttentionRecord> {
    let mut out = Vec::new();
    for (episode, traj) in trajectories.iter().enumerate() {
        for (step, s) in traj.steps.iter().enumerate() {
            for (layer, t) in s.attention.iter().enumerate() {
                let tube: Option<AdjacencyTensor> = (t.n_heads() >= 2).then(|| tube_softmax(t).expect("multi-head tensor"));
                for head in 0..t.n_heads() {
                    let slice = |x: &AdjacencyTensor| x.frontal_slice(head).expect("head index in range").into_vec();
                    out.push(AttentionRecord {
                        episode,
                        step,
                        layer: layer + 1,
                        head,
                        n_agents: t.n_agents(),
                        matrix: slice(t),
                        tube_matrix: tube.as_ref().map(slice),
                    });
                }
            }
        }
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Greedy episodes with per-step replay records.
pub fn replay(
    params: &PolicyParams,
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<ReplayRecord>), EnvError> {
    use rand::{Rng, SeedableRng};
    let mut env = env_config.build()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut trajs = Vec::new();
    let mut records = Vec::new();
    for episode in 0..episodes {
        let s: u64 = rng.random();
        let traj = run_episode(params, env.as_mut(), s, &mut rng, true, false)?.trajectory;
        // Replay the same actions on a second instance to capture state summaries.
        let mut shadow = env_config.build()?;
        shadow.reset(s)?;
        for (step, rec) in traj.steps.iter().enumerate() {
            let state = shadow.summary();
            let next = shadow.step(&rec.actions)?;
            records.push(ReplayRecord {
                episode,
                step,
                state,
                actions: rec.actions.iter().zip(&rec.active).map(|(a, on)| on.then_some(*a)).collect(),
                rewards: next.rewards,
                captures: next.info.captures,
                collisions: next.info.collisions,
            });
        }
        trajs.push(traj);
    }
    Ok((trajs, records))
}

//! Flat TOML run configuration with typed parsing and unknown-key rejection.
//!
//! Every key has a default, so a file only lists what differs from the
//! full-size predator-prey setup. [`TrainConfig`] holds everything that
//! affects learning; [`RunConfig`] adds output and export settings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvConfig, PredatorPreyConfig, TrafficJunctionConfig};
use crate::policy::{Layer2Input, PolicyConfig, ScoringVariant};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {message}")]
    Field { field: &'static str, message: String },
}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    #[default]
    Pp,
    Tj,
}

impl std::str::FromStr for EnvKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pp" => Ok(Self::Pp),
            "tj" => Ok(Self::Tj),
            other => Err(format!("unknown environment `{other}` (expected pp or tj)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    /// Nuclear norm of the attention tensor as produced by the softmax.
    Tnnr,
    /// Nuclear norm after tube normalization across heads.
    #[default]
    Ntnnr,
}

impl std::str::FromStr for Regularizer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "tnnr" => Ok(Self::Tnnr),
            "ntnnr" => Ok(Self::Ntnnr),
            other => Err(format!("unknown regularizer `{other}` (expected none, tnnr or ntnnr)")),
        }
    }
}

/// Which loss magnitude scales the adaptive regularizer weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSource {
    /// The policy-gradient term alone.
    #[default]
    PolicyGradient,
    /// Policy-gradient plus value-regression terms.
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub epochs: usize,
    /// Environment steps gathered per update.
    pub batch_size: usize,
    /// Updates per epoch.
    pub epoch_size: usize,
    pub n_workers: usize,
    /// Run workers sequentially and write zero wall-clock times, so output files
    /// are byte-reproducible.
    pub deterministic: bool,

    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub grad_clip: f64,
    pub gamma: f64,
    pub value_coef: f64,

    pub regularizer: Regularizer,
    /// Per-layer scaling of the adaptive weight; zero disables that layer's term.
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_source: LambdaSource,

    pub scoring: ScoringVariant,
    pub hidden: usize,
    pub head_dim: usize,
    pub heads_l1: usize,
    pub heads_l2: usize,
    pub head_hidden: usize,
    pub leaky_slope: f64,
    pub layer2_input: Layer2Input,

    pub pp_grid_size: usize,
    pub pp_n_predators: usize,
    pub pp_n_prey: usize,
    pub pp_vision: usize,
    pub pp_capture_reward: f64,
    pub pp_step_cost: f64,
    pub pp_max_steps: usize,
    pub pp_shared_capture: bool,

    pub tj_grid_size: usize,
    pub tj_n_max_cars: usize,
    pub tj_p_arrive: f64,
    pub tj_max_steps: usize,
    pub tj_step_cost: f64,
    pub tj_collision_penalty: f64,
    pub tj_time_scaled_cost: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_pp()
    }
}

impl TrainConfig {
    /// Full-size predator-prey hyper-parameters.
    pub fn full_pp() -> Self {
        let pp = PredatorPreyConfig::full();
        let tj = TrafficJunctionConfig::full();
        Self {
            env: EnvKind::Pp,
            seed: 1,
            epochs: 1000,
            batch_size: 500,
            epoch_size: 10,
            n_workers: 16,
            deterministic: false,
            learning_rate: 0.001,
            rms_decay: 0.99,
            rms_eps: 1e-5,
            grad_clip: 10.0,
            gamma: 0.99,
            value_coef: 1.0,
            regularizer: Regularizer::Ntnnr,
            beta1: 0.2,
            beta2: 0.005,
            lambda_source: LambdaSource::PolicyGradient,
            scoring: ScoringVariant::Gat,
            hidden: 128,
            head_dim: 32,
            heads_l1: 2,
            heads_l2: 1,
            head_hidden: 64,
            leaky_slope: crate::autodiff::DEFAULT_LEAKY_SLOPE,
            layer2_input: Layer2Input::Aggregated,
            pp_grid_size: pp.grid_size,
            pp_n_predators: pp.n_predators,
            pp_n_prey: pp.n_prey,
            pp_vision: pp.vision,
            pp_capture_reward: pp.capture_reward,
            pp_step_cost: pp.step_cost,
            pp_max_steps: pp.max_steps,
            pp_shared_capture: pp.shared_capture,
            tj_grid_size: tj.grid_size,
            tj_n_max_cars: tj.n_max_cars,
            tj_p_arrive: tj.p_arrive,
            tj_max_steps: tj.max_steps,
            tj_step_cost: tj.step_cost,
            tj_collision_penalty: tj.collision_penalty,
            tj_time_scaled_cost: tj.time_scaled_cost,
        }
    }

    /// Traffic junction with four layer-1 heads and its best scaling pair.
    pub fn full_tj() -> Self {
        Self {
            env: EnvKind::Tj,
            heads_l1: 4,
            beta1: 0.01,
            beta2: 0.005,
            ..Self::full_pp()
        }
    }

    /// 6x6 grid, 4 predators, 2 prey, a small network and short batches for a
    /// single CPU core.
    pub fn desk_pp() -> Self {
        let pp = PredatorPreyConfig::desk();
        Self {
            epochs: 300,
            batch_size: 300,
            epoch_size: 10,
            n_workers: 1,
            deterministic: true,
            hidden: 32,
            head_dim: 16,
            head_hidden: 32,
            pp_grid_size: pp.grid_size,
            pp_n_predators: pp.n_predators,
            pp_n_prey: pp.n_prey,
            ..Self::full_pp()
        }
    }

    /// Ten car slots with the desk-scale network.
    pub fn desk_tj() -> Self {
        Self {
            env: EnvKind::Tj,
            epochs: 200,
            batch_size: 500,
            epoch_size: 2,
            heads_l1: 4,
            beta1: 0.01,
            beta2: 0.005,
            tj_n_max_cars: 10,
            ..Self::desk_pp()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full_pp" => Some(Self::full_pp()),
            "full_tj" => Some(Self::full_tj()),
            "desk_pp" => Some(Self::desk_pp()),
            "desk_tj" => Some(Self::desk_tj()),
            _ => None,
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        match self.env {
            EnvKind::Pp => EnvConfig::PredatorPrey(PredatorPreyConfig {
                grid_size: self.pp_grid_size,
                n_predators: self.pp_n_predators,
                n_prey: self.pp_n_prey,
                vision: self.pp_vision,
                capture_reward: self.pp_capture_reward,
                step_cost: self.pp_step_cost,
                max_steps: self.pp_max_steps,
                shared_capture: self.pp_shared_capture,
            }),
            EnvKind::Tj => EnvConfig::TrafficJunction(TrafficJunctionConfig {
                grid_size: self.tj_grid_size,
                n_max_cars: self.tj_n_max_cars,
                p_arrive: self.tj_p_arrive,
                max_steps: self.tj_max_steps,
                step_cost: self.tj_step_cost,
                collision_penalty: self.tj_collision_penalty,
                time_scaled_cost: self.tj_time_scaled_cost,
            }),
        }
    }

    pub fn policy_config(&self, obs_dim: usize, n_actions: usize) -> PolicyConfig {
        PolicyConfig {
            obs_dim,
            n_actions,
            hidden: self.hidden,
            head_dim: self.head_dim,
            heads_layer1: self.heads_l1,
            heads_layer2: self.heads_l2,
            head_hidden: self.head_hidden,
            variant: self.scoring,
            leaky_slope: self.leaky_slope,
            layer2_input: self.layer2_input,
        }
    }

    pub fn betas(&self) -> [f64; 2] {
        [self.beta1, self.beta2]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("epoch_size", self.epoch_size),
            ("n_workers", self.n_workers),
            ("hidden", self.hidden),
            ("head_dim", self.head_dim),
            ("heads_l1", self.heads_l1),
            ("heads_l2", self.heads_l2),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(field(name, "must be at least 1"));
            }
        }
        let finite_positive = [
            ("learning_rate", self.learning_rate),
            ("rms_eps", self.rms_eps),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in finite_positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(field(name, format!("{v} must be finite and positive")));
            }
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err(field("rms_decay", format!("{} must lie in [0, 1)", self.rms_decay)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(field("gamma", format!("{} must lie in [0, 1]", self.gamma)));
        }
        if !(self.value_coef.is_finite() && self.value_coef >= 0.0) {
            return Err(field("value_coef", "must be finite and non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && b >= 0.0) {
                return Err(field(name, format!("{b} must be finite and non-negative")));
            }
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(field("leaky_slope", "must be finite and non-negative"));
        }
        match self.env_config() {
            EnvConfig::PredatorPrey(c) => c.validate().map_err(|e| field("pp_*", e.to_string())),
            EnvConfig::TrafficJunction(c) => c.validate().map_err(|e| field("tj_*", e.to_string())),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunKeys {
    out_dir: String,
    checkpoint_interval: usize,
    eval_episodes: usize,
    export_attention: bool,
    export_episodes: usize,
    replay: bool,
}

impl Default for RunKeys {
    fn default() -> Self {
        Self {
            out_dir: "runs/default".into(),
            checkpoint_interval: 0,
            eval_episodes: 100,
            export_attention: false,
            export_episodes: 1,
            replay: false,
        }
    }
}

const RUN_KEYS: [&str; 6] = [
    "out_dir",
    "checkpoint_interval",
    "eval_episodes",
    "export_attention",
    "export_episodes",
    "replay",
];

/// Training configuration plus artifact settings, stored in one flat file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub out_dir: String,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub eval_episodes: usize,
    /// Write attention tensors of evaluation episodes after training.
    pub export_attention: bool,
    pub export_episodes: usize,
    /// Write a replay dump of evaluation episodes after training.
    pub replay: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_train(TrainConfig::default())
    }
}

impl RunConfig {
    pub fn with_train(train: TrainConfig) -> Self {
        let k = RunKeys::default();
        Self {
            train,
            out_dir: k.out_dir,
            checkpoint_interval: k.checkpoint_interval,
            eval_episodes: k.eval_episodes,
            export_attention: k.export_attention,
            export_episodes: k.export_episodes,
            replay: k.replay,
        }
    }

    /// Parses a flat TOML document. A `preset` key selects the base values that the
    /// remaining keys override.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let base = match table.remove("preset") {
            None => TrainConfig::default(),
            Some(toml::Value::String(name)) => {
                TrainConfig::preset(&name).ok_or_else(|| field("preset", format!("unknown preset `{name}`")))?
            }
            Some(other) => return Err(field("preset", format!("expected a string, found {other}"))),
        };
        let mut run_table = toml::Table::new();
        for key in RUN_KEYS {
            if let Some(v) = table.remove(key) {
                run_table.insert(key.to_string(), v);
            }
        }
        let keys: RunKeys = run_table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut merged = toml::Table::try_from(&base).expect("config serializes to a table");
        for (k, v) in table {
            if !merged.contains_key(&k) {
                return Err(ConfigError::Parse(format!("unknown key `{k}`")));
            }
            merged.insert(k, v);
        }
        let train: TrainConfig = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        train.validate()?;
        if keys.eval_episodes == 0 {
            return Err(field("eval_episodes", "must be at least 1"));
        }
        Ok(Self {
            train,
            out_dir: keys.out_dir,
            checkpoint_interval: keys.checkpoint_interval,
            eval_episodes: keys.eval_episodes,
            export_attention: keys.export_attention,
            export_episodes: keys.export_episodes,
            replay: keys.replay,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Every key written out, so the file reproduces the run without defaults.
    pub fn to_toml_string(&self) -> String {
        let keys = RunKeys {
            out_dir: self.out_dir.clone(),
            checkpoint_interval: self.checkpoint_interval,
            eval_episodes: self.eval_episodes,
            export_attention: self.export_attention,
            export_episodes: self.export_episodes,
            replay: self.replay,
        };
        let mut text = self.train.to_toml_string();
        text.push_str(&toml::to_string(&keys).expect("run keys serialize"));
        text
    }
}

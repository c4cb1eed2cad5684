//! Policy-gradient training with the attention-tensor regularizer.
//!
//! One update gathers at least `batch_size` environment steps, builds one tape
//! per episode (backpropagation through time over the whole episode), and
//! minimizes
//!
//! `L = L_pg + c_v L_value + sum_l lambda_l L_reg_l`, with `L_reg_l = -mean_t NTNN(A_l(t))`
//!
//! where `lambda_l = |L_pg| / (beta_l |L_reg_l|)` is recomputed from forward
//! values before every backward pass and carries no gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::adjacency::{self, AdjacencyError, AdjacencyTensor};
use crate::autodiff::{Tape, Value};
use crate::config::{ConfigError, LambdaSource, Regularizer, TrainConfig};
use crate::envs::{EnvConfig, EnvError, Environment};
use crate::linalg::Matrix;
use crate::policy::{self, Bound, PolicyParams, RecurrentState, StateSnapshot};

/// Below this regularizer magnitude the adaptive weight is set to zero.
pub const LAMBDA_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("worker {worker}: {source}")]
    Env { worker: usize, source: EnvError },
    #[error(transparent)]
    Adjacency(#[from] AdjacencyError),
    #[error("numerical failure in epoch {epoch}: {detail}")]
    Numerical { epoch: usize, detail: String },
}

/// Everything recorded at one environment step, one entry per agent slot.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub observations: Matrix,
    pub active: Vec<bool>,
    pub agent_ids: Vec<u64>,
    /// Zero for inactive slots.
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Attention tensor per layer, before tube normalization.
    pub attention: Vec<AdjacencyTensor>,
}

impl StepRecord {
    pub fn active_agents(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub success: bool,
    pub captures: usize,
    pub collisions: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.steps.iter().map(|s| s.active.iter().filter(|a| **a).count()).sum()
    }

    /// Total reward divided by the number of distinct agents that acted.
    pub fn mean_agent_return(&self) -> f64 {
        let mut agents = std::collections::BTreeSet::new();
        let mut total = 0.0;
        for s in &self.steps {
            for i in s.active_agents() {
                agents.insert((i, s.agent_ids[i]));
                total += s.rewards[i];
            }
        }
        if agents.is_empty() {
            0.0
        } else {
            total / agents.len() as f64
        }
    }
}

/// Tape handles of one episode, aligned with its [`Trajectory`].
pub struct EpisodeGraph {
    pub tape: Tape,
    pub bound: Bound,
    /// Per step: log-probability of the taken action, `N x 1`.
    pub log_probs: Vec<Value>,
    /// Per step: value estimates, `N x 1`.
    pub values: Vec<Value>,
    /// Per step, layer and head: attention matrix.
    pub attention: Vec<Vec<Vec<Value>>>,
}

pub struct Episode {
    pub trajectory: Trajectory,
    pub graph: Option<EpisodeGraph>,
}

fn keep_rows(tape: &mut Tape, v: Value, keep: &[bool]) -> Value {
    let (r, c) = tape.shape(v);
    let mask = tape.constant(Matrix::from_fn(r, c, |i, _| if keep[i] { 1.0 } else { 0.0 }));
    tape.mul(v, mask)
}

fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Plays one episode. With `record_graph` every step stays on one tape with the
/// parameters as gradient leaves; otherwise each step uses a fresh tape.
pub fn run_episode(
    params: &PolicyParams,
    env: &mut dyn Environment,
    episode_seed: u64,
    rng: &mut ChaCha8Rng,
    greedy: bool,
    record_graph: bool,
) -> Result<Episode, EnvError> {
    let n = env.n_agents();
    let mut obs = env.reset(episode_seed)?;
    let mut tape = Tape::new();
    let mut bound = if record_graph { params.bind(&mut tape) } else { params.bind_frozen(&mut tape) };
    let mut state: RecurrentState = StateSnapshot::zeros(params.config(), n).to_tape(&mut tape);
    let mut prev_ids: Option<Vec<u64>> = None;
    let mut traj = Trajectory::default();
    let (mut log_prob_nodes, mut value_nodes, mut attention_nodes) = (Vec::new(), Vec::new(), Vec::new());
    loop {
        if !record_graph && !traj.steps.is_empty() {
            let snap = StateSnapshot::from_tape(&tape, &state);
            tape = Tape::new();
            bound = params.bind_frozen(&mut tape);
            state = snap.to_tape(&mut tape);
        }
        if let Some(prev) = &prev_ids {
            let keep: Vec<bool> = prev.iter().zip(&obs.agent_ids).map(|(a, b)| a == b).collect();
            if keep.iter().any(|k| !k) {
                state = RecurrentState {
                    h: keep_rows(&mut tape, state.h, &keep),
                    c: keep_rows(&mut tape, state.c, &keep),
                    comm: keep_rows(&mut tape, state.comm, &keep),
                };
            }
        }
        let out = policy::forward(&mut tape, params, &bound, &obs.observations, &obs.active, &state);
        let logp_all = tape.log_softmax_rows(out.logits);
        let lp = tape.value(logp_all).clone();
        let actions: Vec<usize> = (0..n)
            .map(|i| match (obs.active[i], greedy) {
                (false, _) => 0,
                (true, true) => argmax(lp.row(i)),
                (true, false) => {
                    let probs: Vec<f64> = lp.row(i).iter().map(|l| l.exp()).collect();
                    sample(&probs, rng)
                }
            })
            .collect();
        let logp = tape.pick(logp_all, &actions);
        let attention = out
            .attention
            .iter()
            .map(|heads| {
                let mats: Vec<Matrix> = heads.iter().map(|h| tape.value(*h).clone()).collect();
                AdjacencyTensor::from_slices(&mats).expect("attention slices share a shape")
            })
            .collect();
        let next = env.step(&actions)?;
        traj.steps.push(StepRecord {
            observations: obs.observations.clone(),
            active: obs.active.clone(),
            agent_ids: obs.agent_ids.clone(),
            actions,
            rewards: next.rewards.clone(),
            values: tape.value(out.values).as_slice().to_vec(),
            log_probs: tape.value(logp).as_slice().to_vec(),
            attention,
        });
        traj.captures += next.info.captures;
        traj.collisions += next.info.collisions;
        traj.success = next.info.success;
        if record_graph {
            log_prob_nodes.push(logp);
            value_nodes.push(out.values);
            attention_nodes.push(out.attention);
        }
        state = out.state;
        prev_ids = Some(obs.agent_ids.clone());
        let done = next.done;
        obs = next;
        if done {
            break;
        }
    }
    Ok(Episode {
        trajectory: traj,
        graph: record_graph.then_some(EpisodeGraph {
            tape,
            bound,
            log_probs: log_prob_nodes,
            values: value_nodes,
            attention: attention_nodes,
        }),
    })
}

/// `G_t = sum_{t' >= t} gamma^(t' - t) r_t'`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Per-step, per-slot discounted returns and advantages of one episode.
pub type ReturnsAdvantages = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Discounted returns and advantages `G - V` per step and slot, following each
/// occupant of a slot from arrival to departure. Inactive entries are zero.
pub fn returns_and_advantages(traj: &Trajectory, gamma: f64) -> ReturnsAdvantages {
    let t_len = traj.steps.len();
    let n = traj.steps.first().map_or(0, |s| s.active.len());
    let mut returns = vec![vec![0.0; n]; t_len];
    let mut adv = vec![vec![0.0; n]; t_len];
    for i in 0..n {
        let mut acc = 0.0;
        for t in (0..t_len).rev() {
            let s = &traj.steps[t];
            if !s.active[i] {
                acc = 0.0;
                continue;
            }
            let continues = traj
                .steps
                .get(t + 1)
                .is_some_and(|nx| nx.active[i] && nx.agent_ids[i] == s.agent_ids[i]);
            if !continues {
                acc = 0.0;
            }
            acc = s.rewards[i] + gamma * acc;
            returns[t][i] = acc;
            adv[t][i] = acc - s.values[i];
        }
    }
    (returns, adv)
}

/// `lambda = |L_rl| / (beta |L_reg|)`, or zero when `beta` or `|L_reg|` vanishes.
pub fn adaptive_lambda(l_rl: f64, l_reg: f64, beta: f64) -> f64 {
    if beta <= 0.0 || l_reg.abs() < LAMBDA_FLOOR {
        0.0
    } else {
        l_rl.abs() / (beta * l_reg.abs())
    }
}

/// NTNN of the attention tensor restricted to `agents`, tube-normalized when it
/// has more than one head and `normalize` is set.
pub fn step_ntnn(t: &AdjacencyTensor, agents: &[usize], normalize: bool) -> Result<f64, AdjacencyError> {
    let r = t.restrict(agents)?;
    if normalize && r.n_heads() >= 2 {
        adjacency::ntnn(&adjacency::tube_softmax(&r)?)
    } else {
        adjacency::ntnn(&r)
    }
}

/// Coefficients that turn per-episode sums into the batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Multiplies `-sum log pi * psi`.
    pub pg: f64,
    /// Multiplies `sum (G - V)^2`.
    pub value: f64,
    /// Multiplies `-sum_t NTNN(A_l(t))`, per layer.
    pub reg: [f64; 2],
    /// Tube-normalize multi-head tensors inside the regularizer.
    pub normalize: bool,
}

/// Builds this episode's share of the batch loss on its tape.
pub fn episode_loss(
    graph: &mut EpisodeGraph,
    traj: &Trajectory,
    returns: &[Vec<f64>],
    adv: &[Vec<f64>],
    w: &LossWeights,
) -> Result<Value, AdjacencyError> {
    let tape = &mut graph.tape;
    let mut terms = Vec::new();
    for (t, s) in traj.steps.iter().enumerate() {
        let n = s.active.len();
        let active = s.active_agents();
        if active.is_empty() {
            continue;
        }
        if w.pg != 0.0 {
            let psi = tape.constant(Matrix::from_fn(n, 1, |i, _| adv[t][i]));
            let weighted = tape.mul(graph.log_probs[t], psi);
            let sum = tape.sum(weighted);
            terms.push(tape.scale(sum, -w.pg));
        }
        if w.value != 0.0 {
            let target = tape.constant(Matrix::from_fn(n, 1, |i, _| returns[t][i]));
            let mask = tape.constant(Matrix::from_fn(n, 1, |i, _| if s.active[i] { 1.0 } else { 0.0 }));
            let diff = tape.sub(graph.values[t], target);
            let diff = tape.mul(diff, mask);
            let sq = tape.square(diff);
            let sum = tape.sum(sq);
            terms.push(tape.scale(sum, w.value));
        }
        for (l, &coef) in w.reg.iter().enumerate() {
            if coef != 0.0 {
                let v = tape.ntnn(&graph.attention[t][l], Some(&active), w.normalize)?;
                terms.push(tape.scale(v, -coef));
            }
        }
    }
    Ok(match terms.len() {
        0 => tape.constant(Matrix::zeros(1, 1)),
        _ => {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t);
            }
            acc
        }
    })
}

/// Forward-value summary of a batch: loss components and per-step norms.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub n_active: usize,
    /// Steps with at least one active agent.
    pub n_reg_steps: usize,
    /// `-mean log pi * psi`.
    pub loss_pg: f64,
    /// `mean (G - V)^2`.
    pub loss_value: f64,
    /// `-mean_t NTNN(A_l(t))` as the regularizer sees it.
    pub loss_reg: [f64; 2],
    /// `mean_t NTNN(A_l(t))` with tube normalization, for reporting.
    pub ntnn: [f64; 2],
}

pub fn summarize(
    episodes: &[Trajectory],
    advantages: &[ReturnsAdvantages],
    regularizer: Regularizer,
) -> Result<BatchSummary, AdjacencyError> {
    let (mut n_active, mut n_reg) = (0usize, 0usize);
    let (mut pg, mut value) = (0.0, 0.0);
    let (mut reg, mut metric) = ([0.0; 2], [0.0; 2]);
    for (traj, (returns, adv)) in episodes.iter().zip(advantages) {
        for (t, s) in traj.steps.iter().enumerate() {
            let active = s.active_agents();
            if active.is_empty() {
                continue;
            }
            n_reg += 1;
            for &i in &active {
                n_active += 1;
                pg -= s.log_probs[i] * adv[t][i];
                value += (returns[t][i] - s.values[i]).powi(2);
            }
            for l in 0..2 {
                let normalized = step_ntnn(&s.attention[l], &active, true)?;
                metric[l] += normalized;
                reg[l] -= match regularizer {
                    Regularizer::Tnnr => step_ntnn(&s.attention[l], &active, false)?,
                    _ => normalized,
                };
            }
        }
    }
    let per_agent = 1.0 / n_active.max(1) as f64;
    let per_step = 1.0 / n_reg.max(1) as f64;
    Ok(BatchSummary {
        n_active,
        n_reg_steps: n_reg,
        loss_pg: pg * per_agent,
        loss_value: value * per_agent,
        loss_reg: reg.map(|r| r * per_step),
        ntnn: metric.map(|m| m * per_step),
    })
}

/// Gradient of the weighted batch loss, summed over episodes in order.
pub fn batch_gradients(
    episodes: &mut [Episode],
    advantages: &[ReturnsAdvantages],
    params: &PolicyParams,
    w: &LossWeights,
) -> Result<Vec<Matrix>, AdjacencyError> {
    let mut grads: Vec<Matrix> = params.tensors().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    for (ep, (returns, adv)) in episodes.iter_mut().zip(advantages) {
        let graph = ep.graph.as_mut().expect("training episodes keep their graph");
        let loss = episode_loss(graph, &ep.trajectory, returns, adv, w)?;
        graph.tape.backward(loss);
        for (g, leaf) in grads.iter_mut().zip(&graph.bound.leaves) {
            if let Some(lg) = graph.tape.grad(*leaf) {
                g.as_mut_slice().iter_mut().zip(lg.as_slice()).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(grads)
}

/// Scales all gradients so their joint Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.as_slice()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.as_mut_slice().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// One RMSProp update of a single tensor.
pub fn rmsprop_step(param: &mut Matrix, grad: &Matrix, acc: &mut Matrix, lr: f64, decay: f64, eps: f64) {
    assert_eq!(param.shape(), grad.shape(), "rmsprop: gradient shape mismatch");
    assert_eq!(param.shape(), acc.shape(), "rmsprop: accumulator shape mismatch");
    for ((p, g), s) in param.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(acc.as_mut_slice()) {
        *s = decay * *s + (1.0 - decay) * g * g;
        *p -= lr * g / (s.sqrt() + eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rmsprop {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    acc: Vec<Matrix>,
}

impl Rmsprop {
    pub fn new(params: &PolicyParams, lr: f64, decay: f64, eps: f64) -> Self {
        Self {
            lr,
            decay,
            eps,
            acc: params.tensors().iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grads: &[Matrix]) {
        for ((p, g), s) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.acc) {
            rmsprop_step(p, g, s, self.lr, self.decay, self.eps);
        }
    }
}

/// Diagnostics of one optimizer update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub env_steps: usize,
    pub episodes: usize,
    pub summary: BatchSummary,
    /// The `|L_rl|` fed to the adaptive weights.
    pub lambda_numerator: f64,
    pub lambda: [f64; 2],
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Cumulative environment steps.
    pub env_steps: u64,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub ntnn: [f64; 2],
    pub lambda: [f64; 2],
    pub loss_rl: f64,
    pub loss_ntnnr: [f64; 2],
    pub wall_clock_s: f64,
    pub updates: Vec<UpdateStats>,
}

struct Worker {
    env: Box<dyn Environment>,
    rng: ChaCha8Rng,
}

impl Worker {
    fn collect(&mut self, params: &PolicyParams, min_steps: usize) -> Result<Vec<Episode>, EnvError> {
        let mut out = Vec::new();
        let mut steps = 0;
        while steps < min_steps {
            let seed: u64 = self.rng.random();
            let ep = run_episode(params, self.env.as_mut(), seed, &mut self.rng, false, true)?;
            steps += ep.trajectory.len();
            out.push(ep);
        }
        Ok(out)
    }
}

/// Gathers at least `batch_size` steps across workers. The result is ordered by
/// worker, so it does not depend on thread scheduling.
fn collect_rollouts(
    workers: &mut [Worker],
    params: &PolicyParams,
    batch_size: usize,
    parallel: bool,
) -> Result<Vec<Episode>, TrainError> {
    let per_worker = batch_size.div_ceil(workers.len());
    let results: Vec<Result<Vec<Episode>, EnvError>> = if parallel {
        workers.par_iter_mut().map(|w| w.collect(params, per_worker)).collect()
    } else {
        workers.iter_mut().map(|w| w.collect(params, per_worker)).collect()
    };
    let mut episodes = Vec::new();
    for (worker, r) in results.into_iter().enumerate() {
        episodes.extend(r.map_err(|source| TrainError::Env { worker, source })?);
    }
    Ok(episodes)
}

pub struct Trainer {
    config: TrainConfig,
    env_config: EnvConfig,
    params: PolicyParams,
    optimizer: Rmsprop,
    workers: Vec<Worker>,
    epoch: usize,
    env_steps: u64,
}

impl Trainer {
    /// Fresh parameters initialized from the run seed.
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let env_config = config.env_config();
        let probe = env_config.build().map_err(|source| TrainError::Env { worker: 0, source })?;
        let params = PolicyParams::init(config.policy_config(probe.obs_dim(), probe.n_actions()), config.seed);
        Self::with_params(config, params)
    }

    pub fn with_params(config: TrainConfig, params: PolicyParams) -> Result<Self, TrainError> {
        config.validate()?;
        let env_config = config.env_config();
        let workers = (0..config.n_workers)
            .map(|w| {
                let env = env_config.build().map_err(|source| TrainError::Env { worker: w, source })?;
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(w as u64 + 1);
                Ok(Worker { env, rng })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        let optimizer = Rmsprop::new(&params, config.learning_rate, config.rms_decay, config.rms_eps);
        Ok(Self {
            config,
            env_config,
            params,
            optimizer,
            workers,
            epoch: 0,
            env_steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env_config
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn numerical(&self, detail: impl Into<String>) -> TrainError {
        TrainError::Numerical {
            epoch: self.epoch + 1,
            detail: detail.into(),
        }
    }

    /// Collects one batch and applies one optimizer step.
    pub fn update(&mut self) -> Result<(UpdateStats, Vec<Trajectory>), TrainError> {
        let parallel = !self.config.deterministic && self.workers.len() > 1;
        let mut episodes = collect_rollouts(&mut self.workers, &self.params, self.config.batch_size, parallel)?;
        let adv: Vec<_> = episodes
            .iter()
            .map(|e| returns_and_advantages(&e.trajectory, self.config.gamma))
            .collect();
        let trajs: Vec<Trajectory> = episodes.iter().map(|e| e.trajectory.clone()).collect();
        let summary = summarize(&trajs, &adv, self.config.regularizer)?;
        let numerator = match self.config.lambda_source {
            LambdaSource::PolicyGradient => summary.loss_pg,
            LambdaSource::Total => summary.loss_pg + self.config.value_coef * summary.loss_value,
        }
        .abs();
        let betas = self.config.betas();
        let lambda = [0, 1].map(|l| match self.config.regularizer {
            Regularizer::None => 0.0,
            _ => adaptive_lambda(numerator, summary.loss_reg[l], betas[l]),
        });
        let finite = [summary.loss_pg, summary.loss_value, summary.loss_reg[0], summary.loss_reg[1], lambda[0], lambda[1]];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(self.numerical(format!("non-finite loss terms {finite:?}")));
        }
        let per_agent = 1.0 / summary.n_active.max(1) as f64;
        let per_step = 1.0 / summary.n_reg_steps.max(1) as f64;
        let weights = LossWeights {
            pg: per_agent,
            value: self.config.value_coef * per_agent,
            reg: lambda.map(|l| l * per_step),
            normalize: self.config.regularizer == Regularizer::Ntnnr,
        };
        let mut grads = batch_gradients(&mut episodes, &adv, &self.params, &weights)?;
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(self.numerical("non-finite gradient norm"));
        }
        self.optimizer.step(&mut self.params, &grads);
        let env_steps = trajs.iter().map(Trajectory::len).sum();
        self.env_steps += env_steps as u64;
        Ok((
            UpdateStats {
                env_steps,
                episodes: trajs.len(),
                summary,
                lambda_numerator: numerator,
                lambda,
                grad_norm,
            },
            trajs,
        ))
    }

    /// `epoch_size` updates, averaged into one metrics record.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics, TrainError> {
        let start = std::time::Instant::now();
        let mut updates = Vec::with_capacity(self.config.epoch_size);
        let (mut reward, mut success, mut n_eps) = (0.0, 0.0, 0usize);
        for _ in 0..self.config.epoch_size {
            let (stats, trajs) = self.update()?;
            for t in &trajs {
                reward += t.mean_agent_return();
                success += if t.success { 1.0 } else { 0.0 };
            }
            n_eps += trajs.len();
            updates.push(stats);
        }
        self.epoch += 1;
        let k = updates.len() as f64;
        let mean = |f: &dyn Fn(&UpdateStats) -> f64| updates.iter().map(f).sum::<f64>() / k;
        let value_coef = self.config.value_coef;
        Ok(EpochMetrics {
            epoch: self.epoch,
            env_steps: self.env_steps,
            mean_reward: reward / n_eps as f64,
            success_rate: success / n_eps as f64,
            ntnn: [mean(&|u| u.summary.ntnn[0]), mean(&|u| u.summary.ntnn[1])],
            lambda: [mean(&|u| u.lambda[0]), mean(&|u| u.lambda[1])],
            loss_rl: mean(&|u| u.summary.loss_pg + value_coef * u.summary.loss_value),
            loss_ntnnr: [mean(&|u| u.summary.loss_reg[0]), mean(&|u| u.summary.loss_reg[1])],
            wall_clock_s: if self.config.deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
            updates,
        })
    }
}

/// Result of greedy evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_reward: f64,
    pub success_rate: f64,
    pub episodes: Vec<Trajectory>,
}

/// Plays `episodes` greedy episodes with seeds drawn from `seed`.
pub fn evaluate(params: &PolicyParams, env_config: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalReport, EnvError> {
    let mut env = env_config.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajs = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let s: u64 = rng.random();
        trajs.push(run_episode(params, env.as_mut(), s, &mut rng, true, false)?.trajectory);
    }
    let n = trajs.len().max(1) as f64;
    Ok(EvalReport {
        mean_reward: trajs.iter().map(Trajectory::mean_agent_return).sum::<f64>() / n,
        success_rate: trajs.iter().filter(|t| t.success).count() as f64 / n,
        episodes: trajs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn returns_by_hand() {
        assert_eq!(discounted_returns(&[1.0, 1.0, 1.0], 0.5), vec![1.75, 1.5, 1.0]);
        assert_eq!(discounted_returns(&[3.0, -2.0], 0.0), vec![3.0, -2.0]);
    }

    #[test]
    fn lambda_by_hand() {
        assert_eq!(adaptive_lambda(2.0, 1.0, 0.01), 200.0);
        assert_eq!(adaptive_lambda(0.0, 1.0, 0.2), 0.0);
        assert_eq!(adaptive_lambda(2.0, 1e-9, 0.2), 0.0);
        assert_eq!(adaptive_lambda(2.0, -4.0, 0.5), 1.0);
        assert_eq!(adaptive_lambda(2.0, 1.0, 0.0), 0.0);
    }

    #[test]
    fn rmsprop_by_hand() {
        let mut p = Matrix::filled(1, 1, 1.0);
        let mut s = Matrix::zeros(1, 1);
        rmsprop_step(&mut p, &Matrix::zeros(1, 1), &mut s, 0.1, 0.99, 1e-5);
        assert_eq!(p.get(0, 0), 1.0);
        let g = Matrix::filled(1, 1, 2.0);
        rmsprop_step(&mut p, &g, &mut s, 0.1, 0.99, 1e-5);
        let first = 1.0 - p.get(0, 0);
        let want = 0.1 * 2.0 / ((0.01f64).sqrt() * 2.0 + 1e-5);
        assert!((first - want).abs() < 1e-12);
        let before = p.get(0, 0);
        rmsprop_step(&mut p, &g, &mut s, 0.1, 0.99, 1e-5);
        assert!(before - p.get(0, 0) < first);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![Matrix::filled(1, 2, 3.0), Matrix::filled(1, 2, 4.0)];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 50f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().flat_map(|m| m.as_slice()).map(|x| x * x).sum();
        assert!((after - 1.0).abs() < 1e-12);
    }

    fn step(active: Vec<bool>, ids: Vec<u64>, rewards: Vec<f64>, values: Vec<f64>) -> StepRecord {
        let n = active.len();
        StepRecord {
            observations: Matrix::zeros(n, 1),
            active,
            agent_ids: ids,
            actions: vec![0; n],
            rewards,
            values,
            log_probs: vec![0.0; n],
            attention: vec![],
        }
    }

    #[test]
    fn returns_restart_for_new_occupant() {
        let traj = Trajectory {
            steps: vec![
                step(vec![true], vec![0], vec![1.0], vec![0.0]),
                step(vec![true], vec![0], vec![1.0], vec![0.5]),
                step(vec![true], vec![1], vec![2.0], vec![0.0]),
                step(vec![false], vec![9], vec![0.0], vec![0.0]),
                step(vec![true], vec![2], vec![4.0], vec![1.0]),
            ],
            ..Default::default()
        };
        let (g, a) = returns_and_advantages(&traj, 0.5);
        let g: Vec<f64> = g.iter().map(|r| r[0]).collect();
        assert_eq!(g, vec![1.5, 1.0, 2.0, 0.0, 4.0]);
        assert_eq!(a[1][0], 0.5);
        assert_eq!(a[4][0], 3.0);
    }
}

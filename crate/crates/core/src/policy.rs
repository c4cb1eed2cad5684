//! The shared agent network: LSTM observation encoder, two graph-attention
//! communication layers over the complete graph (self-loops included), and
//! policy/value heads.
//!
//! Every agent runs the same parameters. Messages are the encoder hidden states;
//! the previous step's layer-2 output is fed back into the encoder, so the
//! recurrent state carries last-step communication.
//!
//! Weights are stored for row-batched evaluation: a projection is `in x out` and
//! applied as `H W` to the `N x in` feature matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{LstmGates, Tape, Value};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoringVariant {
    /// `LeakyReLU(a^T [W h_i || W h_j])`.
    #[default]
    Gat,
    /// `a^T LeakyReLU(W_q h_i + W h_j)`: the weight vector applied after the nonlinearity.
    Gatv2,
    /// Uniform weights over neighbours, no scoring parameters.
    Mean,
}

impl std::str::FromStr for ScoringVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gat" => Ok(Self::Gat),
            "gatv2" => Ok(Self::Gatv2),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown scoring variant `{other}` (expected gat, gatv2 or mean)")),
        }
    }
}

/// What the second attention layer consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Layer2Input {
    #[default]
    Aggregated,
    AggregatedWithEncoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub n_actions: usize,
    /// LSTM encoder width.
    pub hidden: usize,
    /// Width of every attention head.
    pub head_dim: usize,
    pub heads_layer1: usize,
    pub heads_layer2: usize,
    /// Hidden width of the policy and value heads.
    pub head_hidden: usize,
    pub variant: ScoringVariant,
    pub leaky_slope: f64,
    pub layer2_input: Layer2Input,
}

impl PolicyConfig {
    /// Encoder 128, two layer-1 heads of 32 units, one layer-2 head.
    pub fn full(obs_dim: usize, n_actions: usize) -> Self {
        Self {
            obs_dim,
            n_actions,
            hidden: 128,
            head_dim: 32,
            heads_layer1: 2,
            heads_layer2: 1,
            head_hidden: 64,
            variant: ScoringVariant::Gat,
            leaky_slope: crate::autodiff::DEFAULT_LEAKY_SLOPE,
            layer2_input: Layer2Input::Aggregated,
        }
    }

    pub fn heads(&self, layer: usize) -> usize {
        [self.heads_layer1, self.heads_layer2][layer]
    }

    /// Width of the communication vector fed back into the encoder.
    pub fn comm_dim(&self) -> usize {
        self.heads_layer2 * self.head_dim
    }

    fn layer_in_dim(&self, layer: usize) -> usize {
        match (layer, self.layer2_input) {
            (0, _) => self.hidden,
            (_, Layer2Input::Aggregated) => self.heads_layer1 * self.head_dim,
            (_, Layer2Input::AggregatedWithEncoder) => self.heads_layer1 * self.head_dim + self.hidden,
        }
    }
}

/// Parameter indices of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct GatHead {
    /// Message projection `in x head_dim`.
    pub w: usize,
    /// Scoring vector: `2*head_dim x 1` for gat, `head_dim x 1` for gatv2.
    pub att: Option<usize>,
    /// Query projection `in x head_dim`, gatv2 only.
    pub query: Option<usize>,
}

/// One multi-head attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams {
    pub n_heads: usize,
    pub in_dim: usize,
    pub head_dim: usize,
    pub variant: ScoringVariant,
    pub heads: Vec<GatHead>,
}

#[derive(Debug, Clone, PartialEq)]
struct MlpIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc_wx: usize,
    enc_wh: usize,
    enc_b: usize,
    layers: Vec<GatLayerParams>,
    policy: MlpIdx,
    value: MlpIdx,
}

/// All network parameters as an ordered list of named matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    names: Vec<String>,
    tensors: Vec<Matrix>,
    layout: Layout,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Matrix>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn glorot(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let m = Matrix::from_fn(rows, cols, |_, _| self.rng.random_range(-bound..bound));
        self.push(name, m)
    }

    fn push(&mut self, name: String, m: Matrix) -> usize {
        self.names.push(name);
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, out: usize) -> MlpIdx {
        MlpIdx {
            w1: self.glorot(format!("{prefix}.w1"), input, hidden),
            b1: self.push(format!("{prefix}.b1"), Matrix::zeros(1, hidden)),
            w2: self.glorot(format!("{prefix}.w2"), hidden, out),
            b2: self.push(format!("{prefix}.b2"), Matrix::zeros(1, out)),
        }
    }
}

impl PolicyParams {
    /// Glorot-uniform weights, zero biases except a forget-gate bias of 1.
    pub fn init(config: PolicyConfig, seed: u64) -> Self {
        assert!(config.heads_layer1 >= 1 && config.heads_layer2 >= 1, "each layer needs at least one head");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
        };
        let h = config.hidden;
        let enc_in = config.obs_dim + config.comm_dim();
        let enc_wx = b.glorot("encoder.w_x".into(), enc_in, 4 * h);
        let enc_wh = b.glorot("encoder.w_h".into(), h, 4 * h);
        let bias = Matrix::from_fn(1, 4 * h, |_, c| if (h..2 * h).contains(&c) { 1.0 } else { 0.0 });
        let enc_b = b.push("encoder.bias".into(), bias);
        let mut layers = Vec::new();
        for layer in 0..2 {
            let in_dim = config.layer_in_dim(layer);
            let hd = config.head_dim;
            let heads = (0..config.heads(layer))
                .map(|k| {
                    let prefix = format!("gat{}.head{k}", layer + 1);
                    let w = b.glorot(format!("{prefix}.w"), in_dim, hd);
                    let (att, query) = match config.variant {
                        ScoringVariant::Gat => (Some(b.glorot(format!("{prefix}.att"), 2 * hd, 1)), None),
                        ScoringVariant::Gatv2 => (
                            Some(b.glorot(format!("{prefix}.att"), hd, 1)),
                            Some(b.glorot(format!("{prefix}.query"), in_dim, hd)),
                        ),
                        ScoringVariant::Mean => (None, None),
                    };
                    GatHead { w, att, query }
                })
                .collect();
            layers.push(GatLayerParams {
                n_heads: config.heads(layer),
                in_dim,
                head_dim: hd,
                variant: config.variant,
                heads,
            });
        }
        let head_in = h + config.comm_dim();
        let policy = b.mlp("policy", head_in, config.head_hidden, config.n_actions);
        let value = b.mlp("value", head_in, config.head_hidden, 1);
        let Builder { names, tensors, .. } = b;
        Self {
            config,
            names,
            tensors,
            layout: Layout {
                enc_wx,
                enc_wh,
                enc_b,
                layers,
                policy,
                value,
            },
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn layer(&self, l: usize) -> &GatLayerParams {
        &self.layout.layers[l]
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Replaces every tensor; names and shapes must match this layout.
    pub fn load_tensors(&mut self, named: Vec<(String, Matrix)>) -> Result<(), String> {
        if named.len() != self.tensors.len() {
            return Err(format!("expected {} parameter arrays, found {}", self.tensors.len(), named.len()));
        }
        for ((name, m), (want, cur)) in named.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != want {
                return Err(format!("parameter `{name}` found where `{want}` was expected"));
            }
            if m.shape() != cur.shape() {
                return Err(format!("parameter `{name}` has shape {:?}, network expects {:?}", m.shape(), cur.shape()));
            }
        }
        self.tensors = named.into_iter().map(|(_, m)| m).collect();
        Ok(())
    }

    /// Puts every tensor on the tape as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            leaves: self.tensors.iter().map(|m| tape.param(m.clone())).collect(),
        }
    }

    /// Puts every tensor on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            leaves: self.tensors.iter().map(|m| tape.constant(m.clone())).collect(),
        }
    }
}

/// Tape handles of a [`PolicyParams`], in parameter order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub leaves: Vec<Value>,
}

impl Bound {
    fn get(&self, idx: usize) -> Value {
        self.leaves[idx]
    }
}

/// LSTM state plus the last communication output, one row per agent.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentState {
    pub h: Value,
    pub c: Value,
    pub comm: Value,
}

/// Tape-independent copy of a [`RecurrentState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub h: Matrix,
    pub c: Matrix,
    pub comm: Matrix,
}

impl StateSnapshot {
    pub fn zeros(config: &PolicyConfig, n_agents: usize) -> Self {
        Self {
            h: Matrix::zeros(n_agents, config.hidden),
            c: Matrix::zeros(n_agents, config.hidden),
            comm: Matrix::zeros(n_agents, config.comm_dim()),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.h.rows()
    }

    pub fn to_tape(&self, tape: &mut Tape) -> RecurrentState {
        RecurrentState {
            h: tape.constant(self.h.clone()),
            c: tape.constant(self.c.clone()),
            comm: tape.constant(self.comm.clone()),
        }
    }

    pub fn from_tape(tape: &Tape, s: &RecurrentState) -> Self {
        Self {
            h: tape.value(s.h).clone(),
            c: tape.value(s.c).clone(),
            comm: tape.value(s.comm).clone(),
        }
    }

    /// Zeroes the rows of the listed agents (fresh arrivals in a reused slot).
    pub fn reset_agents(&mut self, agents: &[usize]) {
        for m in [&mut self.h, &mut self.c, &mut self.comm] {
            for &a in agents {
                for c in 0..m.cols() {
                    m.set(a, c, 0.0);
                }
            }
        }
    }
}

/// Outputs of one communication step for all agents.
#[derive(Debug, Clone)]
pub struct CommForwardResult {
    /// `N x n_actions`.
    pub logits: Value,
    /// `N x 1`.
    pub values: Value,
    /// `attention[layer][head]`, each `N x N` and row-stochastic. These are the
    /// adjacency tensors before any tube normalization.
    pub attention: Vec<Vec<Value>>,
    pub state: RecurrentState,
}

/// Which neighbours each agent may attend to, as a row-major `N x N` mask.
/// Active agents see every active agent (themselves included); inactive agents
/// see only themselves so their rows stay well defined.
pub fn attention_mask(active: &[bool]) -> Vec<bool> {
    let n = active.len();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = if active[i] { active[j] } else { i == j };
        }
    }
    mask
}

/// One LSTM step over `[obs || last comm]`.
pub fn encode(tape: &mut Tape, params: &PolicyParams, bound: &Bound, obs: Value, state: &RecurrentState) -> (Value, RecurrentState) {
    let n = tape.shape(obs).0;
    assert_eq!(tape.shape(state.h).0, n, "encode: {n} observations for a state of {} agents", tape.shape(state.h).0);
    let x = tape.concat_cols(&[obs, state.comm]);
    let gates = LstmGates {
        w_x: bound.get(params.layout.enc_wx),
        w_h: bound.get(params.layout.enc_wh),
        bias: bound.get(params.layout.enc_b),
    };
    let (h, c) = tape.lstm_cell(x, state.h, state.c, &gates);
    (h, RecurrentState { h, c, comm: state.comm })
}

/// `features W` for one head: the messages that head aggregates.
pub fn head_messages(tape: &mut Tape, params: &PolicyParams, bound: &Bound, layer: usize, head: usize, features: Value) -> Value {
    let w = bound.get(params.layout.layers[layer].heads[head].w);
    tape.matmul(features, w)
}

/// Raw `N x N` attention scores of one head; entry `(i, j)` scores agent j's
/// message as seen by agent i.
pub fn gat_scores(
    tape: &mut Tape,
    params: &PolicyParams,
    bound: &Bound,
    layer: usize,
    head: usize,
    features: Value,
    messages: Value,
) -> Value {
    let n = tape.shape(features).0;
    let spec = &params.layout.layers[layer];
    let hd = spec.head_dim;
    let slope = params.config.leaky_slope;
    match spec.variant {
        ScoringVariant::Gat => {
            let att = bound.get(spec.heads[head].att.expect("gat head has att"));
            let a_dst = tape.slice_rows_of_column(att, 0, hd);
            let a_src = tape.slice_rows_of_column(att, hd, 2 * hd);
            let s_i = tape.matmul(messages, a_dst);
            let s_j = tape.matmul(messages, a_src);
            let pairs = tape.pair_sum(s_i, s_j);
            let grid = tape.reshape(pairs, n, n);
            tape.leaky_relu(grid, slope)
        }
        ScoringVariant::Gatv2 => {
            let att = bound.get(spec.heads[head].att.expect("gatv2 head has att"));
            let wq = bound.get(spec.heads[head].query.expect("gatv2 head has query"));
            let q = tape.matmul(features, wq);
            let pairs = tape.pair_sum(q, messages);
            let act = tape.leaky_relu(pairs, slope);
            let s = tape.matmul(act, att);
            tape.reshape(s, n, n)
        }
        ScoringVariant::Mean => tape.constant(Matrix::zeros(n, n)),
    }
}

/// Masked row softmax of the scores.
pub fn attention(tape: &mut Tape, scores: Value, mask: &[bool]) -> Value {
    tape.masked_softmax_rows(scores, mask)
}

/// Per head `A_k (features W_k)`, heads concatenated along columns.
pub fn aggregate(tape: &mut Tape, attention: &[Value], messages: &[Value]) -> Value {
    assert_eq!(attention.len(), messages.len(), "aggregate: one message matrix per head");
    let outs: Vec<Value> = attention.iter().zip(messages).map(|(a, m)| tape.matmul(*a, *m)).collect();
    if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    }
}

fn gat_layer(tape: &mut Tape, params: &PolicyParams, bound: &Bound, layer: usize, features: Value, mask: &[bool]) -> (Value, Vec<Value>) {
    let n_heads = params.layout.layers[layer].n_heads;
    let mut attn = Vec::with_capacity(n_heads);
    let mut msgs = Vec::with_capacity(n_heads);
    for k in 0..n_heads {
        let m = head_messages(tape, params, bound, layer, k, features);
        let s = gat_scores(tape, params, bound, layer, k, features, m);
        attn.push(attention(tape, s, mask));
        msgs.push(m);
    }
    (aggregate(tape, &attn, &msgs), attn)
}

fn mlp(tape: &mut Tape, bound: &Bound, idx: &MlpIdx, x: Value) -> Value {
    let h = tape.matmul(x, bound.get(idx.w1));
    let h = tape.add_row(h, bound.get(idx.b1));
    let h = tape.tanh(h);
    let o = tape.matmul(h, bound.get(idx.w2));
    tape.add_row(o, bound.get(idx.b2))
}

/// Full step: encode, two attention layers, policy logits and values.
pub fn forward(
    tape: &mut Tape,
    params: &PolicyParams,
    bound: &Bound,
    obs: &Matrix,
    active: &[bool],
    state: &RecurrentState,
) -> CommForwardResult {
    assert_eq!(obs.rows(), active.len(), "forward: {} observations for {} agents", obs.rows(), active.len());
    let mask = attention_mask(active);
    let obs = tape.constant(obs.clone());
    let (h, state) = encode(tape, params, bound, obs, state);
    let (agg1, attn1) = gat_layer(tape, params, bound, 0, h, &mask);
    let agg1 = tape.tanh(agg1);
    let l2_in = match params.config.layer2_input {
        Layer2Input::Aggregated => agg1,
        Layer2Input::AggregatedWithEncoder => tape.concat_cols(&[agg1, h]),
    };
    let (comm, attn2) = gat_layer(tape, params, bound, 1, l2_in, &mask);
    let head_in = tape.concat_cols(&[h, comm]);
    let logits = mlp(tape, bound, &params.layout.policy, head_in);
    let values = mlp(tape, bound, &params.layout.value, head_in);
    CommForwardResult {
        logits,
        values,
        attention: vec![attn1, attn2],
        state: RecurrentState { comm, ..state },
    }
}

impl Tape {
    /// Rows `start..end` of a column vector, as a column vector.
    fn slice_rows_of_column(&mut self, col: Value, start: usize, end: usize) -> Value {
        let row = self.reshape(col, 1, self.shape(col).0);
        let part = self.slice_cols(row, start, end);
        self.reshape(part, end - start, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: ScoringVariant) -> PolicyConfig {
        PolicyConfig {
            obs_dim: 5,
            n_actions: 4,
            hidden: 6,
            head_dim: 3,
            heads_layer1: 2,
            heads_layer2: 1,
            head_hidden: 5,
            variant,
            leaky_slope: 0.2,
            layer2_input: Layer2Input::Aggregated,
        }
    }

    fn obs_rows(n: usize, f: impl Fn(usize, usize) -> f64) -> Matrix {
        Matrix::from_fn(n, 5, f)
    }

    fn step(params: &PolicyParams, obs: &Matrix, active: &[bool]) -> (Tape, CommForwardResult) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let state = StateSnapshot::zeros(params.config(), obs.rows()).to_tape(&mut tape);
        let out = forward(&mut tape, params, &bound, obs, active, &state);
        (tape, out)
    }

    #[test]
    fn zero_parameters_zero_state_give_zero_features() {
        let mut p = PolicyParams::init(small(ScoringVariant::Gat), 0);
        p.tensors_mut().iter_mut().for_each(|m| *m = Matrix::zeros(m.rows(), m.cols()));
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let state = StateSnapshot::zeros(p.config(), 3).to_tape(&mut tape);
        let obs = tape.constant(obs_rows(3, |r, c| (r + c) as f64));
        let (h, _) = encode(&mut tape, &p, &bound, obs, &state);
        assert!(tape.value(h).as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn identical_observations_give_identical_outputs() {
        for variant in [ScoringVariant::Gat, ScoringVariant::Gatv2, ScoringVariant::Mean] {
            let p = PolicyParams::init(small(variant), 1);
            let obs = obs_rows(4, |_, c| c as f64 * 0.3 - 0.5);
            let (tape, out) = step(&p, &obs, &[true; 4]);
            let logits = tape.value(out.logits);
            for r in 1..4 {
                assert_eq!(logits.row(r), logits.row(0));
            }
            for layer in &out.attention {
                for a in layer {
                    // Homogeneous features make every attention row uniform.
                    assert!(tape.value(*a).as_slice().iter().all(|x| (x - 0.25).abs() < 1e-12));
                }
            }
            assert_eq!(tape.shape(out.values), (4, 1));
        }
    }

    #[test]
    fn layer_shapes_follow_head_counts() {
        let mut cfg = small(ScoringVariant::Gat);
        cfg.heads_layer1 = 4;
        let p = PolicyParams::init(cfg, 2);
        let (_, out) = step(&p, &obs_rows(3, |r, c| (r * c) as f64 * 0.1), &[true; 3]);
        assert_eq!(out.attention[0].len(), 4);
        assert_eq!(out.attention[1].len(), 1);
    }

    #[test]
    fn attention_rows_are_stochastic_and_respect_mask() {
        let p = PolicyParams::init(small(ScoringVariant::Gatv2), 3);
        let obs = obs_rows(4, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let active = [true, false, true, true];
        let (tape, out) = step(&p, &obs, &active);
        for layer in &out.attention {
            for a in layer {
                let m = tape.value(*a);
                for i in 0..4 {
                    assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert_eq!(m.get(i, 1), if i == 1 { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn permuting_agents_permutes_outputs() {
        let p = PolicyParams::init(small(ScoringVariant::Gat), 4);
        let obs = obs_rows(3, |r, c| ((r * 5 + c) % 7) as f64 * 0.2 - 0.6);
        let perm = [2, 0, 1];
        let permuted = Matrix::from_fn(3, 5, |r, c| obs.get(perm[r], c));
        let (t1, o1) = step(&p, &obs, &[true; 3]);
        let (t2, o2) = step(&p, &permuted, &[true; 3]);
        for r in 0..3 {
            assert_eq!(t2.value(o2.logits).row(r), t1.value(o1.logits).row(perm[r]));
            for c in 0..3 {
                assert_eq!(t2.value(o2.attention[0][1]).get(r, c), t1.value(o1.attention[0][1]).get(perm[r], perm[c]));
            }
        }
    }

    #[test]
    fn gat_scores_separate_into_query_and_key_parts() {
        let p = PolicyParams::init(small(ScoringVariant::Gat), 5);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let h = tape.constant(Matrix::from_fn(4, 6, |r, c| ((r * 3 + c * 5) % 7) as f64 * 0.4 - 1.2));
        let m = head_messages(&mut tape, &p, &bound, 0, 0, h);
        let e = gat_scores(&mut tape, &p, &bound, 0, 0, h, m);
        let pre = tape.value(e).map(|y| if y >= 0.0 { y } else { y / 0.2 });
        // Pre-activation scores are s_i + t_j, so row differences do not depend on j.
        for i in 1..4 {
            let d0 = pre.get(i, 0) - pre.get(0, 0);
            for j in 1..4 {
                assert!((pre.get(i, j) - pre.get(0, j) - d0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_scoring_vector_gives_zero_scores() {
        let mut p = PolicyParams::init(small(ScoringVariant::Gat), 6);
        let idx = p.layer(0).heads[0].att.unwrap();
        p.tensors_mut()[idx] = Matrix::zeros(6, 1);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let h = tape.constant(Matrix::from_fn(3, 6, |r, c| (r + c) as f64));
        let m = head_messages(&mut tape, &p, &bound, 0, 0, h);
        let e = gat_scores(&mut tape, &p, &bound, 0, 0, h, m);
        assert!(tape.value(e).as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn aggregation_special_cases() {
        let mut tape = Tape::new();
        let msgs = tape.constant(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap());
        let id = tape.constant(Matrix::identity(3));
        let out = aggregate(&mut tape, &[id], &[msgs]);
        assert_eq!(tape.value(out), tape.value(msgs));
        let uni = tape.constant(Matrix::filled(3, 3, 1.0 / 3.0));
        let out = aggregate(&mut tape, &[uni], &[msgs]);
        for r in 0..3 {
            assert!((tape.value(out).get(r, 0) - 3.0).abs() < 1e-12);
            assert!((tape.value(out).get(r, 1) - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_score_dominates_attention() {
        let mut tape = Tape::new();
        let s = tape.constant(Matrix::from_rows(&[&[0.0, 20.0, 0.0]]).unwrap());
        let a = attention(&mut tape, s, &[true; 3]);
        assert!(tape.value(a).get(0, 1) >= 1.0 - 1e-8);
    }

    #[test]
    fn two_chained_steps_match_state_round_trip() {
        let p = PolicyParams::init(small(ScoringVariant::Gat), 7);
        let obs1 = obs_rows(3, |r, c| (r + c) as f64 * 0.1);
        let obs2 = obs_rows(3, |r, c| (r * c) as f64 * 0.2 - 0.3);
        let active = [true; 3];
        // One tape across both steps.
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let s0 = StateSnapshot::zeros(p.config(), 3).to_tape(&mut tape);
        let o1 = forward(&mut tape, &p, &bound, &obs1, &active, &s0);
        let o2 = forward(&mut tape, &p, &bound, &obs2, &active, &o1.state);
        // Fresh tape per step, state carried as a snapshot.
        let (t1, r1) = step(&p, &obs1, &active);
        let snap = StateSnapshot::from_tape(&t1, &r1.state);
        let mut t2 = Tape::new();
        let b2 = p.bind(&mut t2);
        let s1 = snap.to_tape(&mut t2);
        let r2 = forward(&mut t2, &p, &b2, &obs2, &active, &s1);
        assert_eq!(tape.value(o2.logits), t2.value(r2.logits));
    }

    #[test]
    fn load_tensors_rejects_mismatch() {
        let mut p = PolicyParams::init(small(ScoringVariant::Gat), 8);
        let mut named: Vec<(String, Matrix)> = p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect();
        named[0].1 = Matrix::zeros(1, 1);
        assert!(p.load_tensors(named).unwrap_err().contains("shape"));
    }
}

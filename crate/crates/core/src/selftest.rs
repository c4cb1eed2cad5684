//! Numerical self-checks: the closed-form and oracle comparisons, gradient checks
//! against central differences, and structural invariants of the attention
//! tensors. Each check reports its measured value next to its threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjacency::{self, ntnn, tube_softmax, AdjacencyTensor};
use crate::autodiff::{grad_check, Tape, Value};
use crate::linalg::{self, nuclear_norm, Matrix};
use crate::oracle;
use crate::policy::{self, Bound, Layer2Input, PolicyConfig, PolicyParams, ScoringVariant, StateSnapshot};
use crate::training::Rmsprop;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    /// Worst observed error (or the checked quantity).
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] {}: measured {:.3e}, threshold {:.1e} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold,
            self.detail
        )
    }
}

fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

fn row_stochastic(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let m = random(n, n, 0.0, 1.0, rng);
    Matrix::from_fn(n, n, |r, c| m.get(r, c) / m.row(r).iter().sum::<f64>())
}

/// Smallest distance between consecutive singular values, counting the last one's
/// distance to zero.
pub fn singular_gap(sigma: &[f64]) -> f64 {
    let mut gap = sigma.last().copied().unwrap_or(f64::INFINITY);
    for w in sigma.windows(2) {
        gap = gap.min(w[0] - w[1]);
    }
    gap
}

/// The two-agent, two-head family on a 0.01 grid: the maximum must be 2.0, reached
/// only where the heads attend to opposite agents.
pub fn appendix_oracle() -> Check {
    let tol = 1e-9;
    let g = oracle::appendix_grid_search(100, tol);
    let expected = [(0.0, 1.0), (1.0, 0.0)];
    let mut argmax = g.argmax.clone();
    argmax.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at_points = expected
        .iter()
        .map(|&(x, y)| (ntnn(&oracle::appendix_tensor(x, y)).unwrap() - 2.0).abs())
        .fold(0.0, f64::max);
    let err = (g.max_value - 2.0).abs().max(at_points);
    let passed = err <= tol && argmax == expected && g.max_closed_form_error <= tol;
    Check {
        name: "appendix grid maximum",
        measured: err,
        threshold: tol,
        passed,
        detail: format!(
            "max {:.12} at {:?} over {} points, closed-form gap {:.1e}",
            g.max_value, argmax, g.evaluated, g.max_closed_form_error
        ),
    }
}

/// Single-head NTNN against the matrix nuclear norm, and the identity's norm.
pub fn single_head_reduction(samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let n = rng.random_range(1..=8);
        let m = random(n, n, -1.0, 1.0, &mut rng);
        let t = AdjacencyTensor::from_slices(std::slice::from_ref(&m)).unwrap();
        worst = worst.max((ntnn(&t).unwrap() - nuclear_norm(&m).unwrap()).abs());
    }
    let mut ident: f64 = 0.0;
    for n in 1..=10 {
        let t = AdjacencyTensor::from_slices(&[Matrix::identity(n)]).unwrap();
        ident = ident.max((ntnn(&t).unwrap() - n as f64).abs());
    }
    Check {
        name: "single-head reduction",
        measured: worst,
        threshold: 0.0,
        passed: worst == 0.0 && ident <= 1e-12,
        detail: format!("{samples} random matrices; identity error {ident:.1e}"),
    }
}

/// Nuclear norm from the Jacobi SVD against eigenvalues of the Gram matrix.
pub fn svd_oracle(samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let m = random(r, c, -1.0, 1.0, &mut rng);
        let a = nuclear_norm(&m).unwrap();
        let b = oracle::nuclear_norm_via_gram(&m);
        worst = worst.max((a - b).abs() / b.abs().max(1e-300));
    }
    Check {
        name: "svd vs gram eigenvalues",
        measured: worst,
        threshold: 1e-8,
        passed: worst <= 1e-8,
        detail: format!("{samples} matrices up to 6x6, relative error"),
    }
}

fn relative(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(crate::autodiff::GRAD_CHECK_FLOOR)
}

/// Nuclear-norm subgradient against central differences at matrices whose
/// singular values are at least 0.1 apart and from zero.
pub fn nuclear_norm_gradient(samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut done, mut checked) = (0.0f64, 0, 0);
    let h = 1e-6;
    while done < samples {
        let (r, c) = (rng.random_range(2..=6), rng.random_range(2..=6));
        let m = random(r, c, -1.0, 1.0, &mut rng);
        if singular_gap(&linalg::svd(&m).unwrap().sigma) < 0.1 {
            continue;
        }
        done += 1;
        let g = linalg::nuclear_norm_subgradient(&m).unwrap();
        let mut w = m.clone();
        for e in 0..m.len() {
            let x = m.as_slice()[e];
            w.as_mut_slice()[e] = x + h;
            let p = nuclear_norm(&w).unwrap();
            w.as_mut_slice()[e] = x - h;
            let q = nuclear_norm(&w).unwrap();
            w.as_mut_slice()[e] = x;
            worst = worst.max(relative(g.as_slice()[e], (p - q) / (2.0 * h)));
            checked += 1;
        }
    }
    Check {
        name: "nuclear-norm subgradient",
        measured: worst,
        threshold: 1e-4,
        passed: worst <= 1e-4,
        detail: format!("{samples} matrices, {checked} entries"),
    }
}

/// Backward pass of the tape's NTNN node (tube softmax included) against central
/// differences, at tensors whose normalized slices have singular gaps of at least 0.1.
pub fn ntnn_node_gradient(samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut done, mut checked, mut excluded) = (0.0f64, 0, 0, 0);
    while done < samples {
        let n = rng.random_range(2..=4);
        let k = rng.random_range(1..=3);
        let slices: Vec<Matrix> = (0..k).map(|_| random(n, n, -3.0, 3.0, &mut rng)).collect();
        let t = AdjacencyTensor::from_slices(&slices).unwrap();
        let norm = if k >= 2 { tube_softmax(&t).unwrap() } else { t };
        let (_, _, gap) = adjacency::ntnn_with_subgradient(&norm).unwrap();
        if gap < 0.1 {
            continue;
        }
        done += 1;
        let r = grad_check(&slices, 1e-6, |tape, vals| tape.ntnn(vals, None, true).unwrap());
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        excluded += r.excluded;
    }
    Check {
        name: "ntnn node backward",
        measured: worst,
        threshold: 1e-4,
        passed: worst <= 1e-4 && excluded == 0 && checked > 0,
        detail: format!("{samples} tensors, {checked} entries, {excluded} excluded"),
    }
}

fn tiny_policy_config(variant: ScoringVariant) -> PolicyConfig {
    PolicyConfig {
        obs_dim: 5,
        n_actions: 3,
        hidden: 4,
        head_dim: 3,
        heads_layer1: 2,
        heads_layer2: 1,
        head_hidden: 4,
        variant,
        leaky_slope: 0.2,
        layer2_input: Layer2Input::Aggregated,
    }
}

struct PolicyProblem {
    params: PolicyParams,
    obs: Vec<Matrix>,
    actions: Vec<Vec<usize>>,
    adv: Vec<Matrix>,
    targets: Vec<Matrix>,
}

/// Two-step loss through the whole network: policy-gradient, value and both
/// tube-normalized regularizer terms.
fn policy_loss(tape: &mut Tape, problem: &PolicyProblem, leaves: &[Value]) -> Value {
    let p = &problem.params;
    let bound = Bound { leaves: leaves.to_vec() };
    let n = problem.obs[0].rows();
    let active = vec![true; n];
    let mut state = StateSnapshot::zeros(p.config(), n).to_tape(tape);
    let mut terms = Vec::new();
    for t in 0..problem.obs.len() {
        let out = policy::forward(tape, p, &bound, &problem.obs[t], &active, &state);
        let lp = tape.log_softmax_rows(out.logits);
        let picked = tape.pick(lp, &problem.actions[t]);
        let adv = tape.constant(problem.adv[t].clone());
        let pg = tape.mul(picked, adv);
        terms.push(tape.sum(pg));
        let target = tape.constant(problem.targets[t].clone());
        let d = tape.sub(out.values, target);
        let sq = tape.square(d);
        terms.push(tape.sum(sq));
        for (l, coef) in [(0usize, 0.5), (1, 0.25)] {
            let v = tape.ntnn(&out.attention[l], None, true).expect("valid attention");
            terms.push(tape.scale(v, -coef));
        }
        state = out.state;
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

/// Builds a two-agent problem whose attention tensors have singular gaps of at
/// least 0.1 at every step. Freshly initialized attention is close to rank one,
/// so the parameters are first moved by gradient ascent on the regularizer until
/// the gaps open up.
fn find_policy_problem(variant: ScoringVariant, seed: u64) -> Option<(PolicyProblem, u64)> {
    let n = 2;
    for attempt in 0..20u64 {
        let s = seed.wrapping_add(attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut problem = PolicyProblem {
            obs: (0..2).map(|_| random(n, 5, -2.0, 2.0, &mut rng)).collect(),
            actions: (0..2).map(|_| (0..n).map(|_| rng.random_range(0..3)).collect()).collect(),
            adv: (0..2).map(|_| random(n, 1, -1.0, 1.0, &mut rng)).collect(),
            targets: (0..2).map(|_| random(n, 1, -1.0, 1.0, &mut rng)).collect(),
            params: PolicyParams::init(tiny_policy_config(variant), s),
        };
        let mut opt = Rmsprop::new(&problem.params, 0.02, 0.9, 1e-8);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let bound = problem.params.bind(&mut tape);
            let reg = regularizer_only(&mut tape, &problem, &bound);
            if tape.min_singular_gap() >= 0.1 {
                return Some((problem, s));
            }
            tape.backward(reg);
            let grads: Vec<Matrix> = bound
                .leaves
                .iter()
                .zip(problem.params.tensors())
                .map(|(l, m)| tape.grad(*l).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
                .collect();
            opt.step(&mut problem.params, &grads);
        }
    }
    None
}

fn regularizer_only(tape: &mut Tape, problem: &PolicyProblem, bound: &Bound) -> Value {
    let p = &problem.params;
    let n = problem.obs[0].rows();
    let mut state = StateSnapshot::zeros(p.config(), n).to_tape(tape);
    let mut acc = tape.constant(Matrix::zeros(1, 1));
    for obs in &problem.obs {
        let out = policy::forward(tape, p, bound, obs, &vec![true; n], &state);
        for heads in &out.attention {
            let v = tape.ntnn(heads, None, true).expect("valid attention");
            acc = tape.sub(acc, v);
        }
        state = out.state;
    }
    acc
}

/// Whole-network gradient against central differences.
pub fn policy_gradient(seed: u64) -> Check {
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    let mut ok = true;
    for variant in [ScoringVariant::Gat, ScoringVariant::Gatv2] {
        let Some((problem, s)) = find_policy_problem(variant, seed) else {
            ok = false;
            notes.push(format!("{variant:?}: no seed with singular gaps >= 0.1"));
            continue;
        };
        let r = grad_check(problem.params.tensors(), 1e-6, |tape, vals| policy_loss(tape, &problem, vals));
        worst = worst.max(r.max_rel_error);
        ok &= r.checked > 0;
        notes.push(format!("{variant:?} seed {s}: {} entries, {} excluded", r.checked, r.excluded));
    }
    Check {
        name: "full policy gradient",
        measured: worst,
        threshold: 1e-3,
        passed: ok && worst <= 1e-3,
        detail: notes.join("; "),
    }
}

/// Row-stochastic attention, unit tube sums after normalization and the
/// `N sqrt(N / K)` bound over random forward passes.
pub fn attention_invariants(passes: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut row_err, mut tube_err, mut bound_excess) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    let variants = [ScoringVariant::Gat, ScoringVariant::Gatv2, ScoringVariant::Mean];
    for pass in 0..passes {
        let n = rng.random_range(2..=6);
        let mut cfg = tiny_policy_config(variants[pass % 3]);
        cfg.heads_layer1 = rng.random_range(1..=4);
        let mut params = PolicyParams::init(cfg, rng.random());
        let scale = rng.random_range(0.5..6.0);
        params.tensors_mut().iter_mut().for_each(|m| *m = m.scale(scale));
        let obs = random(n, 5, -3.0, 3.0, &mut rng);
        let mut active: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        active[rng.random_range(0..n)] = true;
        let agents: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let state = StateSnapshot::zeros(params.config(), n).to_tape(&mut tape);
        let out = policy::forward(&mut tape, &params, &bound, &obs, &active, &state);
        for heads in &out.attention {
            let slices: Vec<Matrix> = heads.iter().map(|h| tape.value(*h).clone()).collect();
            let t = AdjacencyTensor::from_slices(&slices).unwrap();
            row_err = row_err.max(t.row_stochastic_error().unwrap_or(f64::INFINITY));
            let r = t.restrict(&agents).unwrap();
            let k = r.n_heads();
            let norm = if k >= 2 {
                let u = tube_softmax(&r).unwrap();
                tube_err = tube_err.max(u.tube_sum_error());
                u
            } else {
                r
            };
            let na = agents.len() as f64;
            bound_excess = bound_excess.max(ntnn(&norm).unwrap() - na * (na / k as f64).sqrt());
        }
    }
    let worst = row_err.max(tube_err);
    Check {
        name: "attention invariants",
        measured: worst,
        threshold: 1e-9,
        passed: worst <= 1e-9 && bound_excess <= 1e-9,
        detail: format!(
            "{passes} passes; row-sum error {row_err:.1e}, tube-sum error {tube_err:.1e}, \
             largest ntnn - N sqrt(N/K) = {bound_excess:.3}"
        ),
    }
}

/// `ntnn(A + B) <= ntnn(A) + ntnn(B)` for random row-stochastic tensors.
pub fn triangle_inequality(pairs: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let n = rng.random_range(2..=6);
        let k = rng.random_range(1..=4);
        let a: Vec<Matrix> = (0..k).map(|_| row_stochastic(n, &mut rng)).collect();
        let b: Vec<Matrix> = (0..k).map(|_| row_stochastic(n, &mut rng)).collect();
        let sum: Vec<Matrix> = a.iter().zip(&b).map(|(x, y)| x.add(y).unwrap()).collect();
        let f = |s: &[Matrix]| ntnn(&AdjacencyTensor::from_slices(s).unwrap()).unwrap();
        worst = worst.max(f(&sum) - f(&a) - f(&b));
    }
    Check {
        name: "triangle inequality",
        measured: worst.max(0.0),
        threshold: 1e-9,
        passed: worst <= 1e-9,
        detail: format!("{pairs} pairs, largest ntnn(A+B) - ntnn(A) - ntnn(B) = {worst:.3e}"),
    }
}

/// Every check at its default sample size.
pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        appendix_oracle(),
        single_head_reduction(100, seed),
        svd_oracle(200, seed),
        nuclear_norm_gradient(20, seed),
        ntnn_node_gradient(20, seed),
        policy_gradient(seed),
        attention_invariants(1000, seed),
        triangle_inequality(500, seed),
    ]
}

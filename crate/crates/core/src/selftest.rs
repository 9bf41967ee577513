//! Built-in oracle checks on small graphs.
//!
//! Every check compares a library quantity against an independent reference:
//! dense linear algebra, exhaustive enumeration, grid search, Monte-Carlo
//! averages or central finite differences.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::estimator::{
    full_forward, sampled_forward, skip_weights, Activation, ForwardOptions, GraphInputs, ModelParams, ParamVars,
    QGradient, SkipEstimate,
};
use crate::graph::NormalizedGraph;
use crate::sampler::{
    adaptive_layer_sample, attention_graph, build_network_plan, exhaustive_layer, iid_layer_sample, node_wise_sample,
    NodeWiseMode, SamplerParams, SamplingInputs, Strategy,
};
use crate::tensor::{DenseMatrix, Norm, SparseMatrix, Tape, Var};
use crate::variance::{
    expectation_exact, hybrid_loss, optimal_sampler, relative_error, sampler_gradient_checks, variance_empirical,
    variance_exact, variance_penalty, GradientForm,
};

/// Settings of a selftest run.
#[derive(Debug, Clone)]
pub struct SelftestOptions {
    /// Run only checks whose group or name contains this string.
    pub filter: Option<String>,
    /// Closed form used for the variance-gradient check.
    pub gradient_form: GradientForm,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            filter: None,
            gradient_form: GradientForm::Correct,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub group: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type CheckFn = fn(&SelftestOptions) -> Result<(bool, String)>;

/// `(group, name, check)` for every built-in check.
pub const CHECKS: &[(&str, &str, CheckFn)] = &[
    ("variance", "expectation_invariant_to_q", check_expectation_invariance),
    ("variance", "optimal_sampler_grid_search", check_optimal_grid),
    ("variance", "empirical_variance_monte_carlo", check_empirical_variance),
    ("variance", "variance_gradient_closed_form", check_variance_gradient),
    ("variance", "sampler_gradient_chain_rule", check_sampler_chain_rule),
    ("gradients", "tape_ops_finite_differences", check_tape_ops),
    ("gradients", "end_to_end_finite_differences", check_end_to_end),
    ("estimators", "full_support_equivalence", check_full_support),
    ("estimators", "skip_weight_exactness", check_skip_weights),
    ("samplers", "draw_frequencies", check_draw_frequencies),
];

/// Runs the selected checks. Errors inside a check count as failures.
pub fn run(options: &SelftestOptions) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|(group, name, _)| {
            options
                .filter
                .as_deref()
                .is_none_or(|f| group.contains(f) || name.contains(f))
        })
        .map(|&(group, name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check(options) {
                Ok(outcome) => outcome,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                group,
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

/// Toy graph with a hub, a triangle and a pendant path.
pub fn toy_graph() -> NormalizedGraph {
    NormalizedGraph::from_edges(
        8,
        &[(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (4, 5), (5, 6), (6, 7), (2, 6)],
    )
}

fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseMatrix::new(rows, cols, data).expect("sized data")
}

/// Entries bounded away from zero, so that kinks stay out of finite-difference reach.
fn away_from_zero<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    DenseMatrix::new(rows, cols, data).expect("sized data")
}

fn check_expectation_invariance(opts: &SelftestOptions) -> Result<(bool, String)> {
    let g = toy_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = random_matrix(g.num_nodes(), 3, &mut rng);
    let mut worst: f64 = 0.0;
    for v in 0..g.num_nodes() {
        let p: Vec<f64> = (0..g.num_nodes())
            .map(|u| g.conditional_prob(v, u))
            .collect::<Result<_>>()?;
        let a = h.row_l2_norms();
        let normalise = |w: Vec<f64>| -> Vec<f64> {
            let t: f64 = w.iter().sum();
            w.into_iter().map(|x| x / t).collect()
        };
        let qs = [
            vec![1.0 / g.num_nodes() as f64; g.num_nodes()],
            p.iter().map(|x| 0.5 * x + 0.5 / g.num_nodes() as f64).collect(),
            normalise(p.iter().zip(&a).map(|(p, a)| p * a + 1e-3).collect()),
            normalise((0..g.num_nodes()).map(|_| rng.random_range(0.01..1.0)).collect()),
            normalise((0..g.num_nodes()).map(|u| 1.0 + u as f64).collect()),
        ];
        let reference: Vec<f64> = (0..h.cols())
            .map(|c| (0..g.num_nodes()).map(|u| p[u] * h.get(u, c)).sum())
            .collect();
        for q in &qs {
            for (x, y) in expectation_exact(&p, &h, q)?.iter().zip(&reference) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok((
        worst <= 1e-10,
        format!("max deviation {worst:.3e} over 5 samplers, tolerance 1e-10"),
    ))
}

/// Interior points `c / m` of the simplex with positive integer parts summing to `m`.
fn simplex_grid(dim: usize, m: usize) -> Vec<Vec<f64>> {
    fn rec(dim: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if dim == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for c in 1..=left - (dim - 1) {
            prefix.push(c);
            rec(dim - 1, left - c, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, m, &mut Vec::new(), &mut out);
    out.into_iter()
        .map(|c| c.into_iter().map(|x| x as f64 / m as f64).collect())
        .collect()
}

fn check_optimal_grid(opts: &SelftestOptions) -> Result<(bool, String)> {
    // Hub with four leaves: the hub's neighbourhood has exactly five nodes.
    let g = NormalizedGraph::from_edges(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let p: Vec<f64> = (0..5).map(|u| g.conditional_prob(0, u)).collect::<Result<_>>()?;
    let a: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..2.0)).collect();
    let n = 3;
    let q_star = optimal_sampler(&p, &a);
    let v_star = variance_exact(&p, &a, &q_star, n)?;
    let grid = simplex_grid(5, 15);
    let mut margin = f64::INFINITY;
    let mut violations = 0;
    for q in &grid {
        let v = variance_exact(&p, &a, q, n)?;
        margin = margin.min(v - v_star);
        let dist = q.iter().zip(&q_star).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if v < v_star && dist > 1e-9 {
            violations += 1;
        }
    }
    // Gradient of the exact variance at q*, projected onto the simplex tangent space.
    let grad: Vec<f64> = (0..5)
        .map(|u| -(p[u] * a[u]).powi(2) / (q_star[u] * q_star[u] * n as f64))
        .collect();
    let mean = grad.iter().sum::<f64>() / 5.0;
    let projected = grad.iter().map(|g| (g - mean).abs()).fold(0.0, f64::max);
    let passed = violations == 0 && margin >= 0.0 && projected <= 1e-6;
    Ok((
        passed,
        format!(
            "{} grid points, min margin {margin:.3e}, projected gradient {projected:.3e}",
            grid.len()
        ),
    ))
}

fn check_empirical_variance(opts: &SelftestOptions) -> Result<(bool, String)> {
    let g = toy_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let v = 0;
    let (cols, _) = g.neighbors(v);
    let p: Vec<f64> = cols.iter().map(|&u| g.conditional_prob(v, u)).collect::<Result<_>>()?;
    let a: Vec<f64> = cols.iter().map(|_| rng.random_range(0.2..3.0)).collect();
    let q: Vec<f64> = {
        let w: Vec<f64> = (0..cols.len()).map(|k| 1.0 + k as f64).collect();
        let t: f64 = w.iter().sum();
        w.into_iter().map(|x| x / t).collect()
    };
    let n = 6;
    let exact = variance_exact(&p, &a, &q, n)?;
    let dist = WeightedIndex::new(&q).expect("positive weights");
    let trials = 100_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let (mut sp, mut sa, mut sq) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for _ in 0..trials {
        for j in 0..n {
            let k = dist.sample(&mut rng);
            sp[j] = p[k];
            sa[j] = a[k];
            sq[j] = q[k];
        }
        let x = variance_empirical(&sp, &sa, &sq)? * n as f64 / (n - 1) as f64;
        sum += x;
        sum_sq += x * x;
    }
    let mean = sum / trials as f64;
    let se = ((sum_sq / trials as f64 - mean * mean) / trials as f64).sqrt();
    let z = (mean - exact) / se;
    let literal = mean * (n - 1) as f64 / n as f64;
    Ok((
        z.abs() <= 3.0,
        format!(
            "exact {exact:.6e}, rescaled mean {mean:.6e} (z = {z:.2}), unscaled mean {literal:.6e} = {:.4} x exact",
            literal / exact
        ),
    ))
}

fn gradient_fixture(opts: &SelftestOptions) -> (NormalizedGraph, DenseMatrix, SamplerParams, DenseMatrix) {
    let g = toy_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x = random_matrix(g.num_nodes(), 4, &mut rng).map(f64::abs);
    let params = SamplerParams::new(away_from_zero(1, 4, &mut rng).map(f64::abs));
    let h = random_matrix(g.num_nodes(), 3, &mut rng);
    (g, x, params, h)
}

fn check_variance_gradient(opts: &SelftestOptions) -> Result<(bool, String)> {
    let (g, x, params, h) = gradient_fixture(opts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 1);
    let report = sampler_gradient_checks(&g, &x, &params, &[0, 5], &h, 6, opts.gradient_form, &mut rng)?;
    Ok((
        report.q_gradient_error <= 1e-5 && report.expectation_spread <= 1e-10,
        format!(
            "closed form vs finite differences: {:.3e} (tolerance 1e-5); half-size form off by a factor {:.3}",
            report.q_gradient_error, report.verbatim_ratio
        ),
    ))
}

fn check_sampler_chain_rule(opts: &SelftestOptions) -> Result<(bool, String)> {
    let (g, x, params, h) = gradient_fixture(opts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 2);
    let report = sampler_gradient_checks(&g, &x, &params, &[0, 5, 7], &h, 5, GradientForm::Correct, &mut rng)?;
    Ok((
        report.w_g_gradient_error <= 1e-4,
        format!(
            "W_g gradient vs finite differences: {:.3e} (tolerance 1e-4)",
            report.w_g_gradient_error
        ),
    ))
}

/// Largest relative error between tape gradients of `f` and central differences
/// (step `1e-5`) over every entry of every input.
pub fn finite_difference_check(inputs: &[DenseMatrix], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let eval = |values: &[DenseMatrix]| -> Result<f64> {
        let mut t = Tape::new();
        let v: Vec<Var> = values.iter().map(|m| t.param(m.clone())).collect();
        let o = f(&mut t, &v)?;
        Ok(t.value(o).item())
    };
    let step = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, m) in inputs.iter().enumerate() {
        let g = grads.get_or_zeros(vars[k], m);
        for idx in 0..m.len() {
            let mut up = inputs.to_vec();
            up[k].data_mut()[idx] += step;
            let mut down = inputs.to_vec();
            down[k].data_mut()[idx] -= step;
            numeric.push((eval(&up)? - eval(&down)?) / (2.0 * step));
            analytic.push(g.data()[idx]);
        }
    }
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n, scale))
        .fold(0.0, f64::max))
}

type OpCase = (
    &'static str,
    Vec<DenseMatrix>,
    Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
);

fn check_tape_ops(opts: &SelftestOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sparse = SparseMatrix::from_triplets(
        4,
        5,
        &[
            (0, 1, 0.5),
            (0, 4, -1.0),
            (1, 0, 2.0),
            (2, 2, 0.25),
            (2, 3, 1.5),
            (3, 4, -0.75),
        ],
    )?;
    let pattern = sparse.pattern().clone();
    let labels = [2usize, 0, 1, 2];
    let s2 = sparse.clone();
    let pat = pattern.clone();
    let cases: Vec<OpCase> = vec![
        (
            "matmul",
            vec![random_matrix(5, 7, &mut rng), random_matrix(7, 3, &mut rng)],
            Box::new(|t, v| {
                let m = t.matmul(v[0], v[1])?;
                t.sum(m)
            }),
        ),
        (
            "transpose",
            vec![random_matrix(3, 4, &mut rng), random_matrix(3, 4, &mut rng)],
            Box::new(|t, v| {
                let a = t.transpose(v[0])?;
                let m = t.matmul(v[1], a)?;
                let s = t.square(m)?;
                t.sum(s)
            }),
        ),
        (
            "spmm",
            vec![random_matrix(5, 3, &mut rng)],
            Box::new(move |t, v| {
                let m = t.spmm(&s2, v[0])?;
                let s = t.square(m)?;
                t.sum(s)
            }),
        ),
        (
            "spmm_weighted",
            vec![random_matrix(pattern.nnz(), 1, &mut rng), random_matrix(5, 3, &mut rng)],
            Box::new(move |t, v| {
                let m = t.spmm_weighted(&pat, v[0], v[1])?;
                let s = t.square(m)?;
                t.sum(s)
            }),
        ),
        (
            "add_sub_mul",
            vec![random_matrix(3, 3, &mut rng), random_matrix(3, 3, &mut rng)],
            Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(v[0], v[1])?;
                let m = t.mul(a, b)?;
                t.sum(m)
            }),
        ),
        (
            "div",
            vec![random_matrix(3, 2, &mut rng), away_from_zero(3, 2, &mut rng)],
            Box::new(|t, v| {
                let d = t.div(v[0], v[1])?;
                t.sum(d)
            }),
        ),
        (
            "scale_mean",
            vec![random_matrix(4, 2, &mut rng)],
            Box::new(|t, v| {
                let s = t.scale(v[0], -2.5)?;
                let q = t.square(s)?;
                t.mean(q)
            }),
        ),
        (
            "mul_scalar",
            vec![random_matrix(3, 2, &mut rng), random_matrix(1, 1, &mut rng)],
            Box::new(|t, v| {
                let m = t.mul_scalar(v[0], v[1])?;
                let s = t.square(m)?;
                t.sum(s)
            }),
        ),
        (
            "mul_rows",
            vec![random_matrix(3, 4, &mut rng), random_matrix(3, 1, &mut rng)],
            Box::new(|t, v| {
                let m = t.mul_rows(v[0], v[1])?;
                let s = t.square(m)?;
                t.sum(s)
            }),
        ),
        (
            "relu_abs",
            vec![away_from_zero(4, 3, &mut rng), random_matrix(4, 3, &mut rng)],
            Box::new(|t, v| {
                let r = t.relu(v[0])?;
                let a = t.abs(v[0])?;
                let m = t.mul(r, v[1])?;
                let n = t.mul(a, v[1])?;
                let s = t.add(m, n)?;
                t.sum(s)
            }),
        ),
        (
            "gather_rows",
            vec![random_matrix(4, 2, &mut rng), random_matrix(5, 2, &mut rng)],
            Box::new(|t, v| {
                let g = t.gather_rows(v[0], &[3, 0, 3, 1, 2])?;
                let m = t.mul(g, v[1])?;
                t.sum(m)
            }),
        ),
        (
            "row_norm",
            vec![away_from_zero(4, 3, &mut rng), random_matrix(4, 1, &mut rng)],
            Box::new(|t, v| {
                let l2 = t.row_norm(v[0], Norm::L2)?;
                let l1 = t.row_norm(v[0], Norm::L1)?;
                let s = t.add(l2, l1)?;
                let m = t.mul(s, v[1])?;
                t.sum(m)
            }),
        ),
        (
            "softmax_rows",
            vec![random_matrix(3, 4, &mut rng), random_matrix(3, 4, &mut rng)],
            Box::new(|t, v| {
                let s = t.softmax_rows(v[0])?;
                let m = t.mul(s, v[1])?;
                t.sum(m)
            }),
        ),
        (
            "cross_entropy",
            vec![random_matrix(4, 3, &mut rng)],
            Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
        ),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    for (name, inputs, f) in &cases {
        let err = finite_difference_check(inputs, f.as_ref())?;
        if err > worst.0 {
            worst = (err, name);
        }
    }
    Ok((
        worst.0 <= 1e-4,
        format!(
            "{} ops, worst relative error {:.3e} ({}), tolerance 1e-4",
            cases.len(),
            worst.0,
            worst.1
        ),
    ))
}

fn check_end_to_end(opts: &SelftestOptions) -> Result<(bool, String)> {
    let g = toy_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x = random_matrix(g.num_nodes(), 5, &mut rng).map(f64::abs);
    let inputs = GraphInputs::new(g, SparseMatrix::from_dense(&x))?;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (attention, skip) in [(false, false), (false, true), (true, false), (true, true)] {
        let mut params = ModelParams::init(5, &[4], 3, &mut rng)?;
        params.sampler.w_g = params.sampler.w_g.map(|v| v.abs() + 0.1);
        params.sampler.w1 = 0.8;
        params.sampler.w2 = 0.6;
        let options = ForwardOptions {
            activation: Activation::Relu,
            skip: skip.then_some(SkipEstimate::Corrected),
            attention: attention.then_some(4),
            q_gradient: QGradient::Pathwise,
        };
        let scores = params.sampler.scores(&inputs.features)?;
        let sampling_graph = if attention {
            attention_graph(&inputs.graph, &scores, &params.sampler, 4)?.0
        } else {
            inputs.graph.clone()
        };
        let sampling = SamplingInputs {
            graph: &sampling_graph,
            features: &inputs.features,
            params: &params.sampler,
            node_wise_mode: NodeWiseMode::Uniform,
        };
        let plan = build_network_plan(sampling, &[0, 3, 6], &[4, 4], Strategy::Adaptive, &mut rng)?;
        let labels = [1usize, 0, 2];
        let template = params.clone();
        let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let mut p = template.clone();
            p.gcn.filters = vec![t.value(v[0]).clone(), t.value(v[1]).clone()];
            p.sampler.w_g = t.value(v[2]).clone();
            p.sampler.w1 = t.value(v[3]).item();
            p.sampler.w2 = t.value(v[4]).item();
            let vars = ParamVars {
                filters: vec![v[0], v[1]],
                w_g: v[2],
                w1: v[3],
                w2: v[4],
            };
            let act = sampled_forward(t, &plan, &inputs, &p, &vars, &options)?;
            let penalty = variance_penalty(
                t,
                &plan.layers[0],
                act.hidden.first().copied(),
                &inputs,
                act.slot_q[0],
                Norm::L2,
            )?;
            Ok(hybrid_loss(t, act.logits, &labels, Some(penalty), 0.5)?.0)
        };
        let all = vec![
            params.gcn.filters[0].clone(),
            params.gcn.filters[1].clone(),
            params.sampler.w_g.clone(),
            DenseMatrix::scalar(params.sampler.w1),
            DenseMatrix::scalar(params.sampler.w2),
        ];
        worst = worst.max(finite_difference_check(&all, &f)?);
        cases += 1;
    }
    Ok((
        worst <= 1e-4,
        format!("{cases} configurations (attention, skip), worst relative error {worst:.3e}, tolerance 1e-4"),
    ))
}

fn check_full_support(opts: &SelftestOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let graphs = [
        toy_graph(),
        NormalizedGraph::from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]),
        NormalizedGraph::from_edges(7, &[(0, 1), (2, 3)]),
    ];
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for g in graphs {
        for two_hop in [false, true] {
            let g = if two_hop { g.two_hop(100)? } else { g.clone() };
            let n = g.num_nodes();
            let x = random_matrix(n, 3, &mut rng);
            let inputs = GraphInputs::new(g, SparseMatrix::from_dense(&x))?;
            for skip in [None, Some(SkipEstimate::Verbatim), Some(SkipEstimate::Corrected)] {
                let params = ModelParams::init(3, &[4], 2, &mut rng)?;
                let options = ForwardOptions {
                    skip,
                    ..Default::default()
                };
                let sampling = SamplingInputs {
                    graph: &inputs.graph,
                    features: &inputs.features,
                    params: &params.sampler,
                    node_wise_mode: NodeWiseMode::Uniform,
                };
                let targets: Vec<usize> = (0..n).step_by(2).collect();
                let plan = build_network_plan(sampling, &targets, &[1, 1], Strategy::Full, &mut rng)?;
                let mut tape = Tape::new();
                let vars = ParamVars::register(&mut tape, &params);
                let sampled = sampled_forward(&mut tape, &plan, &inputs, &params, &vars, &options)?;
                let full = full_forward(&mut tape, &inputs, &params, &vars, &options)?;
                let full = tape.value(full).gather_rows(&targets)?;
                worst = worst.max(tape.value(sampled.logits).max_abs_diff(&full));
                cases += 1;
            }
        }
    }
    Ok((
        worst <= 1e-10,
        format!("{cases} cases, max |sampled - full| = {worst:.3e}, tolerance 1e-10"),
    ))
}

fn check_skip_weights(_opts: &SelftestOptions) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for g in [toy_graph(), NormalizedGraph::from_edges(3, &[(0, 1), (1, 2)])] {
        let dense = g.adjacency().to_dense();
        let squared = dense.matmul(&dense)?;
        let parents: Vec<usize> = (0..g.num_nodes()).collect();
        let top = exhaustive_layer(&g, &parents)?;
        let middle = exhaustive_layer(&g, &top.sampled)?;
        for estimate in [SkipEstimate::Verbatim, SkipEstimate::Corrected] {
            let block = skip_weights(&top, &middle, estimate)?.to_dense();
            for (i, &v) in top.parents.iter().enumerate() {
                for (j, &s) in middle.sampled.iter().enumerate() {
                    worst = worst.max((block.get(i, j) - squared.get(v, s)).abs());
                }
            }
        }
    }
    Ok((
        worst <= 1e-12,
        format!("max |estimate - dense square| = {worst:.3e}, tolerance 1e-12"),
    ))
}

/// Largest per-bin z-score of observed counts against a multinomial with probabilities `probs`.
fn max_z(counts: &[usize], probs: &[f64], total: usize) -> f64 {
    counts
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0 && p < 1.0)
        .map(|(&c, &p)| {
            let expected = total as f64 * p;
            (c as f64 - expected).abs() / (total as f64 * p * (1.0 - p)).sqrt()
        })
        .fold(0.0, f64::max)
}

fn check_draw_frequencies(opts: &SelftestOptions) -> Result<(bool, String)> {
    let g = toy_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let draws = 100_000;
    let mut worst: f64 = 0.0;

    let layer = node_wise_sample(&g, &[0], draws, NodeWiseMode::Proportional, &mut rng)?;
    let mut counts = vec![0; g.num_nodes()];
    layer.sampled.iter().for_each(|&u| counts[u] += 1);
    let p: Vec<f64> = (0..g.num_nodes())
        .map(|u| g.conditional_prob(0, u))
        .collect::<Result<_>>()?;
    worst = worst.max(max_z(&counts, &p, draws));

    let layer = iid_layer_sample(&g, &[0, 5], draws, &mut rng)?;
    let cands = layer.candidates().expect("layer-wise");
    let mut counts = vec![0; cands.nodes.len()];
    cands.slot_candidate.iter().for_each(|&c| counts[c] += 1);
    worst = worst.max(max_z(&counts, &cands.distribution, draws));

    let x = SparseMatrix::from_dense(&random_matrix(g.num_nodes(), 3, &mut rng));
    let params = SamplerParams::new(random_matrix(1, 3, &mut rng));
    let layer = adaptive_layer_sample(&g, &[1, 6], &params, &x, draws, &mut rng)?;
    let cands = layer.candidates().expect("layer-wise");
    let mut counts = vec![0; cands.nodes.len()];
    cands.slot_candidate.iter().for_each(|&c| counts[c] += 1);
    worst = worst.max(max_z(&counts, &cands.distribution, draws));

    Ok((
        worst <= 3.0,
        format!("largest per-node z-score {worst:.2} over 1e5 draws per sampler"),
    ))
}

//! Tape gradients of whole training losses against central differences.

mod common;

use common::{positive_matrix, random_matrix, toy};
use lwgcn_core::estimator::{
    full_forward, sampled_forward, Activation, ForwardOptions, GraphInputs, ModelParams, ParamVars, QGradient,
    SkipEstimate,
};
use lwgcn_core::sampler::{attention_graph, build_network_plan, NetworkPlan, NodeWiseMode, SamplingInputs, Strategy};
use lwgcn_core::tensor::{DenseMatrix, Norm, SparseMatrix, Tape};
use lwgcn_core::variance::{hybrid_loss, variance_empirical, variance_empirical_grad, variance_penalty, GradientForm};
use lwgcn_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const LABELS: [usize; 3] = [1, 0, 2];
const TARGETS: [usize; 3] = [0, 3, 6];

fn flatten(p: &ModelParams) -> Vec<f64> {
    let mut v: Vec<f64> = p.gcn.filters.iter().flat_map(|w| w.data().to_vec()).collect();
    v.extend_from_slice(p.sampler.w_g.data());
    v.push(p.sampler.w1);
    v.push(p.sampler.w2);
    v
}

fn unflatten(template: &ModelParams, v: &[f64]) -> ModelParams {
    let mut p = template.clone();
    let mut k = 0;
    for w in p.gcn.filters.iter_mut().chain(std::iter::once(&mut p.sampler.w_g)) {
        let len = w.len();
        w.data_mut().copy_from_slice(&v[k..k + len]);
        k += len;
    }
    p.sampler.w1 = v[k];
    p.sampler.w2 = v[k + 1];
    p
}

/// Compares the tape gradient of `loss` with central differences over every parameter.
fn check(
    params: &ModelParams,
    loss: impl Fn(&mut Tape, &ModelParams, &ParamVars) -> Result<lwgcn_core::tensor::Var>,
) -> f64 {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let out = loss(&mut tape, params, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut analytic = Vec::new();
    for (w, &v) in params.gcn.filters.iter().zip(&vars.filters) {
        analytic.extend_from_slice(grads.get_or_zeros(v, w).data());
    }
    analytic.extend_from_slice(grads.get_or_zeros(vars.w_g, &params.sampler.w_g).data());
    for v in [vars.w1, vars.w2] {
        analytic.push(grads.get_or_zeros(v, &DenseMatrix::scalar(0.0)).item());
    }

    let eval = |v: &[f64]| {
        let p = unflatten(params, v);
        let mut t = Tape::new();
        let vars = ParamVars::register(&mut t, &p);
        let out = loss(&mut t, &p, &vars).unwrap();
        t.value(out).item()
    };
    let base = flatten(params);
    let numeric: Vec<f64> = (0..base.len())
        .map(|k| {
            let mut up = base.clone();
            up[k] += STEP;
            let mut down = base.clone();
            down[k] -= STEP;
            (eval(&up) - eval(&down)) / (2.0 * STEP)
        })
        .collect();
    let scale = numeric.iter().fold(1e-8f64, |m, x| m.max(x.abs()));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6 * scale))
        .fold(0.0, f64::max)
}

struct Fixture {
    inputs: GraphInputs,
    params: ModelParams,
}

fn fixture(hidden: &[usize], seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = toy();
    let x = positive_matrix(g.num_nodes(), 5, &mut rng);
    let inputs = GraphInputs::new(g, SparseMatrix::from_dense(&x)).unwrap();
    let mut params = ModelParams::init(5, hidden, 3, &mut rng).unwrap();
    params.sampler.w_g = positive_matrix(1, 5, &mut rng);
    params.sampler.w1 = 0.7;
    params.sampler.w2 = 0.4;
    Fixture { inputs, params }
}

fn plan(f: &Fixture, strategy: Strategy, sizes: &[usize], attention: Option<usize>, seed: u64) -> NetworkPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = match attention {
        Some(n) => {
            let scores = f.params.sampler.scores(&f.inputs.features).unwrap();
            attention_graph(&f.inputs.graph, &scores, &f.params.sampler, n)
                .unwrap()
                .0
        }
        None => f.inputs.graph.clone(),
    };
    let sampling = SamplingInputs {
        graph: &graph,
        features: &f.inputs.features,
        params: &f.params.sampler,
        node_wise_mode: NodeWiseMode::Proportional,
    };
    build_network_plan(sampling, &TARGETS, sizes, strategy, &mut rng).unwrap()
}

/// `(sampler, hidden widths, sample sizes, attention, skip)`.
type Case = (Strategy, &'static [usize], &'static [usize], bool, Option<SkipEstimate>);

#[test]
fn sampled_losses_match_finite_differences() {
    let cases: [Case; 6] = [
        (Strategy::NodeWise, &[4], &[2, 2], false, None),
        (Strategy::Iid, &[4], &[4, 4], false, Some(SkipEstimate::Verbatim)),
        (Strategy::Adaptive, &[4], &[4, 4], false, None),
        (Strategy::Adaptive, &[4, 3], &[4, 4, 4], false, None),
        (Strategy::Adaptive, &[4], &[5, 5], true, Some(SkipEstimate::Corrected)),
        (Strategy::Full, &[4], &[1, 1], false, Some(SkipEstimate::Corrected)),
    ];
    for (k, (strategy, hidden, sizes, attention, skip)) in cases.into_iter().enumerate() {
        for q_gradient in [QGradient::Detached, QGradient::Pathwise] {
            let f = fixture(hidden, 20 + k as u64);
            let att = attention.then_some(4);
            let plan = plan(&f, strategy, sizes, att, 40 + k as u64);
            let options = ForwardOptions {
                activation: Activation::Relu,
                skip,
                attention: att,
                q_gradient,
            };
            let err = check(&f.params, |tape, p, vars| {
                let act = sampled_forward(tape, &plan, &f.inputs, p, vars, &options)?;
                let penalty = match strategy {
                    Strategy::NodeWise => None,
                    _ => {
                        let top = variance_penalty(
                            tape,
                            &plan.layers[0],
                            act.hidden.first().copied(),
                            &f.inputs,
                            act.slot_q[0],
                            Norm::L2,
                        )?;
                        let last = plan.depth() - 1;
                        let bottom =
                            variance_penalty(tape, &plan.layers[last], None, &f.inputs, act.slot_q[last], Norm::L1)?;
                        Some(tape.add(top, bottom)?)
                    }
                };
                Ok(hybrid_loss(tape, act.logits, &LABELS, penalty, 0.3)?.0)
            });
            assert!(
                err <= 1e-4,
                "{strategy} {hidden:?} attention={attention} {q_gradient:?}: {err:.3e}"
            );
        }
    }
}

#[test]
fn full_loss_matches_finite_differences() {
    for (hidden, skip) in [
        (&[4][..], None),
        (&[4][..], Some(SkipEstimate::Verbatim)),
        (&[3, 4][..], None),
    ] {
        let f = fixture(hidden, 3);
        let options = ForwardOptions {
            skip,
            ..Default::default()
        };
        let err = check(&f.params, |tape, p, vars| {
            let logits = full_forward(tape, &f.inputs, p, vars, &options)?;
            let logits = tape.gather_rows(logits, &TARGETS)?;
            Ok(hybrid_loss(tape, logits, &LABELS, None, 0.0)?.0)
        });
        assert!(err <= 1e-4, "{hidden:?} {skip:?}: {err:.3e}");
    }
}

/// The literal sample-variance formula, written out directly.
fn literal_variance(p: &[f64], a: &[f64], q: &[f64]) -> f64 {
    let n = p.len() as f64;
    let t: Vec<f64> = (0..p.len()).map(|j| p[j] * a[j] / q[j]).collect();
    let mu = t.iter().sum::<f64>() / n;
    (0..p.len())
        .map(|j| ((p[j] * a[j] - mu * q[j]) / q[j]).powi(2))
        .sum::<f64>()
        / (n * n)
}

#[test]
fn variance_gradient_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let n = 5;
        let p = positive_matrix(1, n, &mut rng).into_data();
        let a = random_matrix(1, n, &mut rng).into_data();
        let q = positive_matrix(1, n, &mut rng).into_data();
        assert!((variance_empirical(&p, &a, &q).unwrap() - literal_variance(&p, &a, &q)).abs() < 1e-12);
        let grad = variance_empirical_grad(&p, &a, &q, GradientForm::Correct).unwrap();
        let scale = grad.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for j in 0..n {
            let h = 1e-6 * q[j];
            let mut up = q.clone();
            up[j] += h;
            let mut down = q.clone();
            down[j] -= h;
            let fd = (literal_variance(&p, &a, &up) - literal_variance(&p, &a, &down)) / (2.0 * h);
            let err = (grad[j] - fd).abs() / grad[j].abs().max(fd.abs()).max(1e-9 * scale);
            assert!(err <= 1e-5, "slot {j}: {} vs {fd} ({err:.3e})", grad[j]);
        }
        let verbatim = variance_empirical_grad(&p, &a, &q, GradientForm::Verbatim).unwrap();
        for (c, v) in grad.iter().zip(&verbatim) {
            assert!((c - 2.0 * v).abs() <= 1e-12 * scale.max(1.0));
        }
    }
}

//! Monte-Carlo checks of the samplers and estimators against dense references.

mod common;

use common::{dense_operator, max_z, positive_matrix, random_matrix, toy, Moments, TOY_EDGES, TOY_NODES};
use lwgcn_core::estimator::{aggregation_matrix, slot_probabilities, GraphInputs, ModelParams, ParamVars, QGradient};
use lwgcn_core::sampler::{
    adaptive_layer_sample, iid_layer_sample, node_wise_sample, LayerPlan, NodeWiseMode, SamplerParams,
};
use lwgcn_core::tensor::{DenseMatrix, SparseMatrix, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PARENTS: [usize; 2] = [0, 5];

fn exact_aggregate(h: &DenseMatrix) -> Vec<f64> {
    let a = dense_operator(TOY_NODES, &TOY_EDGES);
    PARENTS
        .iter()
        .flat_map(|&v| (0..h.cols()).map(move |c| (v, c)))
        .map(|(v, c)| (0..TOY_NODES).map(|u| a[v][u] * h.get(u, c)).sum())
        .collect()
}

fn estimate(layer: &LayerPlan, h: &DenseMatrix) -> Vec<f64> {
    let m = aggregation_matrix(layer).unwrap();
    m.spmm(&h.gather_rows(&layer.sampled).unwrap()).unwrap().into_data()
}

fn assert_unbiased(name: &str, mut draw: impl FnMut(&mut ChaCha8Rng) -> LayerPlan) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = random_matrix(TOY_NODES, 2, &mut rng);
    let target = exact_aggregate(&h);
    let mut m = Moments::new(target.len());
    for _ in 0..100_000 {
        m.push(&estimate(&draw(&mut rng), &h));
    }
    let z = m.max_z(&target);
    assert!(z <= 3.0, "{name}: mean {:?} vs {:?} (z = {z:.2})", m.mean(), target);
}

#[test]
fn layer_wise_estimates_are_unbiased() {
    let g = toy();
    assert_unbiased("iid", |rng| iid_layer_sample(&g, &PARENTS, 3, rng).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = SparseMatrix::from_dense(&positive_matrix(TOY_NODES, 3, &mut rng));
    let params = SamplerParams::new(random_matrix(1, 3, &mut rng));
    assert_unbiased("adaptive", |rng| {
        adaptive_layer_sample(&g, &PARENTS, &params, &x, 3, rng).unwrap()
    });
}

#[test]
fn node_wise_estimates_are_unbiased() {
    let g = toy();
    for mode in [NodeWiseMode::Uniform, NodeWiseMode::Proportional] {
        assert_unbiased("node_wise", |rng| node_wise_sample(&g, &PARENTS, 2, mode, rng).unwrap());
    }
}

#[test]
fn node_wise_draw_frequencies() {
    let g = toy();
    let a = dense_operator(TOY_NODES, &TOY_EDGES);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000;
    for mode in [NodeWiseMode::Uniform, NodeWiseMode::Proportional] {
        let layer = node_wise_sample(&g, &[0], draws, mode, &mut rng).unwrap();
        let mut counts = vec![0; TOY_NODES];
        layer.sampled.iter().for_each(|&u| counts[u] += 1);
        let support = a[0].iter().filter(|&&x| x > 0.0).count() as f64;
        let mass: f64 = a[0].iter().sum();
        let probs: Vec<f64> = a[0]
            .iter()
            .map(|&x| match (x > 0.0, mode) {
                (false, _) => 0.0,
                (true, NodeWiseMode::Uniform) => 1.0 / support,
                (true, NodeWiseMode::Proportional) => x / mass,
            })
            .collect();
        for (u, &c) in counts.iter().enumerate() {
            assert!(probs[u] > 0.0 || c == 0, "{mode:?} drew non-neighbour {u}");
        }
        let z = max_z(&counts, &probs);
        assert!(z <= 3.0, "{mode:?}: z = {z:.2}");
    }
}

#[test]
fn iid_draw_frequencies_follow_column_norms() {
    let g = toy();
    let a = dense_operator(TOY_NODES, &TOY_EDGES);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layer = iid_layer_sample(&g, &PARENTS, 100_000, &mut rng).unwrap();
    let cands = layer.candidates().unwrap();
    let weights: Vec<f64> = cands
        .nodes
        .iter()
        .map(|&u| (0..TOY_NODES).map(|r| a[r][u] * a[r][u]).sum())
        .collect();
    let total: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut counts = vec![0; cands.nodes.len()];
    cands.slot_candidate.iter().for_each(|&c| counts[c] += 1);
    let z = max_z(&counts, &probs);
    assert!(z <= 3.0, "z = {z:.2}");
}

/// The expectation of the estimate does not depend on the sampler, so its
/// gradient in `W_g` is zero. The pathwise term (through the weights) plus
/// the score-function term (through the draw probabilities) must average to zero.
#[test]
fn sampler_gradient_of_the_expectation_vanishes() {
    let g = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = positive_matrix(TOY_NODES, 3, &mut rng);
    let h = random_matrix(TOY_NODES, 2, &mut rng);
    let readout = DenseMatrix::column(vec![1.0, -0.5]);
    let inputs = GraphInputs::new(g.clone(), SparseMatrix::from_dense(&x)).unwrap();
    let mut params = ModelParams::init(3, &[2], 2, &mut rng).unwrap();
    params.sampler.w_g = DenseMatrix::new(1, 3, vec![0.9, -0.4, 0.3]).unwrap();

    let mut total = Moments::new(3);
    let mut pathwise = Moments::new(3);
    for _ in 0..20_000 {
        let layer = adaptive_layer_sample(&g, &PARENTS, &params.sampler, &inputs.features, 3, &mut rng).unwrap();
        let f: f64 = estimate(&layer, &h).chunks(2).map(|r| r[0] * 1.0 - 0.5 * r[1]).sum();

        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &params);
        let q = slot_probabilities(&mut tape, &layer, &inputs, &vars, QGradient::Pathwise).unwrap();
        let rows = layer.pattern.row_of_entries();
        let numer: Vec<f64> = layer
            .p
            .iter()
            .zip(&rows)
            .map(|(p, &r)| p * layer.row_mass[r] / layer.draws as f64)
            .collect();
        let numer = tape.constant(DenseMatrix::column(numer));
        let q_entries = tape.gather_rows(q, layer.pattern.indices()).unwrap();
        let weights = tape.div(numer, q_entries).unwrap();
        let hs = tape.constant(h.gather_rows(&layer.sampled).unwrap());
        let agg = tape.spmm_weighted(&layer.pattern, weights, hs).unwrap();
        let w = tape.constant(readout.clone());
        let out = tape.matmul(agg, w).unwrap();
        let f_var = tape.sum(out).unwrap();
        assert!((tape.value(f_var).item() - f).abs() < 1e-10);
        let path_grad = tape.backward(f_var).unwrap().get(vars.w_g).unwrap().clone();

        let score_coef = tape.constant(DenseMatrix::column(layer.q.iter().map(|qj| f / qj).collect()));
        let score = tape.mul(q, score_coef).unwrap();
        let score = tape.sum(score).unwrap();
        let both = tape.add(f_var, score).unwrap();
        let grad = tape.backward(both).unwrap().get(vars.w_g).unwrap().clone();
        total.push(grad.data());
        pathwise.push(path_grad.data());
    }
    let z = total.max_z(&[0.0; 3]);
    assert!(z <= 3.0, "combined gradient mean {:?} (z = {z:.2})", total.mean());
    // Control: the pathwise term alone is biased, so the test has power.
    assert!(pathwise.max_z(&[0.0; 3]) > 5.0, "pathwise mean {:?}", pathwise.mean());
}

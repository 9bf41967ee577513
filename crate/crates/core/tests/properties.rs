#![allow(clippy::needless_range_loop)]

mod common;

use common::dense_operator;
use lwgcn_core::graph::{load_dataset, DatasetFormat, NormalizedGraph, SyntheticSpec};
use lwgcn_core::sampler::{adaptive_layer_sample, iid_layer_sample, node_wise_sample, NodeWiseMode, SamplerParams};
use lwgcn_core::tensor::{DenseMatrix, SparseMatrix};
use lwgcn_core::variance::{expectation_exact, optimal_sampler, variance_exact};
use lwgcn_core::TrainConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A graph as `(nodes, edges)` with edges between distinct nodes.
fn graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..12).prop_flat_map(|n| {
        let edge = (0..n, 0..n).prop_filter("no self loops", |(a, b)| a != b);
        (Just(n), prop::collection::vec(edge, 0..3 * n))
    })
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|w| {
        let t: f64 = w.iter().sum();
        w.into_iter().map(|x| x / t).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operator_matches_dense_reference((n, edges) in graph()) {
        let g = NormalizedGraph::from_edges(n, &edges);
        let dense = dense_operator(n, &edges);
        let a = g.adjacency();
        prop_assert!(a.is_symmetric(1e-15));
        for v in 0..n {
            for u in 0..n {
                prop_assert!((a.get(v, u) - dense[v][u]).abs() < 1e-12);
            }
            let cond: f64 = g.conditional_row(v).map(|(_, p)| p).sum();
            prop_assert!((cond - 1.0).abs() < 1e-12);
            prop_assert!((g.row_mass(v) - dense[v].iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_samplers_stay_on_the_neighbourhood((n, edges) in graph(), seed in 0u64..1000, draws in 1usize..20) {
        let g = NormalizedGraph::from_edges(n, &edges);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parents: Vec<usize> = (0..n).filter(|v| v % 3 == 0).collect();
        let x = SparseMatrix::from_dense(&DenseMatrix::filled(n, 2, 0.5));
        let params = SamplerParams::new(DenseMatrix::new(1, 2, vec![1.0, -0.3]).unwrap());
        let layers = [
            iid_layer_sample(&g, &parents, draws, &mut rng).unwrap(),
            adaptive_layer_sample(&g, &parents, &params, &x, draws, &mut rng).unwrap(),
        ];
        let reachable = |u: usize| parents.iter().any(|&v| g.conditional_prob(v, u).unwrap() > 0.0);
        for layer in &layers {
            prop_assert_eq!(layer.num_sampled(), draws);
            let cands = layer.candidates().unwrap();
            prop_assert!((cands.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(cands.distribution.iter().all(|&q| q > 0.0));
            prop_assert!(cands.nodes.iter().all(|&u| reachable(u)));
            prop_assert!(layer.sampled.iter().all(|&u| cands.nodes.contains(&u)));
            prop_assert!(layer.q.iter().all(|&q| q > 0.0));
        }
    }

    #[test]
    fn node_wise_draws_k_per_parent((n, edges) in graph(), seed in 0u64..1000, k in 1usize..6) {
        let g = NormalizedGraph::from_edges(n, &edges);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parents: Vec<usize> = (0..n).collect();
        let layer = node_wise_sample(&g, &parents, k, NodeWiseMode::Uniform, &mut rng).unwrap();
        prop_assert_eq!(layer.num_sampled(), k * n);
        for (i, &v) in parents.iter().enumerate() {
            let row = layer.pattern.row_range(i);
            prop_assert_eq!(row.len(), k);
            for e in row {
                let u = layer.sampled[layer.pattern.indices()[e]];
                prop_assert!(g.conditional_prob(v, u).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn variance_is_non_negative_and_minimised_by_optimal_sampler(
        (p, a, q) in (2usize..8).prop_flat_map(|k| (distribution(k), prop::collection::vec(0.0f64..3.0, k), distribution(k))),
        n in 1usize..10,
    ) {
        let v = variance_exact(&p, &a, &q, n).unwrap();
        prop_assert!(v >= -1e-15);
        let q_star = optimal_sampler(&p, &a);
        if q_star.iter().all(|&x| x > 0.0) {
            let v_star = variance_exact(&p, &a, &q_star, n).unwrap();
            prop_assert!(v_star <= v + 1e-12);
            prop_assert!(v_star.abs() < 1e-12);
        }
    }

    #[test]
    fn expectation_ignores_the_sampler(
        (p, q, h) in (2usize..8).prop_flat_map(|k| (distribution(k), distribution(k), prop::collection::vec(-2.0f64..2.0, 2 * k))),
    ) {
        let k = p.len();
        let h = DenseMatrix::new(k, 2, h).unwrap();
        let uniform = vec![1.0 / k as f64; k];
        let a = expectation_exact(&p, &h, &q).unwrap();
        let b = expectation_exact(&p, &h, &uniform).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn datasets_round_trip(seed in 0u64..50) {
        let raw = SyntheticSpec { seed, ..Default::default() }.generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        raw.save(dir.path()).unwrap();
        let back = load_dataset(dir.path(), DatasetFormat::Directory).unwrap();
        prop_assert_eq!(back.num_nodes, raw.num_nodes);
        prop_assert_eq!(back.unique_edges(), raw.unique_edges());
        prop_assert_eq!(back.labels, raw.labels);
        prop_assert_eq!(back.splits, raw.splits);
        prop_assert!(back.features.max_abs_diff(&raw.features) == 0.0);
    }

    #[test]
    fn configs_round_trip(seed in any::<u64>(), lambda in prop::option::of(0.0f64..5.0), skip in any::<bool>(), layer in prop::option::of(1usize..512)) {
        let c = TrainConfig { seed, lambda, skip, layer_size: layer, ..Default::default() };
        let back = TrainConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}

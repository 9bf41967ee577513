#![allow(dead_code, clippy::needless_range_loop)]

use lwgcn_core::graph::NormalizedGraph;
use lwgcn_core::tensor::DenseMatrix;
use rand::Rng;

pub const TOY_NODES: usize = 8;
pub const TOY_EDGES: [(usize, usize); 9] = [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (4, 5), (5, 6), (6, 7), (2, 6)];

pub fn toy() -> NormalizedGraph {
    NormalizedGraph::from_edges(TOY_NODES, &TOY_EDGES)
}

/// `D^-1/2 (A + I) D^-1/2` built densely from an edge list.
pub fn dense_operator(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        a[i][i] = 1.0;
    }
    for &(u, v) in edges {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    let d: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            a[i][j] /= (d[i] * d[j]).sqrt();
        }
    }
    a
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

pub fn positive_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.random_range(0.1..1.0)).collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

/// Largest per-bin z-score of `counts` against a multinomial with probabilities `probs`.
pub fn max_z(counts: &[usize], probs: &[f64]) -> f64 {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0 && p < 1.0)
        .map(|(&c, &p)| (c as f64 - total as f64 * p).abs() / (total as f64 * p * (1.0 - p)).sqrt())
        .fold(0.0, f64::max)
}

/// Running mean and standard error per component.
pub struct Moments {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; dim],
            sum_sq: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for (k, v) in x.iter().enumerate() {
            self.sum[k] += v;
            self.sum_sq[k] += v * v;
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    pub fn std_err(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, sq)| ((sq / n - (s / n).powi(2)).max(0.0) / n).sqrt())
            .collect()
    }

    /// Largest |mean - target| / SE.
    pub fn max_z(&self, target: &[f64]) -> f64 {
        self.mean()
            .iter()
            .zip(self.std_err())
            .zip(target)
            .map(|((m, se), t)| {
                if se > 0.0 {
                    (m - t).abs() / se
                } else if (m - t).abs() < 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

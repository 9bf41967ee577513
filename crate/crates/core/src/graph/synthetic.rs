//! Planted-partition citation-style graphs for smoke tests and demos.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{RawDataset, Splits};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Generator settings. Each class owns a block of "topic" feature columns;
/// nodes draw most of their active features from their class block and
/// most of their edges from their own class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub classes: usize,
    pub features: usize,
    pub edges: usize,
    /// Probability that an edge stays inside the class.
    pub homophily: f64,
    /// Active (non-zero) features per node.
    pub active_features: usize,
    /// Probability that an active feature comes from the class block.
    pub feature_signal: f64,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            nodes: 300,
            classes: 3,
            features: 60,
            edges: 600,
            homophily: 0.8,
            active_features: 6,
            feature_signal: 0.6,
            val: 50,
            test: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Roughly Cora-sized: 2708 nodes, 7 classes, 1433 binary features, 5429 edges.
    pub fn cora_like(seed: u64) -> Self {
        Self {
            nodes: 2708,
            classes: 7,
            features: 1433,
            edges: 5429,
            homophily: 0.8,
            active_features: 18,
            feature_signal: 0.3,
            val: 500,
            test: 1000,
            seed,
        }
    }

    pub fn generate(&self) -> Result<RawDataset> {
        if self.classes == 0 || self.nodes < self.classes || self.features < self.classes {
            return Err(Error::Config(
                "synthetic graph needs nodes >= classes and features >= classes".into(),
            ));
        }
        if self.val + self.test >= self.nodes {
            return Err(Error::Config(
                "validation and test splits leave no training nodes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let labels: Vec<usize> = (0..self.nodes).map(|v| v % self.classes).collect();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (v, &y) in labels.iter().enumerate() {
            members[y].push(v);
        }

        let mut edges = Vec::with_capacity(self.edges);
        while edges.len() < self.edges {
            let u = rng.random_range(0..self.nodes);
            let v = if rng.random_bool(self.homophily) {
                let same = &members[labels[u]];
                same[rng.random_range(0..same.len())]
            } else {
                rng.random_range(0..self.nodes)
            };
            if u != v {
                edges.push((u, v));
            }
        }

        let block = self.features / self.classes;
        let mut features = DenseMatrix::zeros(self.nodes, self.features);
        for (v, &y) in labels.iter().enumerate() {
            for _ in 0..self.active_features {
                let c = if rng.random_bool(self.feature_signal) {
                    y * block + rng.random_range(0..block)
                } else {
                    rng.random_range(0..self.features)
                };
                features.set(v, c, 1.0);
            }
        }

        let mut order: Vec<usize> = (0..self.nodes).collect();
        order.shuffle(&mut rng);
        let mut val = order[..self.val].to_vec();
        let mut test = order[self.val..self.val + self.test].to_vec();
        let mut train = order[self.val + self.test..].to_vec();
        val.sort_unstable();
        test.sort_unstable();
        train.sort_unstable();

        RawDataset::new(
            edges,
            features,
            labels.into_iter().map(Some).collect(),
            Splits { train, val, test },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_determinism() {
        let spec = SyntheticSpec::default();
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_nodes, 300);
        assert_eq!(a.num_classes, 3);
        assert_eq!(a.splits.train.len(), 150);
        assert_eq!(a.edges.len(), 600);
    }
}

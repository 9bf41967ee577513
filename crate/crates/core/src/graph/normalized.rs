use crate::error::{Error, Result};
use crate::tensor::SparseMatrix;

use super::dataset::RawDataset;

/// Renormalised propagation operator `Â` together with the per-node
/// quantities the samplers need.
///
/// `p(u|v) = â(v, u) / N(v)` with `N(v) = Σ_u â(v, u)`.
#[derive(Debug, Clone)]
pub struct NormalizedGraph {
    adj: SparseMatrix,
    row_mass: Vec<f64>,
    col_sq_norm: Vec<f64>,
}

/// Builds `Â = D̃^{-1/2} (A + I) D̃^{-1/2}` from the dataset's undirected edges.
pub fn normalize(raw: &RawDataset) -> NormalizedGraph {
    NormalizedGraph::from_edges(raw.num_nodes, &raw.edges)
}

impl NormalizedGraph {
    /// Duplicate edges collapse to one and input self loops are ignored;
    /// every node then receives exactly one self loop.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors: Vec<Vec<usize>> = (0..num_nodes).map(|v| vec![v]).collect();
        for &(u, v) in edges {
            if u != v {
                neighbors[u].push(v);
                neighbors[v].push(u);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let degree: Vec<f64> = neighbors.iter().map(|l| l.len() as f64).collect();
        let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();

        let mut indptr = Vec::with_capacity(num_nodes + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (v, list) in neighbors.iter().enumerate() {
            for &u in list {
                indices.push(u);
                values.push(inv_sqrt[v] * inv_sqrt[u]);
            }
            indptr.push(indices.len());
        }
        let adj = SparseMatrix::new(num_nodes, num_nodes, indptr, indices, values)
            .expect("sorted deduplicated neighbor lists form a valid pattern");
        Self::from_operator(adj).expect("renormalised adjacency has positive row mass")
    }

    /// Wraps an arbitrary non-negative square operator with positive row sums.
    pub fn from_operator(adj: SparseMatrix) -> Result<Self> {
        if adj.rows() != adj.cols() {
            return Err(Error::dim("NormalizedGraph", "operator must be square"));
        }
        if adj.values().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Input("operator has negative or non-finite entries".into()));
        }
        let n = adj.rows();
        let mut row_mass = Vec::with_capacity(n);
        let mut col_sq_norm = vec![0.0; n];
        for v in 0..n {
            let (cols, vals) = adj.row(v);
            let mass: f64 = vals.iter().sum();
            if mass <= 0.0 {
                return Err(Error::Input(format!("node {v} has zero row mass")));
            }
            row_mass.push(mass);
            for (&u, &a) in cols.iter().zip(vals) {
                col_sq_norm[u] += a * a;
            }
        }
        Ok(Self {
            adj,
            row_mass,
            col_sq_norm,
        })
    }

    /// Operator `Â + Â²`, refused when the graph has more than `max_nodes` nodes.
    pub fn two_hop(&self, max_nodes: usize) -> Result<Self> {
        if self.num_nodes() > max_nodes {
            return Err(Error::Config(format!(
                "two-hop operator refused: {} nodes exceeds the cap of {max_nodes}",
                self.num_nodes()
            )));
        }
        let squared = self.adj.sp_matmul(&self.adj)?;
        Self::from_operator(self.adj.add(&squared)?)
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.rows()
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adj
    }

    /// `N(v) = Σ_u â(v, u)`.
    pub fn row_mass(&self, v: usize) -> f64 {
        self.row_mass[v]
    }

    pub fn row_masses(&self) -> &[f64] {
        &self.row_mass
    }

    /// Sorted neighbour ids of `v` (itself included) and the matching `â` values.
    pub fn neighbors(&self, v: usize) -> (&[usize], &[f64]) {
        self.adj.row(v)
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj.row(v).0.len()
    }

    /// `‖Â_{:,u}‖²`, the column mass used by the layer-independent sampler.
    pub fn column_sq_norm(&self, u: usize) -> f64 {
        self.col_sq_norm[u]
    }

    pub fn edge_weight(&self, v: usize, u: usize) -> f64 {
        self.adj.get(v, u)
    }

    /// `p(u|v) = â(v, u) / N(v)`.
    pub fn conditional_prob(&self, v: usize, u: usize) -> Result<f64> {
        let n = self.num_nodes();
        if v >= n || u >= n {
            return Err(Error::Input(format!("node pair ({v}, {u}) out of range for {n} nodes")));
        }
        Ok(self.adj.get(v, u) / self.row_mass[v])
    }

    /// `p(·|v)` over the neighbour list of `v`.
    pub fn conditional_row(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (cols, vals) = self.adj.row(v);
        let mass = self.row_mass[v];
        cols.iter().zip(vals).map(move |(&u, &a)| (u, a / mass))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseMatrix;

    #[test]
    fn isolated_node_is_identity() {
        let g = NormalizedGraph::from_edges(1, &[]);
        assert_eq!(g.adjacency().to_dense().data(), &[1.0]);
        assert_eq!(g.conditional_prob(0, 0).unwrap(), 1.0);
    }

    #[test]
    fn single_edge_all_half() {
        let g = NormalizedGraph::from_edges(2, &[(0, 1)]);
        for &v in g.adjacency().to_dense().data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!((g.conditional_prob(0, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!((g.conditional_prob(1, 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn path_matches_dense_renormalisation() {
        let g = NormalizedGraph::from_edges(3, &[(0, 1), (1, 2)]);
        let mut a = DenseMatrix::identity(3);
        for (u, v) in [(0, 1), (1, 2)] {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
        let deg: Vec<f64> = (0..3).map(|r| a.row(r).iter().sum()).collect();
        let mut expected = DenseMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                expected.set(i, j, a.get(i, j) / (deg[i] * deg[j]).sqrt());
            }
        }
        assert!(g.adjacency().to_dense().max_abs_diff(&expected) <= 1e-12);
    }

    #[test]
    fn duplicates_and_self_loops_ignored() {
        let a = NormalizedGraph::from_edges(3, &[(0, 1), (1, 0), (0, 1), (2, 2)]);
        let b = NormalizedGraph::from_edges(3, &[(0, 1)]);
        assert_eq!(a.adjacency(), b.adjacency());
        assert_eq!(a.degree(2), 1);
    }

    #[test]
    fn conditional_prob_out_of_range() {
        let g = NormalizedGraph::from_edges(2, &[(0, 1)]);
        assert!(matches!(g.conditional_prob(0, 2), Err(Error::Input(_))));
    }

    #[test]
    fn two_hop_cap_enforced() {
        let g = NormalizedGraph::from_edges(3, &[(0, 1)]);
        assert!(g.two_hop(2).is_err());
        let iso = NormalizedGraph::from_edges(2, &[]);
        let two = iso.two_hop(10).unwrap();
        assert_eq!(two.adjacency().to_dense(), DenseMatrix::identity(2).scale(2.0));
    }
}

//! Top-down construction of sampled networks.
//!
//! Every sampler produces a [`LayerPlan`]: the parent nodes of a layer, the
//! nodes drawn for the layer below (one slot per draw, repeats kept), the
//! probability each slot was drawn with, and the sparse block of
//! `p(û_j | v_i)` values linking parents to slots.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizedGraph;
use crate::tensor::{DenseMatrix, SparseMatrix, SparsePattern};

/// Sampling strategy for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// No sampling: exact propagation over the whole graph.
    Full,
    /// Per-parent neighbour draws.
    NodeWise,
    /// Layer-wise draws from a parent-independent distribution.
    Iid,
    /// Layer-wise draws from the learned, parent-conditioned distribution.
    Adaptive,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Full, Strategy::NodeWise, Strategy::Iid, Strategy::Adaptive];

    pub fn id(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::NodeWise => "node_wise",
            Strategy::Iid => "iid",
            Strategy::Adaptive => "adaptive",
        }
    }

    pub fn is_layer_wise(self) -> bool {
        matches!(self, Strategy::Iid | Strategy::Adaptive)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampler '{s}' (valid: full, node_wise, iid, adaptive)")))
    }
}

/// Draw distribution of the node-wise sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeWiseMode {
    /// Draw proportionally to `p(u|v)`.
    Proportional,
    /// Draw uniformly over the neighbour list.
    #[default]
    Uniform,
}

/// Parameters of the self-dependent scoring function and of the attention variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    /// `1 x D` row so that `g(x) = W_g · x`.
    pub w_g: DenseMatrix,
    pub w1: f64,
    pub w2: f64,
}

impl SamplerParams {
    pub fn new(w_g: DenseMatrix) -> Self {
        Self { w_g, w1: 1.0, w2: 1.0 }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_g.cols()
    }

    /// `g(x)` for every row of a sparse feature matrix.
    pub fn scores(&self, x: &SparseMatrix) -> Result<Vec<f64>> {
        if x.cols() != self.w_g.cols() {
            return Err(Error::dim(
                "self_dependent",
                format!("features have {} columns, W_g has {}", x.cols(), self.w_g.cols()),
            ));
        }
        let w = self.w_g.row(0);
        Ok((0..x.rows())
            .map(|r| {
                let (cols, vals) = x.row(r);
                cols.iter().zip(vals).map(|(&c, &v)| w[c] * v).sum()
            })
            .collect())
    }
}

/// `g(x) = W_g · x`.
pub fn self_dependent(params: &SamplerParams, x: &[f64]) -> Result<f64> {
    if x.len() != params.w_g.cols() {
        return Err(Error::dim(
            "self_dependent",
            format!(
                "feature row of length {} for W_g of width {}",
                x.len(),
                params.w_g.cols()
            ),
        ));
    }
    Ok(params.w_g.row(0).iter().zip(x).map(|(w, v)| w * v).sum())
}

/// `a(x_v, x_u) = ReLU(W₁ g(x_v) + W₂ g(x_u)) / n`.
pub fn attention_values(params: &SamplerParams, x_v: &[f64], x_u: &[f64], n: usize) -> Result<f64> {
    let pre = params.w1 * self_dependent(params, x_v)? + params.w2 * self_dependent(params, x_u)?;
    Ok(pre.max(0.0) / n as f64)
}

/// Operator whose entries are attention values on the support of `Â`.
///
/// Rows whose attention values are all zero keep their `Â` row so that
/// `p(·|v)` stays a distribution; the number of such rows is returned.
pub fn attention_graph(
    graph: &NormalizedGraph,
    scores: &[f64],
    params: &SamplerParams,
    n: usize,
) -> Result<(NormalizedGraph, usize)> {
    let nodes = graph.num_nodes();
    if scores.len() != nodes {
        return Err(Error::dim("attention_graph", "one score per node required"));
    }
    let mut triplets = Vec::with_capacity(graph.adjacency().nnz());
    let mut fallbacks = 0;
    for v in 0..nodes {
        let (cols, vals) = graph.neighbors(v);
        let row: Vec<(usize, f64)> = cols
            .iter()
            .map(|&u| (u, (params.w1 * scores[v] + params.w2 * scores[u]).max(0.0) / n as f64))
            .filter(|&(_, a)| a > 0.0)
            .collect();
        if row.is_empty() {
            fallbacks += 1;
            triplets.extend(cols.iter().zip(vals).map(|(&u, &a)| (v, u, a)));
        } else {
            triplets.extend(row.into_iter().map(|(u, a)| (v, u, a)));
        }
    }
    let adj = SparseMatrix::from_triplets(nodes, nodes, &triplets)?;
    Ok((NormalizedGraph::from_operator(adj)?, fallbacks))
}

/// How a layer was drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// `k` draws per parent; slots `i*k .. (i+1)*k` belong to parent `i`.
    NodeWise { k: usize, mode: NodeWiseMode },
    /// Shared draws for all parents from a distribution over the candidate set.
    LayerWise(CandidateSet),
}

/// The union of the parents' neighbourhoods and the distribution drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub nodes: Vec<usize>,
    /// `Σ_i p(u|v_i)` for each candidate.
    pub mass: Vec<f64>,
    /// Probability of each candidate under the sampler.
    pub distribution: Vec<f64>,
    /// Candidate position of each slot.
    pub slot_candidate: Vec<usize>,
    /// The distribution is learned and should be recomputed on the tape.
    pub adaptive: bool,
    /// `|g|` vanished on every candidate and the `g`-free distribution was used.
    pub fallback: bool,
}

/// One sampled layer.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub parents: Vec<usize>,
    pub sampled: Vec<usize>,
    /// Draw probability of each slot.
    pub q: Vec<f64>,
    /// Sparsity of the `parents x slots` block.
    pub pattern: Arc<SparsePattern>,
    /// `p(û_j | v_i)` per stored entry.
    pub p: Vec<f64>,
    /// `p(û_j | v_i) / q(û_j)` per stored entry.
    pub importance: Vec<f64>,
    /// `N(v_i)` per parent.
    pub row_mass: Vec<f64>,
    /// Number of Monte-Carlo draws averaged per parent.
    pub draws: usize,
    pub kind: LayerKind,
}

impl LayerPlan {
    pub fn num_parents(&self) -> usize {
        self.parents.len()
    }

    pub fn num_sampled(&self) -> usize {
        self.sampled.len()
    }

    /// Aggregation weights `N(v_i) p(û_j|v_i) / (draws · q(û_j))` per stored entry.
    pub fn aggregation_weights(&self) -> Vec<f64> {
        let rows = self.pattern.row_of_entries();
        self.importance
            .iter()
            .zip(rows)
            .map(|(&imp, r)| self.row_mass[r] * imp / self.draws as f64)
            .collect()
    }

    /// The `p(û_j | v_i)` block as a sparse matrix.
    pub fn probability_block(&self) -> Result<SparseMatrix> {
        SparseMatrix::from_pattern(self.pattern.clone(), self.p.clone())
    }

    pub fn candidates(&self) -> Option<&CandidateSet> {
        match &self.kind {
            LayerKind::LayerWise(c) => Some(c),
            LayerKind::NodeWise { .. } => None,
        }
    }

    fn check_support(&self) -> Result<()> {
        if let Some((j, &q)) = self.q.iter().enumerate().find(|(_, &q)| q <= 0.0 || !q.is_finite()) {
            return Err(Error::Support(format!(
                "slot {j} (node {}) drawn with probability {q}",
                self.sampled[j]
            )));
        }
        Ok(())
    }
}

/// Layers from the minibatch (first) down to the input layer (last).
#[derive(Debug, Clone)]
pub struct NetworkPlan {
    pub layers: Vec<LayerPlan>,
    pub strategy: Strategy,
}

impl NetworkPlan {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn targets(&self) -> &[usize] {
        &self.layers[0].parents
    }

    /// Node slots per layer, top first: `[batch, n_1, …, n_d]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].num_parents()];
        sizes.extend(self.layers.iter().map(LayerPlan::num_sampled));
        sizes
    }

    pub fn total_slots(&self) -> usize {
        self.layer_sizes().iter().sum()
    }

    /// Layers whose adaptive distribution fell back to the `g`-free form.
    pub fn fallbacks(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.candidates().is_some_and(|c| c.fallback))
            .count()
    }
}

fn check_parents(graph: &NormalizedGraph, parents: &[usize]) -> Result<()> {
    if parents.is_empty() {
        return Err(Error::Input("sampling needs at least one parent".into()));
    }
    if let Some(&v) = parents.iter().find(|&&v| v >= graph.num_nodes()) {
        return Err(Error::Input(format!("parent {v} out of range")));
    }
    Ok(())
}

/// Candidate nodes (sorted) and `Σ_i p(u|v_i)` for each.
fn candidate_mass(graph: &NormalizedGraph, parents: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let mut acc: HashMap<usize, f64> = HashMap::new();
    for &v in parents {
        for (u, p) in graph.conditional_row(v) {
            *acc.entry(u).or_insert(0.0) += p;
        }
    }
    let mut nodes: Vec<usize> = acc.keys().copied().collect();
    nodes.sort_unstable();
    let mass = nodes.iter().map(|u| acc[u]).collect();
    (nodes, mass)
}

fn normalized(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Builds the `parents x slots` block for shared (layer-wise) slots.
fn layer_wise_plan(graph: &NormalizedGraph, parents: &[usize], candidates: CandidateSet) -> Result<LayerPlan> {
    let sampled: Vec<usize> = candidates.slot_candidate.iter().map(|&c| candidates.nodes[c]).collect();
    let q: Vec<f64> = candidates
        .slot_candidate
        .iter()
        .map(|&c| candidates.distribution[c])
        .collect();

    let mut slots_of: HashMap<usize, Vec<usize>> = HashMap::new();
    for (j, &u) in sampled.iter().enumerate() {
        slots_of.entry(u).or_default().push(j);
    }
    let mut indptr = vec![0];
    let mut indices = Vec::new();
    let mut p = Vec::new();
    let mut importance = Vec::new();
    for &v in parents {
        let mut row: Vec<(usize, f64)> = Vec::new();
        for (u, pu) in graph.conditional_row(v) {
            if let Some(slots) = slots_of.get(&u) {
                row.extend(slots.iter().map(|&j| (j, pu)));
            }
        }
        row.sort_unstable_by_key(|&(j, _)| j);
        for (j, pu) in row {
            indices.push(j);
            p.push(pu);
            importance.push(pu / q[j]);
        }
        indptr.push(indices.len());
    }
    let pattern = SparsePattern::new(parents.len(), sampled.len(), indptr, indices)?;
    let plan = LayerPlan {
        parents: parents.to_vec(),
        row_mass: parents.iter().map(|&v| graph.row_mass(v)).collect(),
        draws: sampled.len(),
        sampled,
        q,
        pattern: Arc::new(pattern),
        p,
        importance,
        kind: LayerKind::LayerWise(candidates),
    };
    plan.check_support()?;
    Ok(plan)
}

fn draw_slots<R: Rng + ?Sized>(distribution: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let dist =
        WeightedIndex::new(distribution).map_err(|e| Error::Support(format!("invalid sampling distribution: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Shared draws from `q(u) ∝ Σ_i p(u|v_i) |g(x(u))|` over the candidate set.
///
/// Falls back to `q(u) ∝ Σ_i p(u|v_i)` when `|g|` vanishes on every candidate.
pub fn adaptive_layer_sample<R: Rng + ?Sized>(
    graph: &NormalizedGraph,
    parents: &[usize],
    params: &SamplerParams,
    x: &SparseMatrix,
    n: usize,
    rng: &mut R,
) -> Result<LayerPlan> {
    check_parents(graph, parents)?;
    if n == 0 {
        return Err(Error::Config("layer sample size must be positive".into()));
    }
    let (nodes, mass) = candidate_mass(graph, parents);
    let rows = x.gather_rows(&nodes)?;
    let magnitude: Vec<f64> = params.scores(&rows)?.into_iter().map(f64::abs).collect();
    let weights: Vec<f64> = mass.iter().zip(&magnitude).map(|(m, g)| m * g).collect();
    let fallback = weights.iter().all(|&w| w == 0.0);
    let distribution = if fallback {
        normalized(&mass)
    } else {
        normalized(&weights)
    };
    let slot_candidate = draw_slots(&distribution, n, rng)?;
    layer_wise_plan(
        graph,
        parents,
        CandidateSet {
            nodes,
            mass,
            distribution,
            slot_candidate,
            adaptive: true,
            fallback,
        },
    )
}

/// Shared draws from the parent-independent `q(u) ∝ ‖Â_{:,u}‖²`, restricted
/// to the candidate set.
pub fn iid_layer_sample<R: Rng + ?Sized>(
    graph: &NormalizedGraph,
    parents: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<LayerPlan> {
    check_parents(graph, parents)?;
    if n == 0 {
        return Err(Error::Config("layer sample size must be positive".into()));
    }
    let (nodes, mass) = candidate_mass(graph, parents);
    let weights: Vec<f64> = nodes.iter().map(|&u| graph.column_sq_norm(u)).collect();
    let distribution = normalized(&weights);
    let slot_candidate = draw_slots(&distribution, n, rng)?;
    layer_wise_plan(
        graph,
        parents,
        CandidateSet {
            nodes,
            mass,
            distribution,
            slot_candidate,
            adaptive: false,
            fallback: false,
        },
    )
}

/// Every candidate exactly once with `q = 1/|C|`, so that the Monte-Carlo
/// mean reproduces the exact aggregation.
pub fn exhaustive_layer(graph: &NormalizedGraph, parents: &[usize]) -> Result<LayerPlan> {
    check_parents(graph, parents)?;
    let (nodes, mass) = candidate_mass(graph, parents);
    let count = nodes.len();
    layer_wise_plan(
        graph,
        parents,
        CandidateSet {
            distribution: vec![1.0 / count as f64; count],
            slot_candidate: (0..count).collect(),
            nodes,
            mass,
            adaptive: false,
            fallback: false,
        },
    )
}

/// `k` independent draws per parent, with replacement.
pub fn node_wise_sample<R: Rng + ?Sized>(
    graph: &NormalizedGraph,
    parents: &[usize],
    k: usize,
    mode: NodeWiseMode,
    rng: &mut R,
) -> Result<LayerPlan> {
    check_parents(graph, parents)?;
    if k == 0 {
        return Err(Error::Config("neighbours per node must be positive".into()));
    }
    let mut sampled = Vec::with_capacity(parents.len() * k);
    let mut q = Vec::with_capacity(parents.len() * k);
    let mut indptr = vec![0];
    let mut indices = Vec::with_capacity(parents.len() * k);
    let mut p = Vec::with_capacity(parents.len() * k);
    let mut importance = Vec::with_capacity(parents.len() * k);
    for &v in parents {
        let row: Vec<(usize, f64)> = graph.conditional_row(v).collect();
        let uniform = 1.0 / row.len() as f64;
        let dist = match mode {
            NodeWiseMode::Proportional => Some(
                WeightedIndex::new(row.iter().map(|&(_, pu)| pu))
                    .map_err(|e| Error::Support(format!("node {v}: {e}")))?,
            ),
            NodeWiseMode::Uniform => None,
        };
        for _ in 0..k {
            let pick = match &dist {
                Some(d) => d.sample(rng),
                None => rng.random_range(0..row.len()),
            };
            let (u, pu) = row[pick];
            let r = match mode {
                NodeWiseMode::Proportional => pu,
                NodeWiseMode::Uniform => uniform,
            };
            indices.push(sampled.len());
            sampled.push(u);
            q.push(r);
            p.push(pu);
            importance.push(pu / r);
        }
        indptr.push(indices.len());
    }
    let pattern = SparsePattern::new(parents.len(), sampled.len(), indptr, indices)?;
    let plan = LayerPlan {
        parents: parents.to_vec(),
        row_mass: parents.iter().map(|&v| graph.row_mass(v)).collect(),
        sampled,
        q,
        pattern: Arc::new(pattern),
        p,
        importance,
        draws: k,
        kind: LayerKind::NodeWise { k, mode },
    };
    plan.check_support()?;
    Ok(plan)
}

/// Everything a sampler may need besides the strategy.
#[derive(Debug, Clone, Copy)]
pub struct SamplingInputs<'a> {
    pub graph: &'a NormalizedGraph,
    pub features: &'a SparseMatrix,
    pub params: &'a SamplerParams,
    pub node_wise_mode: NodeWiseMode,
}

/// Samples layers top-down starting from `minibatch`.
///
/// `sizes[l]` is the layer sample size `n` (layer-wise) or the per-node draw
/// count `k` (node-wise) for the `l`-th layer below the minibatch. The full
/// strategy ignores `sizes` beyond its length and enumerates every candidate.
pub fn build_network_plan<R: Rng + ?Sized>(
    inputs: SamplingInputs<'_>,
    minibatch: &[usize],
    sizes: &[usize],
    strategy: Strategy,
    rng: &mut R,
) -> Result<NetworkPlan> {
    if sizes.is_empty() {
        return Err(Error::Config("network depth must be at least 1".into()));
    }
    if let Some(pos) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!("layer {pos} has sample size 0")));
    }
    let mut layers: Vec<LayerPlan> = Vec::with_capacity(sizes.len());
    let mut parents = minibatch.to_vec();
    for &size in sizes {
        let layer = match strategy {
            Strategy::Full => exhaustive_layer(inputs.graph, &parents)?,
            Strategy::NodeWise => node_wise_sample(inputs.graph, &parents, size, inputs.node_wise_mode, rng)?,
            Strategy::Iid => iid_layer_sample(inputs.graph, &parents, size, rng)?,
            Strategy::Adaptive => {
                adaptive_layer_sample(inputs.graph, &parents, inputs.params, inputs.features, size, rng)?
            }
        };
        parents = layer.sampled.clone();
        layers.push(layer);
    }
    Ok(NetworkPlan { layers, strategy })
}

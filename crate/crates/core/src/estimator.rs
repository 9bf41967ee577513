//! Bottom-up propagation: exact GCN layers and their sampled Monte-Carlo
//! estimates, the input-to-top skip connection and the attention variant.

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizedGraph;
use crate::sampler::{LayerPlan, NetworkPlan, SamplerParams};
use crate::tensor::{DenseMatrix, SparseMatrix, SparsePattern, Tape, Var};

/// GCN filters, bottom first: `filters[l]` maps layer `l` features to layer `l + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub filters: Vec<DenseMatrix>,
}

impl GcnParams {
    /// Glorot-initialised filters for the given layer widths (`dims[0]` is the input width).
    pub fn glorot<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("a network needs an input and an output width".into()));
        }
        let filters = dims
            .windows(2)
            .map(|w| DenseMatrix::glorot_uniform(w[0], w[1], rng))
            .collect();
        Ok(Self { filters })
    }

    pub fn depth(&self) -> usize {
        self.filters.len()
    }

    pub fn input_dim(&self) -> usize {
        self.filters[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.filters[self.filters.len() - 1].cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for (l, w) in self.filters.windows(2).enumerate() {
            if w[0].cols() != w[1].rows() {
                return Err(Error::dim(
                    "GcnParams",
                    format!(
                        "filter {l} outputs {} features, filter {} expects {}",
                        w[0].cols(),
                        l + 1,
                        w[1].rows()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub gcn: GcnParams,
    pub sampler: SamplerParams,
}

impl ModelParams {
    /// Glorot initialisation for the filters and `W_g`; attention weights start at 1.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], classes: usize, rng: &mut R) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let gcn = GcnParams::glorot(&dims, rng)?;
        let sampler = SamplerParams::new(DenseMatrix::glorot_uniform(1, input_dim, rng));
        Ok(Self { gcn, sampler })
    }
}

/// Tape handles of every parameter.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub filters: Vec<Var>,
    pub w_g: Var,
    pub w1: Var,
    pub w2: Var,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        Self {
            filters: params.gcn.filters.iter().map(|w| tape.param(w.clone())).collect(),
            w_g: tape.param(params.sampler.w_g.clone()),
            w1: tape.param(DenseMatrix::scalar(params.sampler.w1)),
            w2: tape.param(DenseMatrix::scalar(params.sampler.w2)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Estimate of the two-hop weights along the skip connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipEstimate {
    /// `Σ_k â(v, u_k) â(u_k, s)` over the distinct sampled middle nodes.
    #[default]
    Verbatim,
    /// `(1/n) Σ_k â(v, u_k) â(u_k, s) / q(u_k)` over the middle slots.
    Corrected,
}

/// How the recorded sampling probabilities enter the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QGradient {
    /// Constants: `W_g` only receives gradient through the variance penalty.
    #[default]
    Detached,
    /// Recomputed on the tape from `W_g`, with the draws held fixed.
    Pathwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ForwardOptions {
    pub activation: Activation,
    pub skip: Option<SkipEstimate>,
    /// Attention replaces `â`; the value is the `n` dividing each attention score.
    pub attention: Option<usize>,
    pub q_gradient: QGradient,
}

/// Propagation operator and features shared by every forward pass.
#[derive(Debug)]
pub struct GraphInputs {
    pub graph: NormalizedGraph,
    /// `N x D` feature rows.
    pub features: SparseMatrix,
    squared: OnceLock<SparseMatrix>,
}

impl GraphInputs {
    pub fn new(graph: NormalizedGraph, features: SparseMatrix) -> Result<Self> {
        if features.rows() != graph.num_nodes() {
            return Err(Error::dim(
                "GraphInputs",
                format!("{} feature rows for {} nodes", features.rows(), graph.num_nodes()),
            ));
        }
        Ok(Self {
            graph,
            features,
            squared: OnceLock::new(),
        })
    }

    /// `Â²`, computed on first use.
    pub fn squared(&self) -> Result<&SparseMatrix> {
        if let Some(s) = self.squared.get() {
            return Ok(s);
        }
        let s = self.graph.adjacency().sp_matmul(self.graph.adjacency())?;
        Ok(self.squared.get_or_init(|| s))
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Identity => Ok(x),
    }
}

fn check_dims(inputs: &GraphInputs, params: &GcnParams) -> Result<()> {
    params.validate()?;
    if params.input_dim() != inputs.feature_dim() {
        return Err(Error::dim(
            "forward",
            format!(
                "features have {} columns, first filter expects {}",
                inputs.feature_dim(),
                params.input_dim()
            ),
        ));
    }
    Ok(())
}

/// `g(x)` for the given feature rows as an `rows x 1` tape column.
fn scores_on_tape(tape: &mut Tape, rows: &SparseMatrix, w_g: Var) -> Result<Var> {
    let wt = tape.transpose(w_g)?;
    tape.spmm(rows, wt)
}

/// Per-entry `ReLU(W₁ g(x_v) + W₂ g(x_u)) / n` for a pattern linking `row_scores` to `col_scores`.
fn attention_entries(
    tape: &mut Tape,
    pattern: &SparsePattern,
    row_scores: Var,
    col_scores: Var,
    vars: &ParamVars,
    n: usize,
) -> Result<Var> {
    let rows = pattern.row_of_entries();
    let gv = tape.gather_rows(row_scores, &rows)?;
    let gu = tape.gather_rows(col_scores, pattern.indices())?;
    let a = tape.mul_scalar(gv, vars.w1)?;
    let b = tape.mul_scalar(gu, vars.w2)?;
    let pre = tape.add(a, b)?;
    let act = tape.relu(pre)?;
    tape.scale(act, 1.0 / n as f64)
}

/// Exact propagation `h⁽ˡ⁺¹⁾ = σ(Â h⁽ˡ⁾ W⁽ˡ⁾)` over the whole graph; returns `N x C` logits.
///
/// With a skip connection, `Â² X W⁽⁰⁾ W⁽¹⁾` is added to the top pre-activation.
/// With attention, the attention scores replace `â` on its support.
pub fn full_forward(
    tape: &mut Tape,
    inputs: &GraphInputs,
    params: &ModelParams,
    vars: &ParamVars,
    options: &ForwardOptions,
) -> Result<Var> {
    check_dims(inputs, &params.gcn)?;
    let depth = params.gcn.depth();
    if options.skip.is_some() && depth != 2 {
        return Err(Error::Config("the skip connection needs exactly two layers".into()));
    }
    let adj = inputs.graph.adjacency();
    let attention = match options.attention {
        Some(n) => {
            let g = scores_on_tape(tape, &inputs.features, vars.w_g)?;
            Some(attention_entries(tape, adj.pattern(), g, g, vars, n)?)
        }
        None => None,
    };
    let propagate = |tape: &mut Tape, d: Var| -> Result<Var> {
        match attention {
            Some(a) => tape.spmm_weighted(adj.pattern(), a, d),
            None => tape.spmm(adj, d),
        }
    };

    let first = tape.spmm(&inputs.features, vars.filters[0])?;
    let mut h = propagate(tape, first)?;
    let mut skip_base = None;
    if options.skip.is_some() {
        skip_base = Some(first);
    }
    for l in 1..depth {
        h = activate(tape, h, options.activation)?;
        let z = tape.matmul(h, vars.filters[l])?;
        h = propagate(tape, z)?;
    }
    if let Some(base) = skip_base {
        let projected = tape.matmul(base, vars.filters[1])?;
        let skip = tape.spmm(inputs.squared()?, projected)?;
        h = tape.add(h, skip)?;
    }
    Ok(h)
}

/// Tape results of a sampled forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    /// Logits of the minibatch targets.
    pub logits: Var,
    /// `hidden[l]`: activations of the slots of `plan.layers[l]` (all layers but the bottom one).
    pub hidden: Vec<Var>,
    /// Draw probability of every slot, per layer (`n x 1`).
    pub slot_q: Vec<Var>,
}

/// Draw probability of each slot as an `n x 1` column, differentiable in `W_g`
/// for adaptive layers under [`QGradient::Pathwise`].
pub fn slot_probabilities(
    tape: &mut Tape,
    layer: &LayerPlan,
    inputs: &GraphInputs,
    vars: &ParamVars,
    mode: QGradient,
) -> Result<Var> {
    let Some(cands) = layer
        .candidates()
        .filter(|c| c.adaptive && !c.fallback && mode == QGradient::Pathwise)
    else {
        return Ok(tape.constant(DenseMatrix::column(layer.q.clone())));
    };
    let rows = inputs.features.gather_rows(&cands.nodes)?;
    let g = scores_on_tape(tape, &rows, vars.w_g)?;
    let magnitude = tape.abs(g)?;
    let mass = tape.constant(DenseMatrix::column(cands.mass.clone()));
    let weights = tape.mul(mass, magnitude)?;
    let total = tape.sum(weights)?;
    let ones = tape.constant(DenseMatrix::filled(cands.nodes.len(), 1, 1.0));
    let total = tape.matmul(ones, total)?;
    let q = tape.div(weights, total)?;
    tape.gather_rows(q, &cands.slot_candidate)
}

/// Differentiable aggregation weights `N(v_i) p(û_j|v_i) / (n q(û_j))` of one layer,
/// or `a(v_i, û_j) / (n q(û_j))` with attention.
fn layer_weights(
    tape: &mut Tape,
    layer: &LayerPlan,
    inputs: &GraphInputs,
    vars: &ParamVars,
    options: &ForwardOptions,
    slot_q: Var,
) -> Result<Var> {
    let numerators = match options.attention {
        Some(n) => {
            let parents = inputs.features.gather_rows(&layer.parents)?;
            let slots = inputs.features.gather_rows(&layer.sampled)?;
            let gp = scores_on_tape(tape, &parents, vars.w_g)?;
            let gs = scores_on_tape(tape, &slots, vars.w_g)?;
            attention_entries(tape, &layer.pattern, gp, gs, vars, n)?
        }
        None => {
            let rows = layer.pattern.row_of_entries();
            let values = layer.p.iter().zip(rows).map(|(p, r)| p * layer.row_mass[r]).collect();
            tape.constant(DenseMatrix::column(values))
        }
    };
    let numerators = tape.scale(numerators, 1.0 / layer.draws as f64)?;
    if !tape.requires_grad(slot_q) {
        let rows = layer.pattern.row_of_entries();
        let inv: Vec<f64> = layer.pattern.indices().iter().map(|&j| 1.0 / layer.q[j]).collect();
        debug_assert_eq!(rows.len(), inv.len());
        let inv = tape.constant(DenseMatrix::column(inv));
        return tape.mul(numerators, inv);
    }
    let q = tape.gather_rows(slot_q, layer.pattern.indices())?;
    tape.div(numerators, q)
}

fn check_chain(plan: &NetworkPlan, depth: usize) -> Result<()> {
    if plan.depth() != depth {
        return Err(Error::Config(format!(
            "plan has {} layers, the network has {depth}",
            plan.depth()
        )));
    }
    for (l, w) in plan.layers.windows(2).enumerate() {
        if w[0].sampled != w[1].parents {
            return Err(Error::Input(format!("plan layers {l} and {} do not chain", l + 1)));
        }
    }
    Ok(())
}

fn finite_or_named(tape: &Tape, v: Var, layer: usize) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            context: format!("sampled layer {layer}"),
            detail: "non-finite activations".into(),
        })
    }
}

/// Monte-Carlo propagation over a sampled network.
///
/// Each layer computes `σ(N(v_i) μ̂_q(v_i) W)` with
/// `μ̂_q(v_i) = (1/n) Σ_j p(û_j|v_i)/q(û_j) h(û_j)`.
pub fn sampled_forward(
    tape: &mut Tape,
    plan: &NetworkPlan,
    inputs: &GraphInputs,
    params: &ModelParams,
    vars: &ParamVars,
    options: &ForwardOptions,
) -> Result<Activations> {
    check_dims(inputs, &params.gcn)?;
    let depth = params.gcn.depth();
    check_chain(plan, depth)?;
    if options.skip.is_some() && depth != 2 {
        return Err(Error::Config("the skip connection needs exactly two layers".into()));
    }

    let slot_q = plan
        .layers
        .iter()
        .map(|layer| slot_probabilities(tape, layer, inputs, vars, options.q_gradient))
        .collect::<Result<Vec<_>>>()?;

    let bottom = &plan.layers[depth - 1];
    let x_bottom = inputs.features.gather_rows(&bottom.sampled)?;
    let first = tape.spmm(&x_bottom, vars.filters[0])?;

    let mut hidden = vec![None; depth];
    let mut z = first;
    let mut out = first;
    for l in (0..depth).rev() {
        let layer = &plan.layers[l];
        let weights = layer_weights(tape, layer, inputs, vars, options, slot_q[l])?;
        out = tape.spmm_weighted(&layer.pattern, weights, z)?;
        finite_or_named(tape, out, l)?;
        if l > 0 {
            let h = activate(tape, out, options.activation)?;
            hidden[l - 1] = Some(h);
            z = tape.matmul(h, vars.filters[depth - l])?;
        }
    }
    if let Some(estimate) = options.skip {
        let block = skip_weights(&plan.layers[0], &plan.layers[1], estimate)?;
        let projected = tape.matmul(first, vars.filters[1])?;
        let skip = tape.spmm(&block, projected)?;
        out = tape.add(out, skip)?;
    }
    Ok(Activations {
        logits: out,
        hidden: hidden.into_iter().flatten().collect(),
        slot_q,
    })
}

/// Two-hop weights `â_skip(v_i, s_j)` from the top parents to the bottom slots,
/// estimated through the middle slots.
pub fn skip_weights(top: &LayerPlan, middle: &LayerPlan, estimate: SkipEstimate) -> Result<SparseMatrix> {
    if top.sampled != middle.parents {
        return Err(Error::Input("skip connection needs chained layers".into()));
    }
    let first_of = |nodes: &[usize]| -> Vec<bool> {
        let mut seen = HashSet::new();
        nodes.iter().map(|&u| seen.insert(u)).collect()
    };
    let keep_middle = first_of(&top.sampled);
    let keep_bottom = first_of(&middle.sampled);

    let mut triplets = Vec::new();
    for i in 0..top.num_parents() {
        for e in top.pattern.row_range(i) {
            let k = top.pattern.indices()[e];
            let a_vk = top.p[e] * top.row_mass[i];
            let c = match estimate {
                SkipEstimate::Verbatim if !keep_middle[k] => continue,
                SkipEstimate::Verbatim => a_vk,
                SkipEstimate::Corrected => a_vk / (top.draws as f64 * top.q[k]),
            };
            for f in middle.pattern.row_range(k) {
                let j = middle.pattern.indices()[f];
                if estimate == SkipEstimate::Verbatim && !keep_bottom[j] {
                    continue;
                }
                let a_ks = middle.p[f] * middle.row_mass[k];
                triplets.push((i, j, c * a_ks));
            }
        }
    }
    SparseMatrix::from_triplets(top.num_parents(), middle.num_sampled(), &triplets)
}

/// Convenience wrapper: full propagation with the operator `Â + Â²`.
///
/// Refuses graphs with more than `max_nodes` nodes.
pub fn two_hop_forward(
    tape: &mut Tape,
    inputs: &GraphInputs,
    params: &ModelParams,
    vars: &ParamVars,
    options: &ForwardOptions,
    max_nodes: usize,
) -> Result<Var> {
    let two_hop = GraphInputs::new(inputs.graph.two_hop(max_nodes)?, inputs.features.clone())?;
    full_forward(tape, &two_hop, params, vars, options)
}

/// Logits for all nodes without gradient bookkeeping beyond a throwaway tape.
pub fn predict(inputs: &GraphInputs, params: &ModelParams, options: &ForwardOptions) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let logits = full_forward(&mut tape, inputs, params, &vars, options)?;
    Ok(tape.value(logits).clone())
}

/// The detached aggregation weights of one layer as a `parents x slots` matrix.
pub fn aggregation_matrix(layer: &LayerPlan) -> Result<SparseMatrix> {
    let weights = layer.aggregation_weights();
    let triplets: Vec<(usize, usize, f64)> = layer
        .pattern
        .row_of_entries()
        .into_iter()
        .zip(layer.pattern.indices())
        .zip(weights)
        .map(|((r, &c), w)| (r, c, w))
        .collect();
    SparseMatrix::from_triplets(layer.num_parents(), layer.num_sampled(), &triplets)
}

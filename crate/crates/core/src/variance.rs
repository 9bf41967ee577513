//! Variance of the layer-wise estimator, the variance penalty and the hybrid loss.
//!
//! Throughout, `p` is `p(u|v)` for one parent, `a` is the magnitude `|h(u)|` of
//! the hidden row being aggregated and `q` the sampling distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{slot_probabilities, GraphInputs, ParamVars, QGradient};
use crate::graph::NormalizedGraph;
use crate::sampler::{adaptive_layer_sample, LayerPlan, SamplerParams};
use crate::tensor::{DenseMatrix, Norm, SparseMatrix, Tape, Var};

fn check_lengths(op: &'static str, p: &[f64], a: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != a.len() || p.len() != q.len() {
        return Err(Error::dim(
            op,
            format!("p has {}, a has {}, q has {} entries", p.len(), a.len(), q.len()),
        ));
    }
    Ok(())
}

/// Exact variance of the `n`-draw estimator of `Σ_u p(u) a(u)`:
/// `(1/n) Σ_u (p(u) a(u) − μ q(u))² / q(u)`, summed over the support of `q`.
pub fn variance_exact(p: &[f64], a: &[f64], q: &[f64], n: usize) -> Result<f64> {
    check_lengths("variance_exact", p, a, q)?;
    if n == 0 {
        return Err(Error::Input("sample size must be positive".into()));
    }
    if let Some(u) = (0..p.len()).find(|&u| p[u] > 0.0 && q[u] <= 0.0) {
        return Err(Error::Support(format!("q({u}) = {} where p({u}) = {}", q[u], p[u])));
    }
    let mu: f64 = p.iter().zip(a).map(|(p, a)| p * a).sum();
    let total: f64 = (0..p.len())
        .filter(|&u| q[u] > 0.0)
        .map(|u| (p[u] * a[u] - mu * q[u]).powi(2) / q[u])
        .sum();
    Ok(total / n as f64)
}

/// [`variance_exact`] for parent `v`, with `q` over all nodes and `a` the row
/// magnitudes of `h`.
pub fn variance_exact_at(
    graph: &NormalizedGraph,
    v: usize,
    q: &[f64],
    h: &DenseMatrix,
    norm: Norm,
    n: usize,
) -> Result<f64> {
    let nodes = graph.num_nodes();
    if q.len() != nodes || h.rows() != nodes {
        return Err(Error::dim("variance_exact_at", "q and h need one entry per node"));
    }
    let p: Vec<f64> = (0..nodes)
        .map(|u| graph.conditional_prob(v, u))
        .collect::<Result<_>>()?;
    let a: Vec<f64> = (0..nodes).map(|u| norm.apply(h.row(u))).collect();
    variance_exact(&p, &a, q, n)
}

/// The variance-minimising sampler `q* ∝ p a`; falls back to `p` when `p a` vanishes.
pub fn optimal_sampler(p: &[f64], a: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = p.iter().zip(a).map(|(p, a)| p * a.abs()).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter().map(|x| x / total).collect()
    } else {
        let total: f64 = p.iter().sum();
        p.iter().map(|x| x / total).collect()
    }
}

/// Exact expectation `Σ_u q(u) (p(u)/q(u)) h(u)` of the importance-weighted row.
pub fn expectation_exact(p: &[f64], h: &DenseMatrix, q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != h.rows() || q.len() != p.len() {
        return Err(Error::dim("expectation_exact", "p, h and q must cover the same nodes"));
    }
    let mut out = vec![0.0; h.cols()];
    for u in (0..p.len()).filter(|&u| q[u] > 0.0) {
        let w = q[u] * (p[u] / q[u]);
        for (o, &x) in out.iter_mut().zip(h.row(u)) {
            *o += w * x;
        }
    }
    if let Some(u) = (0..p.len()).find(|&u| p[u] > 0.0 && q[u] <= 0.0) {
        return Err(Error::Support(format!("q({u}) = 0 where p({u}) > 0")));
    }
    Ok(out)
}

/// Sample estimate of the estimator variance from the drawn slots:
/// `(1/n²) Σ_j (p_j a_j − μ̂ q_j)² / q_j²` with `μ̂ = (1/n) Σ_j p_j a_j / q_j`.
pub fn variance_empirical(p: &[f64], a: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths("variance_empirical", p, a, q)?;
    let n = p.len();
    if n == 0 {
        return Err(Error::Input("no draws".into()));
    }
    if let Some(j) = q.iter().position(|&q| q <= 0.0) {
        return Err(Error::Support(format!("slot {j} has q = {}", q[j])));
    }
    let mu = (0..n).map(|j| p[j] * a[j] / q[j]).sum::<f64>() / n as f64;
    let total: f64 = (0..n).map(|j| (p[j] * a[j] - mu * q[j]).powi(2) / (q[j] * q[j])).sum();
    Ok(total / (n * n) as f64)
}

/// Closed form used for `∂V̂/∂q_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientForm {
    /// `−(2/n²) p a (p a − μ̂ q) / q³`.
    #[default]
    Correct,
    /// `−(1/n²) p a (p a − μ̂ q) / q³`, half the true derivative.
    Verbatim,
    /// The correct form with its sign flipped; only useful as a negative control.
    SignFlipped,
}

/// `∂V̂/∂q_j` for every slot, treating each slot's `q_j` as its own variable.
///
/// The dependence of `μ̂` on `q` drops out because the residuals sum to zero.
pub fn variance_empirical_grad(p: &[f64], a: &[f64], q: &[f64], form: GradientForm) -> Result<Vec<f64>> {
    check_lengths("variance_empirical_grad", p, a, q)?;
    let n = p.len() as f64;
    let mu = (0..p.len()).map(|j| p[j] * a[j] / q[j]).sum::<f64>() / n;
    let coef = match form {
        GradientForm::Correct => -2.0,
        GradientForm::Verbatim => -1.0,
        GradientForm::SignFlipped => 2.0,
    } / (n * n);
    Ok((0..p.len())
        .map(|j| {
            let pa = p[j] * a[j];
            coef * pa * (pa - mu * q[j]) / q[j].powi(3)
        })
        .collect())
}

/// Mean over the layer's parents of the sample variance estimate, on the tape.
///
/// `input` holds the hidden rows of the layer's slots; `None` uses the raw
/// feature rows (bottom layer). Uses the expanded form
/// `V̂_i = (S2_i − S1_i²/n) / n²` with `S1_i = Σ_j t_ij`, `S2_i = Σ_j t_ij²`
/// and `t_ij = p_ij a_j / q_j`, which equals the residual form exactly.
pub fn variance_penalty(
    tape: &mut Tape,
    layer: &LayerPlan,
    input: Option<Var>,
    inputs: &GraphInputs,
    slot_q: Var,
    norm: Norm,
) -> Result<Var> {
    let n = layer.draws as f64;
    let a = match input {
        Some(h) => tape.row_norm(h, norm)?,
        None => {
            let rows = inputs.features.gather_rows(&layer.sampled)?;
            let norms = (0..rows.rows()).map(|r| norm.apply(rows.row(r).1)).collect();
            tape.constant(DenseMatrix::column(norms))
        }
    };
    let cols = layer.pattern.indices();
    let a_e = tape.gather_rows(a, cols)?;
    let q_e = tape.gather_rows(slot_q, cols)?;
    let p = tape.constant(DenseMatrix::column(layer.p.clone()));
    let pa = tape.mul(p, a_e)?;
    let t = tape.div(pa, q_e)?;
    let ones = tape.constant(DenseMatrix::filled(layer.num_sampled(), 1, 1.0));
    let s1 = tape.spmm_weighted(&layer.pattern, t, ones)?;
    let t2 = tape.square(t)?;
    let s2 = tape.spmm_weighted(&layer.pattern, t2, ones)?;
    let s1_sq = tape.square(s1)?;
    let s1_sq = tape.scale(s1_sq, 1.0 / n)?;
    let diff = tape.sub(s2, s1_sq)?;
    let v = tape.scale(diff, 1.0 / (n * n))?;
    tape.mean(v)
}

/// Terms of `mean cross-entropy + λ · variance`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridLossReport {
    pub classification: f64,
    pub variance: f64,
    pub lambda: f64,
    pub total: f64,
}

impl HybridLossReport {
    pub fn new(classification: f64, variance: f64, lambda: f64) -> Self {
        Self {
            classification,
            variance,
            lambda,
            total: classification + lambda * variance,
        }
    }
}

/// Records the hybrid loss on the tape. A missing penalty counts as zero.
pub fn hybrid_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    penalty: Option<Var>,
    lambda: f64,
) -> Result<(Var, HybridLossReport)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let ce = tape.cross_entropy(logits, labels)?;
    let classification = tape.value(ce).item();
    let (total, variance) = match penalty {
        Some(v) if lambda > 0.0 => {
            let scaled = tape.scale(v, lambda)?;
            (tape.add(ce, scaled)?, tape.value(v).item())
        }
        Some(v) => (ce, tape.value(v).item()),
        None => (ce, 0.0),
    };
    let variance = variance.max(0.0);
    let report = HybridLossReport {
        classification,
        variance,
        lambda,
        total: tape.value(total).item(),
    };
    Ok((total, report))
}

/// Outcome of [`sampler_gradient_checks`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCheckReport {
    /// Largest deviation of the exact expectation across the tested `q`s.
    pub expectation_spread: f64,
    /// Largest relative error of the closed-form `∂V̂/∂q` against finite differences.
    pub q_gradient_error: f64,
    /// Ratio of the true derivative to the half-size closed form.
    pub verbatim_ratio: f64,
    /// Largest relative error of the tape gradient w.r.t. `W_g` against finite differences.
    pub w_g_gradient_error: f64,
}

/// Relative error with a floor proportional to `scale`, so that entries that
/// are zero up to rounding do not dominate.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic
        .abs()
        .max(numeric.abs())
        .max(1e-7 * scale)
        .max(f64::MIN_POSITIVE);
    (analytic - numeric).abs() / denom
}

/// `p(û_j | v_i)` for every slot `j` of a shared-slot layer, zero off the support.
pub fn slot_conditionals(layer: &LayerPlan, i: usize) -> Vec<f64> {
    let mut p = vec![0.0; layer.num_sampled()];
    for e in layer.pattern.row_range(i) {
        p[layer.pattern.indices()[e]] = layer.p[e];
    }
    p
}

/// Checks the sampler-side identities on a small graph:
/// the exact expectation does not depend on `q`, the closed-form derivative of
/// the variance estimate matches finite differences, and the tape gradient
/// through the learned sampler matches finite differences in `W_g`.
///
/// `h` holds one hidden row per node.
#[allow(clippy::too_many_arguments)]
pub fn sampler_gradient_checks<R: Rng + ?Sized>(
    graph: &NormalizedGraph,
    features: &DenseMatrix,
    params: &SamplerParams,
    parents: &[usize],
    h: &DenseMatrix,
    n: usize,
    form: GradientForm,
    rng: &mut R,
) -> Result<GradientCheckReport> {
    let nodes = graph.num_nodes();
    if h.rows() != nodes || features.rows() != nodes {
        return Err(Error::dim(
            "sampler_gradient_checks",
            "h and features need one row per node",
        ));
    }
    let x = SparseMatrix::from_dense(features);
    let scores = params.scores(&x)?;

    // Exact expectation under several strictly positive q's over the neighbourhood.
    let v = parents[0];
    let (cols, _) = graph.neighbors(v);
    let p: Vec<f64> = cols
        .iter()
        .map(|&u| graph.conditional_prob(v, u))
        .collect::<Result<_>>()?;
    let hv = h.gather_rows(cols)?;
    let a: Vec<f64> = (0..cols.len())
        .map(|k| hv.row(k).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let normalise = |w: Vec<f64>| -> Vec<f64> {
        let t: f64 = w.iter().sum();
        w.into_iter().map(|x| x / t).collect()
    };
    let qs = [
        vec![1.0 / cols.len() as f64; cols.len()],
        p.clone(),
        normalise(
            cols.iter()
                .zip(&p)
                .map(|(&u, p)| p * scores[u].abs().max(1e-3))
                .collect(),
        ),
        normalise(p.iter().zip(&a).map(|(p, a)| p * a.max(1e-3)).collect()),
        normalise((0..cols.len()).map(|_| rng.random_range(0.05..1.0)).collect()),
    ];
    let reference = expectation_exact(&p, &hv, &qs[0])?;
    let mut spread: f64 = 0.0;
    for q in &qs[1..] {
        let e = expectation_exact(&p, &hv, q)?;
        for (x, y) in e.iter().zip(&reference) {
            spread = spread.max((x - y).abs());
        }
    }

    // Closed-form derivative against central differences of the literal estimate.
    let layer = adaptive_layer_sample(graph, parents, params, &x, n, rng)?;
    let slot_a: Vec<f64> = layer.sampled.iter().map(|&u| Norm::L2.apply(h.row(u))).collect();
    let sp = slot_conditionals(&layer, 0);
    let analytic = variance_empirical_grad(&sp, &slot_a, &layer.q, form)?;
    let exact = variance_empirical_grad(&sp, &slot_a, &layer.q, GradientForm::Correct)?;
    let verbatim = variance_empirical_grad(&sp, &slot_a, &layer.q, GradientForm::Verbatim)?;
    let mut numeric = Vec::with_capacity(n);
    for j in 0..n {
        let step = 1e-6 * layer.q[j];
        let mut up = layer.q.clone();
        up[j] += step;
        let mut down = layer.q.clone();
        down[j] -= step;
        numeric
            .push((variance_empirical(&sp, &slot_a, &up)? - variance_empirical(&sp, &slot_a, &down)?) / (2.0 * step));
    }
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let q_gradient_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&an, &nu)| relative_error(an, nu, scale))
        .fold(0.0, f64::max);
    let verbatim_ratio = exact
        .iter()
        .zip(&verbatim)
        .filter(|(_, v)| v.abs() > 0.0)
        .map(|(e, v)| e / v)
        .next()
        .unwrap_or(f64::NAN);

    // Tape gradient through q(W_g) against finite differences of the literal estimate.
    let inputs = GraphInputs::new(graph.clone(), x.clone())?;
    let penalty_numeric = |w_g: &DenseMatrix| -> Result<f64> {
        let cands = layer.candidates().expect("layer-wise plan");
        let rows = x.gather_rows(&cands.nodes)?;
        let g = SamplerParams::new(w_g.clone()).scores(&rows)?;
        let w: Vec<f64> = cands.mass.iter().zip(&g).map(|(m, g)| m * g.abs()).collect();
        let total: f64 = w.iter().sum();
        let q: Vec<f64> = cands.slot_candidate.iter().map(|&c| w[c] / total).collect();
        let mut sum = 0.0;
        for i in 0..layer.num_parents() {
            sum += variance_empirical(&slot_conditionals(&layer, i), &slot_a, &q)?;
        }
        Ok(sum / layer.num_parents() as f64)
    };
    let mut tape = Tape::new();
    let model = crate::estimator::ModelParams {
        gcn: crate::estimator::GcnParams {
            filters: vec![DenseMatrix::zeros(features.cols(), 1)],
        },
        sampler: params.clone(),
    };
    let vars = ParamVars::register(&mut tape, &model);
    let slot_q = slot_probabilities(&mut tape, &layer, &inputs, &vars, QGradient::Pathwise)?;
    let hidden = tape.constant(h.gather_rows(&layer.sampled)?);
    let penalty = variance_penalty(&mut tape, &layer, Some(hidden), &inputs, slot_q, Norm::L2)?;
    let grads = tape.backward(penalty)?;
    let tape_grad = grads.get_or_zeros(vars.w_g, &params.w_g);
    let mut fd = Vec::with_capacity(params.w_g.cols());
    for c in 0..params.w_g.cols() {
        let step = 1e-6 * params.w_g.get(0, c).abs().max(1e-2);
        let mut up = params.w_g.clone();
        up.set(0, c, up.get(0, c) + step);
        let mut down = params.w_g.clone();
        down.set(0, c, down.get(0, c) - step);
        fd.push((penalty_numeric(&up)? - penalty_numeric(&down)?) / (2.0 * step));
    }
    let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let w_g_gradient_error = tape_grad
        .data()
        .iter()
        .zip(&fd)
        .map(|(&an, &nu)| relative_error(an, nu, scale))
        .fold(0.0, f64::max);

    Ok(GradientCheckReport {
        expectation_spread: spread,
        q_gradient_error,
        verbatim_ratio,
        w_g_gradient_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_magnitude_at_p_has_zero_variance() {
        let p = [0.2, 0.3, 0.5];
        let a = [2.0; 3];
        assert!(variance_exact(&p, &a, &p, 4).unwrap().abs() < 1e-15);
    }

    #[test]
    fn variance_scales_as_one_over_n() {
        let p = [0.2, 0.3, 0.5];
        let a = [1.0, 4.0, 0.5];
        let q = [0.4, 0.4, 0.2];
        let v1 = variance_exact(&p, &a, &q, 3).unwrap();
        let v2 = variance_exact(&p, &a, &q, 6).unwrap();
        assert!((v1 - 2.0 * v2).abs() < 1e-15);
    }

    #[test]
    fn zero_q_on_support_is_error() {
        assert!(matches!(
            variance_exact(&[0.5, 0.5], &[1.0, 1.0], &[1.0, 0.0], 1),
            Err(Error::Support(_))
        ));
    }

    #[test]
    fn single_draw_has_zero_estimate() {
        assert_eq!(variance_empirical(&[0.3], &[2.0], &[0.7]).unwrap(), 0.0);
    }

    #[test]
    fn optimal_sampler_is_zero_variance() {
        let p = [0.1, 0.6, 0.3];
        let a = [3.0, 1.0, 2.0];
        let q = optimal_sampler(&p, &a);
        assert!(variance_exact(&p, &a, &q, 5).unwrap().abs() < 1e-14);
    }

    #[test]
    fn report_arithmetic() {
        let r = HybridLossReport::new(1.0, 0.2, 0.5);
        assert!((r.total - 1.1).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_is_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.param(DenseMatrix::from_rows(&[[1.0, -1.0], [0.5, 0.2]]).unwrap());
        let pen = tape.constant(DenseMatrix::scalar(3.0));
        let (total, report) = hybrid_loss(&mut tape, logits, &[0, 1], Some(pen), 0.0).unwrap();
        let mut t2 = Tape::new();
        let l2 = t2.param(tape.value(logits).clone());
        let ce = t2.cross_entropy(l2, &[0, 1]).unwrap();
        assert_eq!(tape.value(total).item(), t2.value(ce).item());
        assert_eq!(report.total, report.classification);
        assert!(hybrid_loss(&mut tape, logits, &[0, 1], None, -1.0).is_err());
    }

    #[test]
    fn closed_form_gradient_is_twice_the_half_form() {
        let p = [0.2, 0.0, 0.5, 0.3];
        let a = [1.0, 2.0, 0.5, 3.0];
        let q = [0.3, 0.2, 0.1, 0.4];
        let full = variance_empirical_grad(&p, &a, &q, GradientForm::Correct).unwrap();
        let half = variance_empirical_grad(&p, &a, &q, GradientForm::Verbatim).unwrap();
        for (f, h) in full.iter().zip(&half) {
            assert!((f - 2.0 * h).abs() < 1e-15);
        }
        assert_eq!(full[1], 0.0);
    }
}

//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] records every operation as a node holding its value and the
//! handles of its inputs. Inputs always precede their consumers, so walking
//! the node list backwards is a valid topological order for the backward
//! pass. Only first derivatives are supported.
//!
//! ```
//! use lwgcn_core::tensor::{DenseMatrix, Tape};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(DenseMatrix::from_rows(&[[2.0], [3.0]]).unwrap());
//! let x = tape.constant(DenseMatrix::from_rows(&[[1.0, 4.0]]).unwrap());
//! let y = tape.matmul(x, w).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(tape.value(loss).item(), 14.0);
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, 4.0]);
//! ```

use std::sync::Arc;

use super::dense::DenseMatrix;
use super::sparse::{SparseMatrix, SparsePattern};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row reduction used to turn a hidden feature vector into a magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L2,
    L1,
}

impl Norm {
    pub fn apply(self, row: &[f64]) -> f64 {
        match self {
            Norm::L2 => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Norm::L1 => row.iter().map(|v| v.abs()).sum(),
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Norm::L2),
            "l1" => Ok(Norm::L1),
            other => Err(Error::Config(format!("unknown norm '{other}' (valid: l2, l1)"))),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    SpMM(SparseMatrix, Var),
    SpMMWeighted(Arc<SparsePattern>, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MulRows(Var, Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    GatherRows(Var, Arc<[usize]>),
    Sum(Var),
    RowNorm(Var, Norm),
    SoftmaxRows(Var),
    CrossEntropy(Var, Arc<[usize]>, DenseMatrix),
}

#[derive(Debug, Clone)]
struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// require gradients or the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `value` when absent.
    pub fn get_or_zeros(&self, v: Var, value: &DenseMatrix) -> DenseMatrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| DenseMatrix::zeros(value.rows(), value.cols()))
    }
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::dim(
            op,
            format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: DenseMatrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: DenseMatrix, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                context: name.to_string(),
                detail: format!("{}x{} result contains NaN or Inf", value.rows(), value.cols()),
            });
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MulScalar(a, b)
            | Op::MulRows(a, b) => vec![*a, *b],
            Op::SpMMWeighted(_, w, d) => vec![*w, *d],
            Op::Transpose(a)
            | Op::SpMM(_, a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::GatherRows(a, _)
            | Op::Sum(a)
            | Op::RowNorm(a, _)
            | Op::SoftmaxRows(a)
            | Op::CrossEntropy(a, _, _) => vec![*a],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), "transpose")
    }

    /// Constant sparse matrix times a differentiable dense matrix.
    pub fn spmm(&mut self, s: &SparseMatrix, d: Var) -> Result<Var> {
        let value = s.spmm(self.value(d))?;
        self.push(value, Op::SpMM(s.clone(), d), "spmm")
    }

    /// Sparse matrix with the given pattern and differentiable entry values
    /// (an `nnz x 1` column) times a dense matrix.
    pub fn spmm_weighted(&mut self, pattern: &Arc<SparsePattern>, weights: Var, d: Var) -> Result<Var> {
        let w = self.value(weights);
        if w.cols() != 1 || w.rows() != pattern.nnz() {
            return Err(Error::dim(
                "spmm_weighted",
                format!("weights {}x{} for {} stored entries", w.rows(), w.cols(), pattern.nnz()),
            ));
        }
        let value = pattern.spmm_with(w.data(), self.value(d))?;
        self.push(value, Op::SpMMWeighted(pattern.clone(), weights, d), "spmm_weighted")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), "sub")
    }

    /// Entry-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), "mul")
    }

    /// Entry-wise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(value, Op::Div(a, b), "div")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), "scale")
    }

    /// Multiplies every entry of `a` by the 1x1 variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::dim("mul_scalar", "scalar operand must be 1x1"));
        }
        let k = self.value(s).item();
        let value = self.value(a).scale(k);
        self.push(value, Op::MulScalar(a, s), "mul_scalar")
    }

    /// Scales row `r` of `a` by entry `r` of the column `c`.
    pub fn mul_rows(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(c));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(Error::dim(
                "mul_rows",
                format!("{}x{} scaled by {}x{}", av.rows(), av.cols(), cv.rows(), cv.cols()),
            ));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            let k = cv.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|x| *x *= k);
        }
        self.push(value, Op::MulRows(a, c), "mul_rows")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), "relu")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a), "abs")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), "square")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(idx)?;
        self.push(value, Op::GatherRows(a, idx.into()), "gather_rows")
    }

    /// Sum of all entries as a 1x1 matrix.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = DenseMatrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Input("mean of an empty matrix".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row magnitude as an `rows x 1` column.
    pub fn row_norm(&mut self, a: Var, norm: Norm) -> Result<Var> {
        let av = self.value(a);
        let value = DenseMatrix::column((0..av.rows()).map(|r| norm.apply(av.row(r))).collect());
        self.push(value, Op::RowNorm(a, norm), "row_norm")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = softmax(self.value(a));
        self.push(value, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Mean cross entropy between `softmax(logits)` and integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() || lv.rows() == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), lv.rows()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= lv.cols()) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {} classes",
                lv.cols()
            )));
        }
        let probs = softmax(lv);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = DenseMatrix::scalar(total / labels.len() as f64);
        self.push(value, Op::CrossEntropy(logits, labels.into(), probs), "cross_entropy")
    }

    /// Back-propagates from the 1x1 node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::dim("backward", "root must be a 1x1 scalar"));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(DenseMatrix::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.iter_mut().enumerate() {
            if !self.nodes[idx].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::SpMM(s, d) => {
                self.accumulate(grads, *d, s.pattern().spmm_t_with(s.values(), g)?);
            }
            Op::SpMMWeighted(pattern, w, d) => {
                if self.wants(*w) {
                    let gw = pattern.entry_dots(g, self.value(*d));
                    self.accumulate(grads, *w, DenseMatrix::column(gw));
                }
                if self.wants(*d) {
                    let gd = pattern.spmm_t_with(self.value(*w).data(), g)?;
                    self.accumulate(grads, *d, gd);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let mut gb = g.clone();
                    for ((o, &x), &y) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *o = -*o * x / (y * y);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                self.accumulate(grads, *a, g.scale(k));
                if self.wants(*s) {
                    let dot: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, DenseMatrix::scalar(dot));
                }
            }
            Op::MulRows(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let k = cv.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= k);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*c) {
                    let gc = (0..av.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *c, DenseMatrix::column(gc));
                }
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |x, y| {
                    if y > 0.0 {
                        x
                    } else if y < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |x, y| 2.0 * x * y);
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                for (out_row, &src) in idx.iter().enumerate() {
                    let gr = g.row(out_row);
                    for (o, &x) in ga.row_mut(src).iter_mut().zip(gr) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, DenseMatrix::filled(av.rows(), av.cols(), g.item()));
            }
            Op::RowNorm(a, norm) => {
                let av = self.value(*a);
                let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let gr = g.get(r, 0);
                    let row = av.row(r);
                    match norm {
                        Norm::L2 => {
                            let n = node.value.get(r, 0);
                            if n > 0.0 {
                                for (o, &x) in ga.row_mut(r).iter_mut().zip(row) {
                                    *o = gr * x / n;
                                }
                            }
                        }
                        Norm::L1 => {
                            for (o, &x) in ga.row_mut(r).iter_mut().zip(row) {
                                *o = gr
                                    * if x > 0.0 {
                                        1.0
                                    } else if x < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    };
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let s = &node.value;
                let mut ga = DenseMatrix::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let dot: f64 = g.row(r).iter().zip(s.row(r)).map(|(x, y)| x * y).sum();
                    for ((o, &gx), &sx) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(s.row(r)) {
                        *o = sx * (gx - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropy(a, labels, probs) => {
                let k = g.item() / labels.len() as f64;
                let mut ga = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let row = ga.row_mut(r);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= k);
                }
                self.accumulate(grads, *a, ga);
            }
        }
        Ok(())
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut t = Tape::new();
        let x = t.constant(DenseMatrix::from_rows(&[[-1.0, 0.0, 2.0]]).unwrap());
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_softmax() {
        let mut t = Tape::new();
        let x = t.constant(DenseMatrix::filled(2, 4, 3.7));
        let s = t.softmax_rows(x).unwrap();
        for &p in t.value(s).data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn confident_cross_entropy_near_zero() {
        let mut t = Tape::new();
        let x = t.constant(DenseMatrix::from_rows(&[[10.0, -10.0]]).unwrap());
        let ce = t.cross_entropy(x, &[0]).unwrap();
        let v = t.value(ce).item();
        assert!((0.0..1e-4).contains(&v));
        assert!((v - (-20.0f64).exp().ln_1p()).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        let mut t = Tape::new();
        let x = t.constant(DenseMatrix::zeros(1, 2));
        assert!(matches!(t.cross_entropy(x, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut t = Tape::new();
        let a = t.constant(DenseMatrix::scalar(1.0));
        let z = t.constant(DenseMatrix::scalar(0.0));
        assert!(matches!(t.div(a, z), Err(Error::Numeric { .. })));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::new();
        let x = t.param(DenseMatrix::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let grads = t.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(DenseMatrix::scalar(2.0));
        let p = t.param(DenseMatrix::scalar(5.0));
        let y = t.mul(c, p).unwrap();
        let grads = t.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }
}

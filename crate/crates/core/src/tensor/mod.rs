//! Dense and sparse matrices, a reverse-mode tape, and Adam.

mod adam;
mod dense;
mod sparse;
mod tape;

pub use adam::AdamState;
pub use dense::DenseMatrix;
pub use sparse::{SparseMatrix, SparsePattern};
pub use tape::{softmax, Gradients, Norm, Tape, Var};

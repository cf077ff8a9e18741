//! Dense linear algebra and a reverse-mode gradient tape, sized for small
//! MLPs and QPs with a handful of variables.

mod linalg;
mod matrix;
pub mod nn;
mod tape;

pub use linalg::{solve_linear, symmetric_eigenvalues, Lu, PIVOT_TOL};
pub use matrix::Matrix;
pub use tape::{abs_grad, sigmoid, softplus, Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("singular system: pivot {pivot:e} in column {column}")]
    Singular { pivot: f64, column: usize },
    #[error("contract violated: {0}")]
    Contract(String),
}

//! Shared numerical kernels: dense constrained quadratic programming and
//! derivative-free nonlinear least squares.

mod nls;
mod qp;

pub use nls::{solve_nls, NlsProblem, NlsSolution};
pub use qp::{solve_qp, Qp, QpSolution, DEFAULT_QP_TOL};

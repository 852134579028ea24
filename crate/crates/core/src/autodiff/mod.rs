//! Reverse-mode differentiation on a tape of matrix-valued primitives.

mod check;
mod scan;
mod tape;

pub use check::{finite_difference_check, grad, FdReport};
pub use scan::ScanDims;
pub use tape::{Gradients, ScanInputs, Tape, Var};

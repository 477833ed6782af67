//! Dense `f64` tensors and a reverse-mode tape.

mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    check_parameters, finite_difference_check, grad_check, GradCheckConfig, GradCheckReport,
};
pub use params::ParamSet;
pub(crate) use tape::{softmax_in_place, top_indices};
pub use tape::{FlopTally, Tape, Var};
pub use tensor::Tensor;

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

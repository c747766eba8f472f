//! Dense feed-forward networks with exact reverse-mode gradients, Adam, and
//! Polyak averaging.

mod adam;
mod net;
mod text;

pub use adam::{AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use net::{
    init_bound, soft_update, Activation, BatchGradients, DenseNet, ForwardTrace, GradientBundle, ParamGrads,
};
pub use text::FORMAT_VERSION;

pub(crate) use text::{fmt_f64, LineReader};

use ndarray::{concatenate, Array2, ArrayView2, Axis};

/// Stacks equal-length rows into an `(n, dim)` matrix.
pub fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Array2<f64> {
    let mut data = Vec::new();
    let mut n = 0;
    for row in rows {
        debug_assert_eq!(row.len(), dim);
        data.extend_from_slice(row);
        n += 1;
    }
    Array2::from_shape_vec((n, dim), data).expect("rows have equal length")
}

/// `[left | right]` column concatenation.
pub fn concat_cols(left: ArrayView2<f64>, right: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[left, right]).expect("row counts match")
}

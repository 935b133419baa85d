//! Dense arithmetic, differentiable primitives and the seeded random stream.
//!
//! Everything here is a pure function of its inputs. Reductions always run
//! in index order so results are bit-reproducible.

mod matrix;
mod ops;
mod rng;

pub use matrix::Matrix;
pub use ops::{
    affine_backward, affine_forward, relu_backward, relu_forward, sgd_update, softmax2_backward,
    softmax2_forward, AffineGrads,
};
pub use rng::{streams, Rng};

/// Denominator floor of [`relative_error`].
///
/// A central difference with step `1e-5` carries roundoff of order
/// `ulp(L) / 1e-5`, about `1e-11` for losses of order one, even when the true
/// derivative is exactly zero. The floor keeps that noise well below the
/// tightest tolerance used (`1e-6`).
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

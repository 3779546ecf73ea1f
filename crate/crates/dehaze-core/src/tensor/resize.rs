//! Bilinear resampling as explicit interpolation matrices.
//!
//! A resize along one axis is a dense [dst, src] matrix with at most two
//! nonzero entries per row; 2-D resize applies the row matrix from the left
//! and the transposed column matrix from the right. The backward pass is then
//! exactly the transposed pair — no separate adjoint code path to get wrong.

use ndarray::Array2;

use crate::scalar::Scalar;

/// Interpolation matrix for a half-pixel-centered bilinear resize
/// (the align_corners=false convention).
pub fn resize_matrix<F: Scalar>(src: usize, dst: usize) -> Array2<F> {
    assert!(src > 0 && dst > 0, "resize: empty axis");
    let mut m = Array2::<F>::zeros((dst, src));
    let scale = src as f64 / dst as f64;
    for od in 0..dst {
        let sp = (od as f64 + 0.5) * scale - 0.5;
        let sp = sp.max(0.0);
        let i0 = (sp.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        let w1 = sp - i0 as f64;
        let w1 = w1.clamp(0.0, 1.0);
        m[[od, i0]] += F::from_f64(1.0 - w1);
        m[[od, i1]] += F::from_f64(w1);
    }
    m
}

//! The atmospheric scattering model: I = J*T + A*(1 - T).
//!
//! Synthesis (building hazy training pairs) and reconstruction (the network's
//! physics heads) use the same mixing rule; [`scatter_mix`] is that rule in
//! one place, and the array and graph paths both delegate to it in spirit —
//! the graph path mirrors it with differentiable ops term by term.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::{ImagePlane, ScatteringParams, TransmissionMap};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One pixel of the scattering model: `j*t + a*(1 - t)`.
#[inline]
pub fn scatter_mix<F: Scalar>(j: F, t: F, a: F) -> F {
    j * t + a * (F::one() - t)
}

/// Transmission from scene depth: T = exp(-beta * depth).
///
/// Depth must be finite and non-negative. The result is strictly positive,
/// so it satisfies the synthesized-map bounds by construction.
pub fn transmission_from_depth<F: Scalar>(
    depth: &Array2<F>,
    beta: f64,
) -> Result<TransmissionMap<F>> {
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::invalid(
            "transmission",
            format!("scattering coefficient {beta} must be positive and finite"),
        ));
    }
    for &d in depth.iter() {
        let d = Scalar::to_f64(d);
        if !d.is_finite() || d < 0.0 {
            return Err(Error::invalid(
                "transmission",
                format!("depth value {d} must be finite and non-negative"),
            ));
        }
    }
    // exp underflows to exactly 0 at extreme optical depth; floor at the
    // smallest positive value so the strictly-positive invariant holds.
    let b = F::from_f64(beta);
    TransmissionMap::synthesized(depth.mapv(|d| (-b * d).exp().max(F::min_positive_value())))
}

/// Composes a hazy image from a clean image, a transmission map and global
/// scattering parameters. Output values are clipped into [0, 1]; in exact
/// arithmetic the mix is convex so clipping only absorbs rounding.
pub fn compose_hazy<F: Scalar>(
    clean: &ImagePlane<F>,
    transmission: &TransmissionMap<F>,
    params: &ScatteringParams,
) -> Result<ImagePlane<F>> {
    let (h, w) = (clean.height(), clean.width());
    if (transmission.height(), transmission.width()) != (h, w) {
        return Err(Error::shape(
            "compose: transmission vs clean",
            &[h, w],
            &[transmission.height(), transmission.width()],
        ));
    }
    let atmosphere = params.atmosphere_plane::<F>(h, w, clean.colorspace())?;
    let mut out = clean.data().clone();
    let t = transmission.data();
    let a = atmosphere.data();
    for y in 0..h {
        for x in 0..w {
            let tv = t[[y, x]];
            for c in 0..clean.channels() {
                out[[y, x, c]] = scatter_mix(out[[y, x, c]], tv, a[[y, x, c]]);
            }
        }
    }
    ImagePlane::new_clipped(out, clean.colorspace())
}

/// Inverts the scattering model: J = (I - A*(1 - T)) / T, clipped to [0, 1].
///
/// The left inverse of [`compose_hazy`] wherever the composition did not
/// clip; numerical error grows as T approaches zero.
pub fn invert_hazy<F: Scalar>(
    hazy: &ImagePlane<F>,
    transmission: &TransmissionMap<F>,
    params: &ScatteringParams,
) -> Result<ImagePlane<F>> {
    let (h, w) = (hazy.height(), hazy.width());
    if (transmission.height(), transmission.width()) != (h, w) {
        return Err(Error::shape(
            "invert: transmission vs hazy",
            &[h, w],
            &[transmission.height(), transmission.width()],
        ));
    }
    let atmosphere = params.atmosphere_plane::<F>(h, w, hazy.colorspace())?;
    let mut out = hazy.data().clone();
    let t = transmission.data();
    let a = atmosphere.data();
    for y in 0..h {
        for x in 0..w {
            let tv = t[[y, x]];
            if tv == F::zero() {
                return Err(Error::invalid(
                    "invert",
                    "transmission reaches zero; scene radiance unrecoverable",
                ));
            }
            for c in 0..hazy.channels() {
                out[[y, x, c]] = (out[[y, x, c]] - a[[y, x, c]] * (F::one() - tv)) / tv;
            }
        }
    }
    ImagePlane::new_clipped(out, hazy.colorspace())
}

/// Differentiable reconstruction used by the network's physics heads.
///
/// `j` and `a` are NCHW, `t` is N1HW and is broadcast across channels. No
/// clipping happens here; reconstructions feed losses, not image export.
pub fn reconstruct_hazy<F: Scalar>(j: &Tensor<F>, t: &Tensor<F>, a: &Tensor<F>) -> Tensor<F> {
    let channels = j.shape()[1];
    let t_full = t.repeat_channels(channels);
    let direct = j.mul(&t_full);
    let airlight = a.mul(&t_full.one_minus());
    direct.add(&airlight)
}

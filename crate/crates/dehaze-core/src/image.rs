//! In-memory image, transmission and scattering-parameter types.
//!
//! Images are height x width x channel arrays of normalized values in [0, 1].
//! Grayscale uses one channel, color uses three; nothing else is accepted, so
//! downstream code can branch on channel count alone.

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colorspace {
    Gray,
    Rgb,
}

impl Colorspace {
    pub fn channels(self) -> usize {
        match self {
            Colorspace::Gray => 1,
            Colorspace::Rgb => 3,
        }
    }
}

/// A normalized image plane, stored HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane<F: Scalar> {
    data: Array3<F>,
    colorspace: Colorspace,
}

/// Owned arrays inherit the strides of the view they came from (a flipped
/// crop keeps its negative stride, a permuted copy its permutation), which
/// breaks later reshapes. Both image types normalize on construction so no
/// consumer has to care.
fn standardize<F: Scalar, D: ndarray::Dimension>(
    a: ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl<F: Scalar> ImagePlane<F> {
    /// Wraps an HWC array; every value must be finite and in [0, 1].
    pub fn new(data: Array3<F>, colorspace: Colorspace) -> Result<Self> {
        let data = standardize(data);
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid("image", "empty spatial dimensions"));
        }
        if c != colorspace.channels() {
            return Err(Error::shape(
                "image channels",
                &[colorspace.channels()],
                &[c],
            ));
        }
        for &v in data.iter() {
            let v = Scalar::to_f64(v);
            if !v.is_finite() {
                return Err(Error::invalid("image", "non-finite pixel value"));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(
                    "image",
                    format!("pixel value {v} outside [0, 1]"),
                ));
            }
        }
        Ok(ImagePlane { data, colorspace })
    }

    /// Like [`ImagePlane::new`] but clips values into [0, 1] first.
    /// Non-finite values are still rejected (checked before the clip, since
    /// IEEE max/min would silently turn NaN into a bound).
    pub fn new_clipped(data: Array3<F>, colorspace: Colorspace) -> Result<Self> {
        if data.iter().any(|&v| !Scalar::to_f64(v).is_finite()) {
            return Err(Error::invalid("image", "non-finite pixel value"));
        }
        let clipped = data.mapv(|v| v.max(F::zero()).min(F::one()));
        Self::new(clipped, colorspace)
    }

    /// Uniform plane, e.g. a spatially constant atmospheric-light map.
    pub fn constant(h: usize, w: usize, values: &[f64], colorspace: Colorspace) -> Result<Self> {
        if values.len() != colorspace.channels() {
            return Err(Error::shape(
                "constant image values",
                &[colorspace.channels()],
                &[values.len()],
            ));
        }
        let data = Array3::from_shape_fn((h, w, values.len()), |(_, _, c)| {
            F::from_f64(values[c])
        });
        Self::new(data, colorspace)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn colorspace(&self) -> Colorspace {
        self.colorspace
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn into_data(self) -> Array3<F> {
        self.data
    }

    /// CHW copy for feeding the network.
    pub fn to_chw(&self) -> Array3<F> {
        standardize(self.data.view().permuted_axes([2, 0, 1]).to_owned())
    }

    /// Rebuilds an image from a CHW array (values are clipped).
    pub fn from_chw(chw: Array3<F>, colorspace: Colorspace) -> Result<Self> {
        let hwc = chw.permuted_axes([1, 2, 0]).to_owned();
        Self::new_clipped(hwc, colorspace)
    }

    /// Element-wise conversion to another scalar type.
    pub fn convert<G: Scalar>(&self) -> ImagePlane<G> {
        ImagePlane {
            data: self.data.mapv(|v| G::from_f64(Scalar::to_f64(v))),
            colorspace: self.colorspace,
        }
    }

    /// Round-trips each value through the 8-bit quantization used on disk.
    pub fn quantized_u8(&self) -> ImagePlane<F> {
        ImagePlane {
            data: self.data.mapv(|v| {
                let q = (Scalar::to_f64(v) * 255.0).round().clamp(0.0, 255.0);
                F::from_f64(q / 255.0)
            }),
            colorspace: self.colorspace,
        }
    }
}

/// Stacks same-shaped images into an NCHW batch.
pub fn stack_chw<F: Scalar>(images: &[&ImagePlane<F>]) -> Result<Array4<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyDataset {
            context: "stack_chw".to_string(),
        })?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if (img.height(), img.width(), img.channels()) != (h, w, c) {
            return Err(Error::shape(
                "stack_chw",
                &[h, w, c],
                &[img.height(), img.width(), img.channels()],
            ));
        }
        out.index_axis_mut(Axis(0), i).assign(&img.to_chw());
    }
    Ok(out)
}

/// Per-pixel transmission in the scattering model.
///
/// Synthesized maps are strictly positive (depth is finite), predicted maps
/// may reach zero exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap<F: Scalar> {
    data: Array2<F>,
}

impl<F: Scalar> TransmissionMap<F> {
    /// A map produced by the physics synthesizer: values in (0, 1].
    pub fn synthesized(data: Array2<F>) -> Result<Self> {
        let data = standardize(data);
        Self::validate(&data, true)?;
        Ok(TransmissionMap { data })
    }

    /// A map predicted by the network: values in [0, 1].
    pub fn predicted(data: Array2<F>) -> Result<Self> {
        let data = standardize(data);
        Self::validate(&data, false)?;
        Ok(TransmissionMap { data })
    }

    fn validate(data: &Array2<F>, strict_positive: bool) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("transmission", "empty map"));
        }
        for &v in data.iter() {
            let v = Scalar::to_f64(v);
            if !v.is_finite() {
                return Err(Error::invalid("transmission", "non-finite value"));
            }
            if v > 1.0 || v < 0.0 || (strict_positive && v == 0.0) {
                let lo = if strict_positive { "(0, 1]" } else { "[0, 1]" };
                return Err(Error::invalid(
                    "transmission",
                    format!("value {v} outside {lo}"),
                ));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<F> {
        &self.data
    }

    /// View as a single-channel image, e.g. for export.
    pub fn to_plane(&self) -> ImagePlane<F> {
        let (h, w) = self.data.dim();
        let data = self
            .data
            .clone()
            .into_shape((h, w, 1))
            .expect("reshape HW -> HW1");
        ImagePlane {
            data,
            colorspace: Colorspace::Gray,
        }
    }

    pub fn convert<G: Scalar>(&self) -> TransmissionMap<G> {
        TransmissionMap {
            data: self.data.mapv(|v| G::from_f64(Scalar::to_f64(v))),
        }
    }
}

/// Global scattering parameters for one synthesized sample.
///
/// Atmospheric light is stored per channel; a scalar draw is replicated
/// across the triple. Ranges follow the synthesizer's sampling intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatteringParams {
    pub atmosphere: [f64; 3],
    pub beta: f64,
}

impl ScatteringParams {
    pub const ATMOSPHERE_RANGE: (f64, f64) = (0.5, 1.0);
    pub const BETA_RANGE: (f64, f64) = (0.5, 2.0);

    pub fn new(atmosphere: [f64; 3], beta: f64) -> Result<Self> {
        let (alo, ahi) = Self::ATMOSPHERE_RANGE;
        for a in atmosphere {
            if !a.is_finite() || !(alo..=ahi).contains(&a) {
                return Err(Error::invalid(
                    "scattering params",
                    format!("atmospheric light {a} outside [{alo}, {ahi}]"),
                ));
            }
        }
        let (blo, bhi) = Self::BETA_RANGE;
        if !beta.is_finite() || !(blo..=bhi).contains(&beta) {
            return Err(Error::invalid(
                "scattering params",
                format!("scattering coefficient {beta} outside [{blo}, {bhi}]"),
            ));
        }
        Ok(ScatteringParams { atmosphere, beta })
    }

    pub fn uniform(a: f64, beta: f64) -> Result<Self> {
        Self::new([a, a, a], beta)
    }

    /// The atmospheric light replicated over an h x w plane.
    pub fn atmosphere_plane<F: Scalar>(
        &self,
        h: usize,
        w: usize,
        colorspace: Colorspace,
    ) -> Result<ImagePlane<F>> {
        match colorspace {
            Colorspace::Rgb => ImagePlane::constant(h, w, &self.atmosphere, colorspace),
            Colorspace::Gray => {
                let mean = (self.atmosphere[0] + self.atmosphere[1] + self.atmosphere[2]) / 3.0;
                ImagePlane::constant(h, w, &[mean], colorspace)
            }
        }
    }
}

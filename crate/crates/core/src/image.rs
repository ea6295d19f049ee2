//! Square images and the normalization rule.
//!
//! An [`Image`] is a square matrix of finite `f64` pixel intensities on the
//! cyclic grid Z_L × Z_L. The toolkit treats images as signals on the torus:
//! every shift, convolution, and block operation wraps around. Estimators
//! work on raw intensities; [`normalize_unit_range`] is the single place where
//! inputs get mapped into the canonical [0, 1] range.

use ndarray::Array2;

use crate::error::{invalid, SrError, SrResult};

/// Square, finite-valued image on the cyclic L×L grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array2<f64>,
}

impl Image {
    /// Wraps a matrix, enforcing squareness, nonzero size, and finiteness.
    pub fn new(data: Array2<f64>) -> SrResult<Self> {
        let (r, c) = data.dim();
        if r != c || r == 0 {
            return Err(SrError::Shape {
                what: "Image::new",
                detail: format!("expected nonempty square matrix, got {r}x{c}"),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(SrError::NonFinite { what: "image pixels" });
        }
        Ok(Image { data })
    }

    /// Builds the all-zero image of side `l`.
    pub fn zeros(l: usize) -> Self {
        Image {
            data: Array2::zeros((l, l)),
        }
    }

    /// Side length L.
    pub fn side(&self) -> usize {
        self.data.nrows()
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.data
    }

    /// Row-major pixel slice (ndarray's standard layout for owned arrays).
    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("owned Array2 is contiguous")
    }

    /// Frobenius norm of the pixel matrix.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Outcome of the normalization rule, so callers can tell whether the input
/// actually spanned a range or was constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeOutcome {
    /// Affinely rescaled; output has min 0 and max 1.
    Rescaled,
    /// Input was constant; returned unchanged.
    Constant,
}

/// Affinely rescales pixel values to span exactly [0, 1].
///
/// Constant images cannot be rescaled and are returned unchanged, flagged
/// with [`NormalizeOutcome::Constant`].
pub fn normalize_unit_range(img: &Image) -> (Image, NormalizeOutcome) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in img.data.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        return (img.clone(), NormalizeOutcome::Constant);
    }
    let scale = 1.0 / (hi - lo);
    let data = img.data.mapv(|v| (v - lo) * scale);
    (Image { data }, NormalizeOutcome::Rescaled)
}

/// Clips every pixel into [lo, hi]. Used by the solvers to keep iterates in a
/// sane range before handing them to a denoiser.
pub fn clip(img: &Image, lo: f64, hi: f64) -> Image {
    debug_assert!(lo <= hi);
    Image {
        data: img.data.mapv(|v| v.clamp(lo, hi)),
    }
}

impl TryFrom<Array2<f64>> for Image {
    type Error = SrError;
    fn try_from(data: Array2<f64>) -> SrResult<Self> {
        Image::new(data)
    }
}

/// Builds an image from a row-major slice of length `l*l`.
pub fn image_from_rows(l: usize, values: &[f64]) -> SrResult<Image> {
    if values.len() != l * l {
        return Err(invalid(
            "image_from_rows",
            format!("expected {} values for side {l}, got {}", l * l, values.len()),
        ));
    }
    let data = Array2::from_shape_vec((l, l), values.to_vec())
        .expect("length checked above");
    Image::new(data)
}

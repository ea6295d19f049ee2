//! Built-in synthetic test images.
//!
//! Three closed-form phantoms cover the texture classes the estimators are
//! exercised on: `blobs` (smooth sums of anisotropic Gaussians), `checker`
//! (a hard-edged periodic checkerboard whose cell size divides the image
//! side), and `shepp_like` (piecewise-constant overlapping ellipses). All
//! are deterministic functions of the side length alone and are normalized
//! so their pixel values span [0, 1] exactly.

use std::str::FromStr;

use ndarray::Array2;

use crate::error::{invalid, SrResult};
use crate::image::{normalize_unit_range, Image};

/// Selector for the built-in phantoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    /// Smooth sum of anisotropic Gaussian bumps.
    Blobs,
    /// Periodic checkerboard; cell side is `gcd(l, max(1, l/16))` so cells
    /// always tile the torus evenly.
    Checker,
    /// Piecewise-constant overlapping ellipses.
    SheppLike,
}

impl PhantomKind {
    pub const ALL_NAMES: [&'static str; 3] = ["blobs", "checker", "shepp_like"];

    pub fn name(&self) -> &'static str {
        match self {
            PhantomKind::Blobs => "blobs",
            PhantomKind::Checker => "checker",
            PhantomKind::SheppLike => "shepp_like",
        }
    }
}

impl FromStr for PhantomKind {
    type Err = crate::error::SrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blobs" => Ok(PhantomKind::Blobs),
            "checker" => Ok(PhantomKind::Checker),
            "shepp_like" => Ok(PhantomKind::SheppLike),
            other => Err(invalid(
                "phantom name",
                &format!("unknown phantom '{other}'; expected one of {:?}", Self::ALL_NAMES),
            )),
        }
    }
}

/// Deterministic synthetic image of side `l ≥ 8`, normalized to span [0, 1].
pub fn builtin_phantom(kind: PhantomKind, l: usize) -> SrResult<Image> {
    if l < 8 {
        return Err(invalid("phantom side", "must be at least 8"));
    }
    let raw = match kind {
        PhantomKind::Blobs => blobs(l),
        PhantomKind::Checker => checker(l),
        PhantomKind::SheppLike => shepp_like(l),
    };
    let (img, _) = normalize_unit_range(&Image::new(raw)?);
    Ok(img)
}

/// [`builtin_phantom`] addressed by name (for CLI and config files).
pub fn phantom_by_name(name: &str, l: usize) -> SrResult<Image> {
    builtin_phantom(name.parse()?, l)
}

/// Checkerboard cell side: the largest value ≤ `max(1, l/16)` that divides
/// `l`, via the gcd.
pub fn checker_cell(l: usize) -> usize {
    gcd(l, (l / 16).max(1))
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Anisotropic Gaussian bumps: (center x, center y, std x, std y, rotation,
/// amplitude) in unit coordinates.
const BLOB_TABLE: [(f64, f64, f64, f64, f64, f64); 5] = [
    (0.32, 0.28, 0.18, 0.10, 0.6, 1.00),
    (0.70, 0.35, 0.10, 0.16, -0.4, 0.85),
    (0.45, 0.70, 0.22, 0.12, 0.2, 0.90),
    (0.75, 0.75, 0.09, 0.09, 0.0, 0.70),
    (0.22, 0.62, 0.08, 0.13, 1.1, 0.65),
];

fn blobs(l: usize) -> Array2<f64> {
    Array2::from_shape_fn((l, l), |(i, j)| {
        let v = (i as f64 + 0.5) / l as f64;
        let u = (j as f64 + 0.5) / l as f64;
        BLOB_TABLE
            .iter()
            .map(|&(cx, cy, sx, sy, theta, amp)| {
                let (dx, dy) = (u - cx, v - cy);
                let (sin, cos) = theta.sin_cos();
                let xr = cos * dx + sin * dy;
                let yr = -sin * dx + cos * dy;
                let q = (xr / sx).powi(2) + (yr / sy).powi(2);
                amp * (-0.5 * q).exp()
            })
            .sum()
    })
}

fn checker(l: usize) -> Array2<f64> {
    let cell = checker_cell(l);
    Array2::from_shape_fn((l, l), |(i, j)| ((i / cell + j / cell) % 2) as f64)
}

/// Overlapping ellipses: (center x, center y, semi-axis x, semi-axis y,
/// rotation, added intensity) in unit coordinates.
const ELLIPSE_TABLE: [(f64, f64, f64, f64, f64, f64); 6] = [
    (0.50, 0.50, 0.42, 0.36, 0.0, 1.00),
    (0.50, 0.50, 0.36, 0.30, 0.0, -0.60),
    (0.38, 0.44, 0.07, 0.14, 0.35, 0.45),
    (0.62, 0.44, 0.07, 0.14, -0.35, 0.45),
    (0.50, 0.64, 0.10, 0.06, 0.0, 0.50),
    (0.50, 0.34, 0.04, 0.04, 0.0, 0.55),
];

fn shepp_like(l: usize) -> Array2<f64> {
    Array2::from_shape_fn((l, l), |(i, j)| {
        let v = (i as f64 + 0.5) / l as f64;
        let u = (j as f64 + 0.5) / l as f64;
        ELLIPSE_TABLE
            .iter()
            .map(|&(cx, cy, a, b, theta, add)| {
                let (dx, dy) = (u - cx, v - cy);
                let (sin, cos) = theta.sin_cos();
                let xr = cos * dx + sin * dy;
                let yr = -sin * dx + cos * dy;
                if (xr / a).powi(2) + (yr / b).powi(2) <= 1.0 {
                    add
                } else {
                    0.0
                }
            })
            .sum()
    })
}

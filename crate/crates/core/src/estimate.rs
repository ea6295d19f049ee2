//! Solver output: the recovered parameters plus a per-iteration trace.

use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::model::ShiftDistribution;

/// One trace entry. Both solvers append a record per iteration and an extra
/// record for every denoiser application; fields that do not apply to the
/// producing solver stay `None` and are omitted from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Global iteration counter (quasi-Newton steps or EM iterations so far).
    pub iter: usize,
    /// Moment-matching objective value (method of moments).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub objective: Option<f64>,
    /// Observed-data log-likelihood (EM).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loglik: Option<f64>,
    /// Denoiser noise level; present exactly on denoiser-application records.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sigma_denoise: Option<f64>,
    /// Pixel clip range applied before the denoiser on this record.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clip: Option<(f64, f64)>,
    /// Shift-aligned relative error against ground truth, when supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<f64>,
    /// Pixels whose EM normal-equation diagonal was floored this iteration.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub floored_pixels: Option<usize>,
    /// Wall-clock seconds since the run started.
    pub seconds: f64,
}

impl TraceRecord {
    pub(crate) fn at(iter: usize, seconds: f64) -> Self {
        TraceRecord {
            iter,
            objective: None,
            loglik: None,
            sigma_denoise: None,
            clip: None,
            error: None,
            floored_pixels: None,
            seconds,
        }
    }
}

/// Result of a solver run.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub x_hat: Image,
    pub rho_hat: ShiftDistribution,
    pub trace: Vec<TraceRecord>,
    /// True when the run stopped on its tolerance rather than the iteration cap.
    pub converged: bool,
    /// Number of inner steps where the line search found no acceptable point
    /// (method of moments only; such steps leave the iterate unchanged).
    pub line_search_failures: usize,
}

//! Simulation and recovery toolkit for 2-D super-resolution multi-reference
//! alignment (SR-MRA).
//!
//! An unknown high-resolution image is observed many times through random
//! cyclic shifts, K-fold decimation, and additive Gaussian noise; neither the
//! shifts nor their distribution are known. The crate provides:
//!
//! * [`model`] — the observation model: shift/decimation operators, sampling,
//!   the sub-image decomposition, and explicit likelihood-equivalent
//!   parameter pairs (recovery is only possible up to that equivalence
//!   without extra prior knowledge).
//! * [`moments`] — empirical and analytic first/second moments of the
//!   observations and the least-squares moment-matching objective with its
//!   analytic gradient.
//! * [`mom_solver`] — limited-memory quasi-Newton moment matching with a
//!   denoiser applied every few steps ("projected method of moments").
//! * [`em_solver`] — FFT-accelerated expectation–maximization with the same
//!   periodic denoiser projection ("projected EM").
//! * [`denoise`] — the denoiser abstraction: built-ins (identity, Gaussian
//!   blur, sliding-DCT hard thresholding) plus a subprocess bridge for
//!   external denoisers, and the geometric noise-level schedule shared by
//!   both solvers.
//! * [`metrics`] — shift-aligned relative error and SNR.
//! * [`io`] — exact binary image format, PGM export, and on-disk layouts for
//!   observation sets, moments, and estimates.
//! * [`phantom`] — deterministic built-in test images.

pub mod denoise;
pub mod em_solver;
pub mod error;
pub mod estimate;
pub mod fft2;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod mom_solver;
pub mod moments;
pub mod phantom;
pub mod rng;

pub use error::{SrError, SrResult};
pub use image::{clip, normalize_unit_range, Image, NormalizeOutcome};
pub use model::{ModelParams, ObservationSet, ShiftDistribution};

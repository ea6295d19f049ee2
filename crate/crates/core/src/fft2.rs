//! 2-D FFT engine and the two cyclic identities the toolkit runs on.
//!
//! Everything in the observation model lives on the torus Z_L × Z_L, so the
//! heavy maps all reduce to cyclic convolutions or cross-correlations:
//!
//! * convolution   `conv(a, b)[t] = Σ_q a[q] · b[(t − q) mod L]`
//! * correlation   `corr(a, b)[t] = Σ_q a[q] · b[(q + t) mod L]`
//!
//! with the usual spectral forms `DFT(conv) = A ⊙ B` and
//! `DFT(corr) = conj(A) ⊙ B`. [`Fft2d`] caches the forward/inverse plans for
//! one side length; hot loops (the EM passes) reuse one engine and fuse their
//! own spectrum arithmetic via [`Fft2d::forward`] / [`Fft2d::inverse_real`].
//!
//! Row-column decomposition: rustfft transforms every length-L row of a
//! contiguous buffer in one call; columns are handled by transposing, running
//! the row pass, and transposing back. Transforms are deterministic, so any
//! result built from them is bit-stable across runs and thread counts.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft2d {
    side: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2d").field("side", &self.side).finish()
    }
}

impl Fft2d {
    pub fn new(side: usize) -> Self {
        assert!(side > 0, "FFT side must be positive");
        let mut planner = FftPlanner::new();
        Fft2d {
            side,
            fwd: planner.plan_fft_forward(side),
            inv: planner.plan_fft_inverse(side),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    fn pass_both_axes(&self, data: &mut Array2<Complex64>, fft: &Arc<dyn Fft<f64>>) {
        let n = self.side;
        let mut scratch = vec![Complex64::ZERO; fft.get_inplace_scratch_len()];
        if data.as_slice_mut().is_none() {
            // Defensive: callers normally hand over standard-layout arrays.
            *data = Array2::from_shape_vec((n, n), data.iter().cloned().collect())
                .expect("shape preserved");
        }
        fft.process_with_scratch(data.as_slice_mut().expect("standard layout"), &mut scratch);
        // Column pass: transpose into a fresh standard-layout buffer, run the
        // row pass there, and copy back (written this way because to_owned()
        // on a transposed view keeps the reversed strides).
        let mut t = Array2::zeros((n, n));
        t.assign(&data.t());
        fft.process_with_scratch(t.as_slice_mut().expect("fresh buffer"), &mut scratch);
        data.assign(&t.t());
    }

    /// Unnormalized 2-D DFT of a real matrix.
    pub fn forward(&self, real: ArrayView2<'_, f64>) -> Array2<Complex64> {
        debug_assert_eq!(real.dim(), (self.side, self.side));
        let mut buf = real.mapv(|v| Complex64::new(v, 0.0));
        self.pass_both_axes(&mut buf, &self.fwd);
        buf
    }

    /// Normalized inverse DFT, returning the real part.
    ///
    /// Inputs built from real-signal spectra have vanishing imaginary part;
    /// it is dropped rather than checked so callers stay branch-free.
    pub fn inverse_real(&self, mut spec: Array2<Complex64>) -> Array2<f64> {
        debug_assert_eq!(spec.dim(), (self.side, self.side));
        self.pass_both_axes(&mut spec, &self.inv);
        let scale = 1.0 / (self.side * self.side) as f64;
        spec.mapv(|v| v.re * scale)
    }

    /// Cyclic convolution `out[t] = Σ_q a[q] · b[(t − q) mod L]`.
    pub fn conv(&self, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
        let fa = self.forward(a);
        let fb = self.forward(b);
        self.inverse_real(fa * &fb)
    }

    /// Cyclic cross-correlation `out[t] = Σ_q a[q] · b[(q + t) mod L]`.
    pub fn corr(&self, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
        let fa = self.forward(a);
        let fb = self.forward(b);
        self.inverse_real(fa.mapv(|v| v.conj()) * &fb)
    }
}

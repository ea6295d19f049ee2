//! First- and second-order statistics of observation sets and the weighted
//! least-squares moment-matching objective.
//!
//! Three layers live here:
//!
//! 1. **Empirical moments** ([`empirical_moments`], [`MomentAccumulator`]):
//!    the sample mean and sample second moment of the flattened frames,
//!    computed in a single pass.
//! 2. **Analytic moments** ([`analytic_m1`], [`analytic_m2`]): the exact
//!    expectation of those statistics under a given image and shift
//!    distribution. The dense shift-matrix form is never materialized in
//!    these paths — the first moment goes through an FFT circular
//!    convolution, and the second moment accumulates weighted rank-1 terms
//!    over shifts with significant mass.
//! 3. **The objective** ([`ls_objective`], [`ls_gradient`]): squared
//!    Frobenius distance between analytic and target second moments plus a
//!    weighted squared distance between the first moments, with an analytic
//!    gradient in the image and in the two shift marginals.
//!
//! [`bccb_matrix`] builds the dense matrix whose columns are all cyclic
//! shifts of the image; it is a size-guarded test oracle, not a production
//! path.

use std::cmp::Ordering;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{invalid, SrError, SrResult};
use crate::fft2::Fft2d;
use crate::image::Image;
use crate::model::{upsample_matrix, ObservationSet, ShiftDistribution};

/// Largest low-resolution side accepted without an explicit override: the
/// second moment is a dense `l_low² × l_low²` matrix, which crosses ~0.7 GB
/// at side 96.
pub const LOW_RES_SIDE_GUARD: usize = 96;

/// Observations per reduction chunk in [`empirical_moments`]. Recorded next
/// to saved moments so results can be reproduced bit-for-bit.
pub const DEFAULT_OBSERVATION_CHUNK: usize = 512;

/// Shifts per reduction chunk in the analytic second-moment accumulation.
pub(crate) const SHIFT_CHUNK: usize = 128;

/// Chunk results are folded into the accumulator strictly in chunk-index
/// order; at most this many chunk partials are in flight at once, which
/// bounds transient memory without affecting the summation order.
const PARTIAL_BATCH: usize = 8;

/// Shifts whose cumulative absolute mass falls within this slack of the
/// total are dropped from the second-moment accumulation.
const TRUNCATION_SLACK: f64 = 1e-12;

/// Maximum tolerated asymmetry in a second moment.
const SYMMETRY_TOL: f64 = 1e-12;

// ─── moment pair ─────────────────────────────────────────────────────────────

/// First and second moments of flattened low-resolution frames.
///
/// `m1` has length `l_low²` (row-major pixel order) and `m2` is the matching
/// `l_low² × l_low²` symmetric matrix. `sigma_used` records the noise level
/// embedded in `m2`'s diagonal: analytic moments carry their σ² term here,
/// while raw empirical moments store 0 (no debiasing is applied — the noise
/// term is matched on the analytic side of the objective instead).
#[derive(Debug, Clone)]
pub struct MomentPair {
    pub m1: Array1<f64>,
    pub m2: Array2<f64>,
    pub sigma_used: f64,
}

impl MomentPair {
    /// Validates dimensions (square count of entries, matching matrix),
    /// finiteness, and symmetry of `m2` to 1e−12.
    pub fn new(m1: Array1<f64>, m2: Array2<f64>, sigma_used: f64) -> SrResult<Self> {
        let d = m1.len();
        if d == 0 {
            return Err(invalid("moments", "first moment is empty"));
        }
        let side = (d as f64).sqrt().round() as usize;
        if side * side != d {
            return Err(SrError::Shape {
                what: "moments",
                detail: format!("first moment length {d} is not a perfect square"),
            });
        }
        if m2.dim() != (d, d) {
            return Err(SrError::Shape {
                what: "moments",
                detail: format!(
                    "second moment is {:?}, expected ({d}, {d})",
                    m2.dim()
                ),
            });
        }
        if !(sigma_used.is_finite() && sigma_used >= 0.0) {
            return Err(invalid("sigma_used", "must be finite and nonnegative"));
        }
        if m1.iter().any(|v| !v.is_finite()) || m2.iter().any(|v| !v.is_finite()) {
            return Err(SrError::NonFinite { what: "moments" });
        }
        let mut asym = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                asym = asym.max((m2[[i, j]] - m2[[j, i]]).abs());
            }
        }
        if asym > SYMMETRY_TOL {
            return Err(invalid(
                "moments",
                &format!("second moment asymmetric by {asym:.3e} (limit {SYMMETRY_TOL:.0e})"),
            ));
        }
        Ok(Self { m1, m2, sigma_used })
    }

    /// Number of low-resolution pixels (length of `m1`).
    pub fn dim(&self) -> usize {
        self.m1.len()
    }

    /// Side length of the low-resolution grid.
    pub fn l_low(&self) -> usize {
        let d = self.m1.len();
        let side = (d as f64).sqrt().round() as usize;
        debug_assert_eq!(side * side, d);
        side
    }
}

// ─── objective weights ───────────────────────────────────────────────────────

/// Weight of the first-moment term in the least-squares objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveWeights {
    pub lambda: f64,
}

impl ObjectiveWeights {
    pub fn new(lambda: f64) -> SrResult<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(invalid("lambda", "must be finite and positive"));
        }
        Ok(Self { lambda })
    }

    /// Default weighting `λ = 1 / (l_high²·(1 + σ²))`, which balances the
    /// first-moment residual (l_low² entries) against the much larger
    /// second-moment residual while discounting the noisier regimes.
    pub fn default_for(l_high: usize, sigma: f64) -> SrResult<Self> {
        if l_high == 0 {
            return Err(invalid("l_high", "must be positive"));
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(invalid("sigma", "must be finite and nonnegative"));
        }
        Self::new(1.0 / ((l_high * l_high) as f64 * (1.0 + sigma * sigma)))
    }
}

fn guard_low_res(l_low: usize, allow_large: bool) -> SrResult<()> {
    if l_low > LOW_RES_SIDE_GUARD && !allow_large {
        return Err(SrError::SizeGuard {
            what: "low-resolution side for dense second moment",
            limit: LOW_RES_SIDE_GUARD,
            requested: l_low,
        });
    }
    Ok(())
}

fn flatten_row_major(v: ArrayView2<'_, f64>) -> Array1<f64> {
    Array1::from_iter(v.iter().copied())
}

// ─── empirical moments ───────────────────────────────────────────────────────

/// Streaming accumulator for empirical moments: one frame at a time, constant
/// memory beyond the two accumulators.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    side: usize,
    count: usize,
    m1_sum: Array1<f64>,
    m2_sum: Array2<f64>,
}

impl MomentAccumulator {
    pub fn new(side: usize, allow_large: bool) -> SrResult<Self> {
        if side == 0 {
            return Err(invalid("side", "must be positive"));
        }
        guard_low_res(side, allow_large)?;
        let d = side * side;
        Ok(Self {
            side,
            count: 0,
            m1_sum: Array1::zeros(d),
            m2_sum: Array2::zeros((d, d)),
        })
    }

    /// Folds one frame into the running sums. Only the upper triangle of the
    /// second-moment sum is maintained; [`MomentAccumulator::finish`] mirrors it.
    pub fn push_frame(&mut self, frame: ArrayView2<'_, f64>) -> SrResult<()> {
        if frame.dim() != (self.side, self.side) {
            return Err(SrError::Shape {
                what: "moment accumulator",
                detail: format!(
                    "frame is {:?}, expected ({}, {})",
                    frame.dim(),
                    self.side,
                    self.side
                ),
            });
        }
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(SrError::NonFinite { what: "observation frame" });
        }
        let y = flatten_row_major(frame);
        let d = y.len();
        for i in 0..d {
            self.m1_sum[i] += y[i];
            let yi = y[i];
            for j in i..d {
                self.m2_sum[[i, j]] += yi * y[j];
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Number of frames folded in so far.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Divides through by the frame count and returns the moment pair.
    pub fn finish(self) -> SrResult<MomentPair> {
        if self.count == 0 {
            return Err(invalid("moment accumulator", "no frames were provided"));
        }
        let n = self.count as f64;
        let d = self.m1_sum.len();
        let m1 = self.m1_sum / n;
        let mut m2 = self.m2_sum;
        for i in 0..d {
            for j in (i + 1)..d {
                let v = m2[[i, j]] / n;
                m2[[i, j]] = v;
                m2[[j, i]] = v;
            }
            m2[[i, i]] /= n;
        }
        MomentPair::new(m1, m2, 0.0)
    }
}

/// Sample mean and sample second moment of the flattened frames, with the
/// default reduction chunk size and the memory guard enforced.
///
/// The reduction is chunked: each chunk of [`DEFAULT_OBSERVATION_CHUNK`]
/// consecutive frames is reduced independently (possibly in parallel) and
/// the chunk results are folded in index order, so the output is identical
/// for any thread count. Results depend on the chunk size, which is why the
/// on-disk sidecar records it.
pub fn empirical_moments(obs: &ObservationSet) -> SrResult<MomentPair> {
    empirical_moments_with(obs, DEFAULT_OBSERVATION_CHUNK, false)
}

/// [`empirical_moments`] with explicit chunk size and guard override.
pub fn empirical_moments_with(
    obs: &ObservationSet,
    chunk_size: usize,
    allow_large: bool,
) -> SrResult<MomentPair> {
    if chunk_size == 0 {
        return Err(invalid("chunk_size", "must be positive"));
    }
    let frames = obs.frames();
    if frames.is_empty() {
        return Err(invalid("observations", "empty observation set"));
    }
    let side = obs.params().l_low();
    guard_low_res(side, allow_large)?;
    let d = side * side;
    let n = frames.len();

    let mut m1 = Array1::<f64>::zeros(d);
    let mut m2 = Array2::<f64>::zeros((d, d));
    let chunks: Vec<&[Array2<f64>]> = frames.chunks(chunk_size).collect();
    for batch in chunks.chunks(PARTIAL_BATCH) {
        let partials: Vec<(Array1<f64>, Array2<f64>)> = batch
            .par_iter()
            .map(|chunk| {
                let mut b = Array2::<f64>::zeros((chunk.len(), d));
                for (r, frame) in chunk.iter().enumerate() {
                    for (dst, src) in b.row_mut(r).iter_mut().zip(frame.iter()) {
                        *dst = *src;
                    }
                }
                (b.sum_axis(Axis(0)), b.t().dot(&b))
            })
            .collect();
        for (p1, p2) in partials {
            m1 += &p1;
            m2 += &p2;
        }
    }
    m1 /= n as f64;
    m2 /= n as f64;
    let m2 = symmetrize(m2);
    MomentPair::new(m1, m2, 0.0)
}

fn symmetrize(m: Array2<f64>) -> Array2<f64> {
    let mt = m.t();
    (&m + &mt) * 0.5
}

// ─── analytic moments ────────────────────────────────────────────────────────

/// Shared machinery for the analytic moment maps and the objective: FFT plan
/// and per-axis gather tables mapping (shift, low-res index) to the source
/// high-res index.
pub(crate) struct MomentContext {
    l_high: usize,
    k: usize,
    l_low: usize,
    d: usize,
    fft: Fft2d,
    /// `pos[s·l_low + n] = (n·k + l_high − s) mod l_high`: the high-res pixel
    /// that lands at low-res position `n` after shifting by `s` and decimating.
    pos: Vec<usize>,
}

impl MomentContext {
    #[cfg(test)]
    pub(crate) fn new(l_high: usize, k: usize) -> SrResult<Self> {
        Self::new_with(l_high, k, false)
    }

    pub(crate) fn new_with(l_high: usize, k: usize, allow_large: bool) -> SrResult<Self> {
        if l_high == 0 {
            return Err(invalid("l_high", "must be positive"));
        }
        if k == 0 {
            return Err(invalid("k", "must be positive"));
        }
        if l_high % k != 0 {
            return Err(SrError::Indivisible { l_high, k });
        }
        let l_low = l_high / k;
        guard_low_res(l_low, allow_large)?;
        let mut pos = vec![0usize; l_high * l_low];
        for s in 0..l_high {
            for n in 0..l_low {
                pos[s * l_low + n] = (n * k + l_high - s) % l_high;
            }
        }
        Ok(Self {
            l_high,
            k,
            l_low,
            d: l_low * l_low,
            fft: Fft2d::new(l_high),
            pos,
        })
    }

    fn check_image(&self, x: ArrayView2<'_, f64>) -> SrResult<()> {
        if x.dim() != (self.l_high, self.l_high) {
            return Err(SrError::Shape {
                what: "moment image",
                detail: format!(
                    "image is {:?}, expected ({}, {})",
                    x.dim(),
                    self.l_high,
                    self.l_high
                ),
            });
        }
        Ok(())
    }

    /// Row `out` gets the flattened decimated cyclic shift of `x` by `(s1, s2)`.
    fn gather_row(&self, x: &[f64], s1: usize, s2: usize, out: &mut [f64]) {
        let l = self.l_low;
        let p1 = &self.pos[s1 * l..(s1 + 1) * l];
        let p2 = &self.pos[s2 * l..(s2 + 1) * l];
        for n1 in 0..l {
            let src = p1[n1] * self.l_high;
            let dst = n1 * l;
            for n2 in 0..l {
                out[dst + n2] = x[src + p2[n2]];
            }
        }
    }

    /// Scatter-add `w · u` through the same index maps [`gather_row`] reads by.
    fn scatter_row(&self, grad: &mut [f64], s1: usize, s2: usize, w: f64, u: &[f64]) {
        let l = self.l_low;
        let p1 = &self.pos[s1 * l..(s1 + 1) * l];
        let p2 = &self.pos[s2 * l..(s2 + 1) * l];
        for n1 in 0..l {
            let dst = p1[n1] * self.l_high;
            let src = n1 * l;
            for n2 in 0..l {
                grad[dst + p2[n2]] += w * u[src + n2];
            }
        }
    }

    /// First analytic moment: decimated circular convolution of the joint
    /// shift weights with the image, flattened row-major.
    fn build_m1(&self, x: ArrayView2<'_, f64>, joint: ArrayView2<'_, f64>) -> Array1<f64> {
        let blended = self.fft.conv(joint, x);
        flatten_row_major(blended.slice(s![..;self.k, ..;self.k]))
    }

    /// Shift weights sorted by decreasing absolute mass (ties broken by flat
    /// index), truncated once the cumulative absolute mass is within
    /// [`TRUNCATION_SLACK`] of the total. Exact for sparse weights; for dense
    /// weights nothing above round-off is dropped.
    fn sorted_active(&self, joint: ArrayView2<'_, f64>) -> Vec<(usize, f64)> {
        let mut entries: Vec<(usize, f64)> = joint
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, w)| *w != 0.0)
            .collect();
        entries.sort_by(|a, b| {
            b.1.abs()
                .partial_cmp(&a.1.abs())
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let total: f64 = entries.iter().map(|(_, w)| w.abs()).sum();
        let mut cum = 0.0;
        let mut keep = entries.len();
        for (i, (_, w)) in entries.iter().enumerate() {
            cum += w.abs();
            if cum >= total - TRUNCATION_SLACK {
                keep = i + 1;
                break;
            }
        }
        entries.truncate(keep);
        entries
    }

    /// Second analytic moment: `Σ_s w[s]·v_s·v_sᵀ + σ²·I` over the active
    /// shifts, where `v_s` is the flattened decimated shift of `x`. Chunks of
    /// [`SHIFT_CHUNK`] shifts are reduced independently and folded in chunk
    /// order, so the result is identical for any thread count.
    fn build_m2(&self, x: &[f64], active: &[(usize, f64)], sigma: f64) -> Array2<f64> {
        let d = self.d;
        let mut m2 = Array2::<f64>::zeros((d, d));
        let chunks: Vec<&[(usize, f64)]> = active.chunks(SHIFT_CHUNK).collect();
        for batch in chunks.chunks(PARTIAL_BATCH) {
            let partials: Vec<Array2<f64>> = batch
                .par_iter()
                .map(|chunk| {
                    let rows = chunk.len();
                    let mut v = Array2::<f64>::zeros((rows, d));
                    let mut wv = Array2::<f64>::zeros((rows, d));
                    for (j, (flat, w)) in chunk.iter().enumerate() {
                        let (s1, s2) = (flat / self.l_high, flat % self.l_high);
                        let row = v.row_mut(j).into_slice().expect("row is contiguous");
                        self.gather_row(x, s1, s2, row);
                        let scaled = wv.row_mut(j).into_slice().expect("row is contiguous");
                        for (dst, src) in scaled.iter_mut().zip(row.iter()) {
                            *dst = w * *src;
                        }
                    }
                    wv.t().dot(&v)
                })
                .collect();
            for p in partials {
                m2 += &p;
            }
        }
        let mut m2 = symmetrize(m2);
        let s2 = sigma * sigma;
        for i in 0..d {
            m2[[i, i]] += s2;
        }
        m2
    }

    fn check_target(&self, target: &MomentPair) -> SrResult<()> {
        if target.dim() != self.d {
            return Err(SrError::Shape {
                what: "moment target",
                detail: format!(
                    "target has {} entries, expected {} for low-res side {}",
                    target.dim(),
                    self.d,
                    self.l_low
                ),
            });
        }
        Ok(())
    }

    /// Objective value for an explicit joint weight matrix (any finite
    /// weights; solver line searches pass points off the probability simplex).
    pub(crate) fn objective_joint(
        &self,
        x: ArrayView2<'_, f64>,
        joint: ArrayView2<'_, f64>,
        sigma: f64,
        target: &MomentPair,
        lambda: f64,
    ) -> SrResult<f64> {
        self.check_image(x)?;
        self.check_target(target)?;
        check_sigma(sigma)?;
        if joint.dim() != (self.l_high, self.l_high) {
            return Err(SrError::Shape {
                what: "joint shift weights",
                detail: format!("got {:?}, expected square side {}", joint.dim(), self.l_high),
            });
        }
        if x.iter().any(|v| !v.is_finite()) || joint.iter().any(|v| !v.is_finite()) {
            return Err(SrError::NonFinite { what: "objective input" });
        }
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().expect("standard layout");
        let t1 = self.build_m1(x, joint);
        let active = self.sorted_active(joint);
        let t2 = self.build_m2(xs, &active, sigma);
        let e1 = &t1 - &target.m1;
        let e2 = &t2 - &target.m2;
        let f = e2.iter().map(|v| v * v).sum::<f64>() + lambda * e1.iter().map(|v| v * v).sum::<f64>();
        if !f.is_finite() {
            return Err(SrError::NonFinite { what: "objective value" });
        }
        Ok(f)
    }

    /// Objective value for product-form marginal weights (no simplex
    /// requirement; the weights may be any finite vector).
    #[cfg(test)]
    pub(crate) fn value(
        &self,
        x: ArrayView2<'_, f64>,
        rho1: ArrayView1<'_, f64>,
        rho2: ArrayView1<'_, f64>,
        sigma: f64,
        target: &MomentPair,
        lambda: f64,
    ) -> SrResult<f64> {
        let joint = product_joint(rho1, rho2, self.l_high)?;
        self.objective_joint(x, joint.view(), sigma, target, lambda)
    }

    /// Objective value and its gradient in the image and both marginals.
    ///
    /// With `E2 = T2 − target.m2` and `E1 = T1 − target.m1`:
    /// the image gradient is `4·Σ_s w[s]·S_sᵀ(E2 v_s) + 2λ·corr(w, up(E1))`
    /// (`S_s` = decimated shift, `up` = zero-insertion upsampling), the joint
    /// gradient entry is `2·v_sᵀE2 v_s + 2λ·⟨v_s, E1⟩`, and the marginal
    /// gradients follow from the product form by the chain rule:
    /// `∂f/∂ρ1 = G·ρ2`, `∂f/∂ρ2 = Gᵀ·ρ1` with `G` the joint gradient matrix.
    pub(crate) fn value_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        rho1: ArrayView1<'_, f64>,
        rho2: ArrayView1<'_, f64>,
        sigma: f64,
        target: &MomentPair,
        lambda: f64,
    ) -> SrResult<(f64, LsGradient)> {
        self.check_image(x)?;
        self.check_target(target)?;
        check_sigma(sigma)?;
        let joint = product_joint(rho1, rho2, self.l_high)?;
        if x.iter().any(|v| !v.is_finite()) || joint.iter().any(|v| !v.is_finite()) {
            return Err(SrError::NonFinite { what: "objective input" });
        }
        let l = self.l_high;
        let d = self.d;
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().expect("standard layout");

        let t1 = self.build_m1(x, joint.view());
        let active = self.sorted_active(joint.view());
        let t2 = self.build_m2(xs, &active, sigma);
        let e1 = &t1 - &target.m1;
        let e2 = &t2 - &target.m2;
        let f = e2.iter().map(|v| v * v).sum::<f64>()
            + lambda * e1.iter().map(|v| v * v).sum::<f64>();
        if !f.is_finite() {
            return Err(SrError::NonFinite { what: "objective value" });
        }

        // Gradient pass: every shift contributes a joint-gradient entry, and
        // shifts with nonzero weight contribute to the image gradient.
        let joint_std = joint.as_slice().expect("owned row-major");
        let n_shifts = l * l;
        let starts: Vec<usize> = (0..n_shifts).step_by(SHIFT_CHUNK).collect();
        let per_chunk: Vec<(Vec<f64>, Array2<f64>)> = starts
            .par_iter()
            .map(|&start| {
                let stop = (start + SHIFT_CHUNK).min(n_shifts);
                let rows = stop - start;
                let mut v = Array2::<f64>::zeros((rows, d));
                for (j, flat) in (start..stop).enumerate() {
                    let row = v.row_mut(j).into_slice().expect("row is contiguous");
                    self.gather_row(xs, flat / l, flat % l, row);
                }
                let u = v.dot(&e2);
                let mut g_joint = vec![0.0f64; rows];
                let mut grad_x_part = Array2::<f64>::zeros((l, l));
                let gx = grad_x_part.as_slice_mut().expect("standard layout");
                for (j, flat) in (start..stop).enumerate() {
                    let vj = v.row(j);
                    let uj = u.row(j);
                    g_joint[j] = 2.0 * uj.dot(&vj) + 2.0 * lambda * vj.dot(&e1);
                    let w = joint_std[flat];
                    if w != 0.0 {
                        self.scatter_row(
                            gx,
                            flat / l,
                            flat % l,
                            4.0 * w,
                            uj.as_slice().expect("row is contiguous"),
                        );
                    }
                }
                (g_joint, grad_x_part)
            })
            .collect();

        let mut grad_x = Array2::<f64>::zeros((l, l));
        let mut g_joint = Array2::<f64>::zeros((l, l));
        {
            let gj = g_joint.as_slice_mut().expect("standard layout");
            for (chunk_idx, (g_part, gx_part)) in per_chunk.iter().enumerate() {
                let start = starts[chunk_idx];
                gj[start..start + g_part.len()].copy_from_slice(g_part);
                grad_x += gx_part;
            }
        }

        // First-moment term of the image gradient, via one circular
        // correlation with the upsampled residual.
        let e1_grid = e1
            .to_shape((self.l_low, self.l_low))
            .expect("d = l_low^2")
            .to_owned();
        let up = upsample_matrix(e1_grid.view(), self.k);
        let m1_term = self.fft.corr(joint.view(), up.view());
        grad_x.scaled_add(2.0 * lambda, &m1_term);

        let grad_rho1 = g_joint.dot(&rho2);
        let grad_rho2 = g_joint.t().dot(&rho1);
        Ok((
            f,
            LsGradient {
                grad_x,
                grad_rho1,
                grad_rho2,
            },
        ))
    }
}

fn check_sigma(sigma: f64) -> SrResult<()> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(invalid("sigma", "must be finite and nonnegative"));
    }
    Ok(())
}

/// Outer product of the two marginal weight vectors, row-major.
fn product_joint(
    rho1: ArrayView1<'_, f64>,
    rho2: ArrayView1<'_, f64>,
    l: usize,
) -> SrResult<Array2<f64>> {
    if rho1.len() != l || rho2.len() != l {
        return Err(SrError::Shape {
            what: "shift marginals",
            detail: format!(
                "marginals have lengths {} and {}, expected {l}",
                rho1.len(),
                rho2.len()
            ),
        });
    }
    let mut joint = Array2::<f64>::zeros((l, l));
    for i in 0..l {
        let a = rho1[i];
        for j in 0..l {
            joint[[i, j]] = a * rho2[j];
        }
    }
    Ok(joint)
}

/// Expected first moment of an observation: the decimated circular
/// convolution of the joint shift distribution with the image, flattened
/// row-major. Computed entirely through the FFT; the dense shift matrix is
/// never formed.
pub fn analytic_m1(x: &Image, rho: &ShiftDistribution, k: usize) -> SrResult<Array1<f64>> {
    let ctx = MomentContext::new_with(x.side(), k, true)?;
    if rho.len() != x.side() {
        return Err(SrError::Shape {
            what: "shift distribution",
            detail: format!("side {} does not match image side {}", rho.len(), x.side()),
        });
    }
    let joint = rho.joint_matrix();
    Ok(ctx.build_m1(x.pixels().view(), joint.view()))
}

/// Expected second moment: `Σ_s ρ[s]·v_s·v_sᵀ + σ²·I` with `v_s` the
/// flattened decimated shift of the image by `s`. Shifts are accumulated in
/// decreasing-mass order with negligible-mass truncation (see module docs).
pub fn analytic_m2(x: &Image, rho: &ShiftDistribution, k: usize, sigma: f64) -> SrResult<Array2<f64>> {
    analytic_m2_with(x, rho, k, sigma, false)
}

/// [`analytic_m2`] with the dense-size memory guard overridable.
pub fn analytic_m2_with(
    x: &Image,
    rho: &ShiftDistribution,
    k: usize,
    sigma: f64,
    allow_large: bool,
) -> SrResult<Array2<f64>> {
    let ctx = MomentContext::new_with(x.side(), k, allow_large)?;
    if rho.len() != x.side() {
        return Err(SrError::Shape {
            what: "shift distribution",
            detail: format!("side {} does not match image side {}", rho.len(), x.side()),
        });
    }
    check_sigma(sigma)?;
    let joint = rho.joint_matrix();
    let active = ctx.sorted_active(joint.view());
    Ok(ctx.build_m2(x.as_slice(), &active, sigma))
}

/// Both analytic moments as a [`MomentPair`] with `sigma_used = sigma`.
pub fn analytic_moments(
    x: &Image,
    rho: &ShiftDistribution,
    k: usize,
    sigma: f64,
) -> SrResult<MomentPair> {
    let m1 = analytic_m1(x, rho, k)?;
    let m2 = analytic_m2(x, rho, k, sigma)?;
    MomentPair::new(m1, m2, sigma)
}

/// Dense matrix whose column for flat shift `s = s1·L + s2` is the flattened
/// cyclic shift of `x` by `(s1, s2)`. Test oracle only — guarded to side ≤ 16
/// because the output has `L⁴` entries.
pub fn bccb_matrix(x: &Image) -> SrResult<Array2<f64>> {
    let l = x.side();
    if l > 16 {
        return Err(SrError::SizeGuard {
            what: "dense shift-matrix side",
            limit: 16,
            requested: l,
        });
    }
    let n = l * l;
    let mut out = Array2::<f64>::zeros((n, n));
    for s1 in 0..l {
        for s2 in 0..l {
            let col = s1 * l + s2;
            let shifted = crate::model::circular_shift(x, (s1, s2));
            for (row, v) in shifted.as_slice().iter().enumerate() {
                out[[row, col]] = *v;
            }
        }
    }
    Ok(out)
}

// ─── objective and gradient ──────────────────────────────────────────────────

/// Gradient of [`ls_objective`] in the image pixels and in the two shift
/// marginals.
#[derive(Debug, Clone)]
pub struct LsGradient {
    /// ∂f/∂x, same shape as the image.
    pub grad_x: Array2<f64>,
    /// ∂f/∂ρ1, length `l_high`.
    pub grad_rho1: Array1<f64>,
    /// ∂f/∂ρ2, length `l_high`.
    pub grad_rho2: Array1<f64>,
}

/// Weighted least-squares moment-matching objective:
/// `‖analytic_m2(x,ρ,σ) − target.m2‖_F² + λ·‖analytic_m1(x,ρ) − target.m1‖²`.
///
/// Nonnegative, and zero exactly when both moment residuals vanish. The
/// decimation factor is inferred from the target's low-resolution side.
pub fn ls_objective(
    x: &Image,
    rho: &ShiftDistribution,
    sigma: f64,
    target: &MomentPair,
    w: &ObjectiveWeights,
) -> SrResult<f64> {
    let ctx = context_for(x, rho, target)?;
    let joint = rho.joint_matrix();
    ctx.objective_joint(x.pixels().view(), joint.view(), sigma, target, w.lambda)
}

/// Analytic gradient of [`ls_objective`] for product-form distributions.
///
/// Explicit-joint distributions are rejected: the objective is then not a
/// function of marginals, so marginal gradients would be ill-defined.
pub fn ls_gradient(
    x: &Image,
    rho: &ShiftDistribution,
    sigma: f64,
    target: &MomentPair,
    w: &ObjectiveWeights,
) -> SrResult<LsGradient> {
    if rho.has_joint() {
        return Err(invalid(
            "shift distribution",
            "marginal gradients require a product-form distribution",
        ));
    }
    let ctx = context_for(x, rho, target)?;
    let (_, grad) = ctx.value_and_grad(
        x.pixels().view(),
        rho.rho1().view(),
        rho.rho2().view(),
        sigma,
        target,
        w.lambda,
    )?;
    Ok(grad)
}

fn context_for(x: &Image, rho: &ShiftDistribution, target: &MomentPair) -> SrResult<MomentContext> {
    if rho.len() != x.side() {
        return Err(SrError::Shape {
            what: "shift distribution",
            detail: format!("side {} does not match image side {}", rho.len(), x.side()),
        });
    }
    let l_low = target.l_low();
    if l_low == 0 || x.side() % l_low != 0 {
        return Err(SrError::Shape {
            what: "moment target",
            detail: format!(
                "low-res side {} does not divide image side {}",
                l_low,
                x.side()
            ),
        });
    }
    MomentContext::new_with(x.side(), x.side() / l_low, true)
}

// ─── tests ───────────────────────────────────────────────────────────────────

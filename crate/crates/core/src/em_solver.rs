//! Projected expectation–maximization for the observation model.
//!
//! The E-step computes, for every observation, a posterior weight over all
//! `L²` cyclic shifts. The per-shift residuals `‖y_i − P R_s x‖²` for one
//! observation are produced together from two cyclic cross-correlations
//! (image against the zero-upsampled frame, squared image against the
//! zero-upsampled grid mask), so an E-step costs one FFT pair per observation
//! instead of `L²` shifted copies. The M-step is closed-form: the
//! normal-equation matrix for the image is diagonal (one correlation of the
//! total weight map with the grid mask), the right-hand side is one
//! accumulated correlation of weight maps with upsampled frames, and the
//! shift distribution update is the average weight map. Every
//! [`EmSolverConfig::f`] EM iterations the image is passed through a
//! denoiser at the current schedule noise level.
//!
//! EM estimates the *joint* shift distribution; nothing restricts it to a
//! product of marginals.
//!
//! All cross-observation reductions are chunked and folded in a fixed chunk
//! order, so results are bit-stable across thread counts.

use std::time::Instant;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::denoise::{denoise, DenoiseSchedule, DenoiserHandle};
use crate::error::{invalid, SrError, SrResult};
use crate::estimate::{Estimate, TraceRecord};
use crate::fft2::Fft2d;
use crate::image::Image;
use crate::metrics::shift_aligned_error;
use crate::model::{upsample_adjoint, ObservationSet, ShiftDistribution};
use crate::mom_solver::random_init;

/// Observations processed per parallel work item in cross-observation passes.
const OBSERVATION_CHUNK: usize = 512;

// ─── configuration ───────────────────────────────────────────────────────────

/// Tuning knobs for [`projected_em`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmSolverConfig {
    /// EM iterations between consecutive denoiser applications.
    pub f: usize,
    /// Total EM iterations (grouped `f` per denoiser application).
    pub max_outer: usize,
    /// Floor for the diagonal normal-equation entries in the image update.
    pub diag_floor: f64,
    /// Stop when the relative log-likelihood change over one denoise block
    /// falls below this.
    pub stop_tol: f64,
    /// Seed for the random initialization streams.
    pub seed: u64,
    /// Initial position on the denoiser noise schedule.
    pub schedule_offset: u32,
}

impl Default for EmSolverConfig {
    fn default() -> Self {
        EmSolverConfig {
            f: 5,
            max_outer: 100,
            diag_floor: 1e-10,
            stop_tol: 1e-9,
            seed: 0,
            schedule_offset: 0,
        }
    }
}

impl EmSolverConfig {
    pub fn validate(&self) -> SrResult<()> {
        if self.f == 0 {
            return Err(invalid("EM steps per projection", "must be at least 1"));
        }
        if self.max_outer == 0 {
            return Err(invalid("EM iteration budget", "must be at least 1"));
        }
        if !(self.diag_floor.is_finite() && self.diag_floor > 0.0) {
            return Err(invalid("diagonal floor", "must be finite and positive"));
        }
        if !(self.stop_tol.is_finite() && self.stop_tol > 0.0) {
            return Err(invalid("stopping tolerance", "must be finite and positive"));
        }
        Ok(())
    }
}

// ─── responsibilities ────────────────────────────────────────────────────────

/// Posterior shift weights from one E-step, in the log domain: for each
/// observation `i`, `log_w[i, s1, s2]` is the log-probability that
/// observation `i` was produced by shift `(s1, s2)`, normalized so the
/// weights of one observation sum to one. `log_z[i]` is the per-observation
/// log-normalizer; summed over observations it is the observed-data
/// log-likelihood of the parameters the E-step consumed.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    log_w: Array3<f64>,
    log_z: Array1<f64>,
}

impl Responsibilities {
    /// Number of observations.
    pub fn n(&self) -> usize {
        self.log_w.len_of(Axis(0))
    }

    /// High-resolution side (the weight maps are side × side).
    pub fn side(&self) -> usize {
        self.log_w.len_of(Axis(1))
    }

    /// Log-weight map of one observation.
    pub fn log_weights(&self, i: usize) -> ArrayView2<'_, f64> {
        self.log_w.index_axis(Axis(0), i)
    }

    /// Linear-domain weight map of one observation (sums to 1 within 1e−10).
    pub fn weights(&self, i: usize) -> Array2<f64> {
        self.log_weights(i).mapv(f64::exp)
    }

    /// Per-observation log-normalizers; their sum is the observed-data
    /// log-likelihood at the E-step's input parameters.
    pub fn log_normalizers(&self) -> &Array1<f64> {
        &self.log_z
    }
}

// ─── shared per-iteration machinery ──────────────────────────────────────────

/// Geometry plus the per-image spectra every E/M pass needs.
struct EmContext {
    l: usize,
    k: usize,
    fft: Fft2d,
    /// Indicator of the decimation grid on the high-res torus.
    grid_mask: Array2<f64>,
}

impl EmContext {
    fn new(l: usize, k: usize) -> SrResult<Self> {
        if k == 0 || l == 0 {
            return Err(invalid("model dimensions", "sides must be positive"));
        }
        if l % k != 0 {
            return Err(SrError::Indivisible { l_high: l, k });
        }
        let mut grid_mask = Array2::<f64>::zeros((l, l));
        for i in (0..l).step_by(k) {
            for j in (0..l).step_by(k) {
                grid_mask[[i, j]] = 1.0;
            }
        }
        Ok(EmContext {
            l,
            k,
            fft: Fft2d::new(l),
            grid_mask,
        })
    }

    /// Spectra of the current image reused across one iteration's
    /// observations: `conj(DFT(x))` and the shift-indexed map
    /// `‖P R_s x‖² = corr(x², grid_mask)[s]`.
    fn image_maps(&self, x: &Image) -> (Array2<Complex64>, Array2<f64>) {
        let conj_x = self
            .fft
            .forward(x.pixels().view())
            .mapv(|v| v.conj());
        let x_sq = x.pixels().mapv(|v| v * v);
        let self_corr = self.fft.corr(x_sq.view(), self.grid_mask.view());
        (conj_x, self_corr)
    }

    /// Residual map of one observation: `r[s] = ‖y − P R_s x‖²` for all
    /// shifts, via `‖y‖² − 2·corr(x, up(y))[s] + corr(x², mask)[s]`.
    fn residual_map(
        &self,
        frame: ArrayView2<'_, f64>,
        conj_x: &Array2<Complex64>,
        self_corr: &Array2<f64>,
    ) -> SrResult<Array2<f64>> {
        let up = upsample_adjoint(frame, self.k)?;
        let spec = self.fft.forward(up.pixels().view());
        let cross = self.fft.inverse_real(conj_x * &spec);
        let y_sq: f64 = frame.iter().map(|v| v * v).sum();
        Ok(Array2::from_shape_fn((self.l, self.l), |(a, b)| {
            y_sq - 2.0 * cross[[a, b]] + self_corr[[a, b]]
        }))
    }
}

fn check_sigma_positive(sigma: f64) -> SrResult<()> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(invalid(
            "sigma",
            "EM needs a strictly positive noise level (the posterior over shifts degenerates at zero)",
        ));
    }
    Ok(())
}

fn check_geometry(obs: &ObservationSet, x: &Image, rho: &ShiftDistribution) -> SrResult<()> {
    let p = obs.params();
    if x.side() != p.l_high {
        return Err(SrError::Shape {
            what: "EM image",
            detail: format!("side {} does not match observations ({})", x.side(), p.l_high),
        });
    }
    if rho.len() != p.l_high {
        return Err(SrError::Shape {
            what: "EM shift distribution",
            detail: format!("side {} does not match observations ({})", rho.len(), p.l_high),
        });
    }
    if obs.n() == 0 {
        return Err(invalid("observation set", "must be nonempty"));
    }
    Ok(())
}

/// Elementwise logarithm of the joint shift distribution; zero mass maps to
/// `−∞` (and never to NaN downstream: every log-sum-exp in this module
/// subtracts a finite maximum first).
fn log_joint(rho: &ShiftDistribution) -> Array2<f64> {
    rho.joint_matrix().mapv(|p| p.ln())
}

/// Log-posterior map of one observation before normalization, its maximum,
/// and the log-normalizer.
fn posterior_terms(
    ctx: &EmContext,
    frame: ArrayView2<'_, f64>,
    conj_x: &Array2<Complex64>,
    self_corr: &Array2<f64>,
    log_rho: &Array2<f64>,
    inv_two_sigma_sq: f64,
) -> SrResult<(Array2<f64>, f64)> {
    let r = ctx.residual_map(frame, conj_x, self_corr)?;
    let mut t = log_rho.clone();
    ndarray::Zip::from(&mut t).and(&r).for_each(|t, &r| {
        *t -= r * inv_two_sigma_sq;
    });
    let m = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // All shifts carry zero prior mass — impossible for a distribution
        // that sums to one, so flag the data rather than emit NaN.
        return Err(SrError::NonFinite {
            what: "shift posterior (no shift has positive prior mass)",
        });
    }
    let z: f64 = t.iter().map(|&v| (v - m).exp()).sum();
    Ok((t, m + z.ln()))
}

// ─── public operations ───────────────────────────────────────────────────────

/// Observed-data log-likelihood `Σ_i log Σ_s ρ[s]·exp(−‖y_i − P R_s x‖² /
/// (2σ²))`, computed in the log domain with max subtraction. The additive
/// constant `−N·L_low²·log(2πσ²)/2` is omitted, so values are comparable
/// across iterations for fixed observations and σ.
pub fn log_likelihood(
    obs: &ObservationSet,
    x: &Image,
    rho: &ShiftDistribution,
    sigma: f64,
) -> SrResult<f64> {
    check_sigma_positive(sigma)?;
    check_geometry(obs, x, rho)?;
    let ctx = EmContext::new(obs.params().l_high, obs.params().k)?;
    let (conj_x, self_corr) = ctx.image_maps(x);
    let log_rho = log_joint(rho);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let frames = obs.frames();
    let partials: Vec<SrResult<f64>> = frames
        .par_chunks(OBSERVATION_CHUNK)
        .map(|chunk| {
            let mut acc = 0.0;
            for frame in chunk {
                let (_, log_z) =
                    posterior_terms(&ctx, frame.view(), &conj_x, &self_corr, &log_rho, inv)?;
                acc += log_z;
            }
            Ok(acc)
        })
        .collect();
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    if !total.is_finite() {
        return Err(SrError::NonFinite {
            what: "log-likelihood",
        });
    }
    Ok(total)
}

/// E-step: posterior shift weights for every observation,
/// `log_w[i, s] = log ρ[s] − ‖y_i − P R_s x‖²/(2σ²) − log Z_i`.
pub fn e_step(
    obs: &ObservationSet,
    x: &Image,
    rho: &ShiftDistribution,
    sigma: f64,
) -> SrResult<Responsibilities> {
    check_sigma_positive(sigma)?;
    check_geometry(obs, x, rho)?;
    let l = obs.params().l_high;
    let ctx = EmContext::new(l, obs.params().k)?;
    let (conj_x, self_corr) = ctx.image_maps(x);
    let log_rho = log_joint(rho);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let frames = obs.frames();
    let n = frames.len();

    let mut log_w = Array3::<f64>::zeros((n, l, l));
    let mut log_z = Array1::<f64>::zeros(n);
    // Every observation writes only its own row, so the parallel schedule
    // cannot affect the result.
    let l2 = l * l;
    let w_flat = log_w.as_slice_mut().expect("freshly allocated, standard layout");
    let z_flat = log_z.as_slice_mut().expect("freshly allocated, standard layout");
    w_flat
        .par_chunks_mut(OBSERVATION_CHUNK * l2)
        .zip(z_flat.par_chunks_mut(OBSERVATION_CHUNK))
        .zip(frames.par_chunks(OBSERVATION_CHUNK))
        .try_for_each(|((w_chunk, z_chunk), f_chunk)| -> SrResult<()> {
            for (j, frame) in f_chunk.iter().enumerate() {
                let (mut t, z) =
                    posterior_terms(&ctx, frame.view(), &conj_x, &self_corr, &log_rho, inv)?;
                t.mapv_inplace(|v| v - z);
                w_chunk[j * l2..(j + 1) * l2]
                    .copy_from_slice(t.as_slice().expect("standard layout"));
                z_chunk[j] = z;
            }
            Ok(())
        })?;
    Ok(Responsibilities { log_w, log_z })
}

/// M-step image update. The normal-equation matrix is diagonal:
/// `A[p] = Σ_{i,s} w[i,s]·𝟙{shift s puts pixel p on the sampling grid}`,
/// one correlation of the total weight map with the grid indicator; the
/// right-hand side is `b = Σ_{i,s} w[i,s]·R_{−s}Pᵀ y_i`, accumulated in the
/// frequency domain. Returns the image `x[p] = b[p]/max(A[p], diag_floor)`
/// and the number of floored pixels.
pub fn m_step_image(
    obs: &ObservationSet,
    resp: &Responsibilities,
    diag_floor: f64,
) -> SrResult<(Image, usize)> {
    if !(diag_floor.is_finite() && diag_floor > 0.0) {
        return Err(invalid("diagonal floor", "must be finite and positive"));
    }
    let p = obs.params();
    let l = p.l_high;
    check_resp_matches(obs, resp)?;
    let ctx = EmContext::new(l, p.k)?;
    let frames = obs.frames();

    // Per-chunk partials: the summed weight map and the frequency-domain
    // right-hand side; folded in chunk order.
    let partials: Vec<SrResult<(Array2<f64>, Array2<Complex64>)>> = (0..frames.len())
        .collect::<Vec<_>>()
        .par_chunks(OBSERVATION_CHUNK)
        .map(|chunk| {
            let mut w_sum = Array2::<f64>::zeros((l, l));
            let mut b_freq = Array2::<Complex64>::zeros((l, l));
            for &i in chunk {
                let w = resp.weights(i);
                w_sum += &w;
                let w_spec = ctx.fft.forward(w.view());
                let up = upsample_adjoint(frames[i].view(), ctx.k)?;
                let y_spec = ctx.fft.forward(up.pixels().view());
                ndarray::Zip::from(&mut b_freq)
                    .and(&w_spec)
                    .and(&y_spec)
                    .for_each(|b, &w, &y| *b += w.conj() * y);
            }
            Ok((w_sum, b_freq))
        })
        .collect();
    let mut w_total = Array2::<f64>::zeros((l, l));
    let mut b_freq = Array2::<Complex64>::zeros((l, l));
    for part in partials {
        let (w, b) = part?;
        w_total += &w;
        b_freq += &b;
    }

    let a = ctx.fft.corr(w_total.view(), ctx.grid_mask.view());
    let b = ctx.fft.inverse_real(b_freq);
    let mut floored = 0usize;
    let x = Array2::from_shape_fn((l, l), |idx| {
        let denom = if a[idx] < diag_floor {
            floored += 1;
            diag_floor
        } else {
            a[idx]
        };
        b[idx] / denom
    });
    Ok((Image::new(x)?, floored))
}

/// M-step shift-distribution update: the joint is the average posterior
/// weight map, `ρ[s] = Σ_i w[i,s] / Σ_{i,s} w[i,s]` (the denominator is the
/// actual accumulated mass — `N` up to the E-step's normalization tolerance —
/// so the result sums to one exactly enough for downstream validation).
pub fn m_step_rho(resp: &Responsibilities) -> SrResult<ShiftDistribution> {
    let n = resp.n();
    if n == 0 {
        return Err(invalid("responsibilities", "must cover at least one observation"));
    }
    let l = resp.side();
    let partials: Vec<Array2<f64>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(OBSERVATION_CHUNK)
        .map(|chunk| {
            let mut acc = Array2::<f64>::zeros((l, l));
            for &i in chunk {
                acc += &resp.weights(i);
            }
            acc
        })
        .collect();
    let mut total = Array2::<f64>::zeros((l, l));
    for p in partials {
        total += &p;
    }
    let mass: f64 = total.sum();
    if !(mass.is_finite() && mass > 0.0) {
        return Err(SrError::NonFinite {
            what: "responsibility mass",
        });
    }
    total.mapv_inplace(|v| v / mass);
    ShiftDistribution::from_joint(total)
}

/// The EM surrogate `Q(x, ρ) = Σ_i Σ_s w[i,s]·(log ρ[s] − ‖y_i − P R_s
/// x‖²/(2σ²))` under fixed responsibilities, with the convention
/// `0·(−∞) = 0` (zero-weight shifts contribute nothing even where ρ has no
/// mass). Diagnostic: the M-step maximizes this in `(x, ρ)`.
pub fn q_value(
    obs: &ObservationSet,
    resp: &Responsibilities,
    x: &Image,
    rho: &ShiftDistribution,
    sigma: f64,
) -> SrResult<f64> {
    check_sigma_positive(sigma)?;
    check_geometry(obs, x, rho)?;
    check_resp_matches(obs, resp)?;
    let ctx = EmContext::new(obs.params().l_high, obs.params().k)?;
    let (conj_x, self_corr) = ctx.image_maps(x);
    let log_rho = log_joint(rho);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let frames = obs.frames();
    let partials: Vec<SrResult<f64>> = (0..frames.len())
        .collect::<Vec<_>>()
        .par_chunks(OBSERVATION_CHUNK)
        .map(|chunk| {
            let mut acc = 0.0;
            for &i in chunk {
                let r = ctx.residual_map(frames[i].view(), &conj_x, &self_corr)?;
                let w = resp.weights(i);
                for ((idx, &wv), &rv) in w.indexed_iter().zip(r.iter()) {
                    if wv > 0.0 {
                        acc += wv * (log_rho[idx] - rv * inv);
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut q = 0.0;
    for p in partials {
        q += p?;
    }
    Ok(q)
}

fn check_resp_matches(obs: &ObservationSet, resp: &Responsibilities) -> SrResult<()> {
    if resp.n() != obs.n() || resp.side() != obs.params().l_high {
        return Err(SrError::Shape {
            what: "responsibilities",
            detail: format!(
                "{} maps of side {} for {} observations of side {}",
                resp.n(),
                resp.side(),
                obs.n(),
                obs.params().l_high
            ),
        });
    }
    Ok(())
}

// ─── projected EM ────────────────────────────────────────────────────────────

/// Projected EM from random initialization (identical in distribution to the
/// method-of-moments initializer): blocks of [`EmSolverConfig::f`] EM
/// iterations separated by denoiser applications on the running image, until
/// [`EmSolverConfig::max_outer`] total EM iterations are consumed or the
/// relative log-likelihood change over one block falls below
/// [`EmSolverConfig::stop_tol`].
///
/// Trace layout: one record per EM iteration carrying the log-likelihood of
/// the parameters that iteration's E-step consumed (one iteration behind the
/// image the record's `error` reflects) plus the floored-pixel count of its
/// image update; one record per denoiser application carrying
/// `sigma_denoise`; and a final record with the log-likelihood of the
/// returned parameters.
pub fn projected_em(
    obs: &ObservationSet,
    sigma: f64,
    denoiser: &DenoiserHandle,
    cfg: &EmSolverConfig,
    ground_truth: Option<&Image>,
) -> SrResult<Estimate> {
    cfg.validate()?;
    let l = obs.params().l_high;
    let (x0, r1, r2) = random_init(l, cfg.seed, 0);
    let rho0 = ShiftDistribution::from_marginals(r1, r2)?;
    projected_em_with_init(obs, sigma, denoiser, cfg, &x0, &rho0, ground_truth)
}

/// [`projected_em`] from an explicit starting point.
pub fn projected_em_with_init(
    obs: &ObservationSet,
    sigma: f64,
    denoiser: &DenoiserHandle,
    cfg: &EmSolverConfig,
    init_x: &Image,
    init_rho: &ShiftDistribution,
    ground_truth: Option<&Image>,
) -> SrResult<Estimate> {
    cfg.validate()?;
    check_sigma_positive(sigma)?;
    check_geometry(obs, init_x, init_rho)?;

    let started = Instant::now();
    let mut x = init_x.clone();
    let mut rho = init_rho.clone();
    let mut schedule = DenoiseSchedule::starting_at(cfg.schedule_offset);
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut converged = false;
    let mut ll_prev_block: Option<f64> = None;

    let error_of = |x: &Image| -> SrResult<Option<f64>> {
        match ground_truth {
            Some(truth) => Ok(Some(shift_aligned_error(x, truth)?.error)),
            None => Ok(None),
        }
    };

    let mut init_rec = TraceRecord::at(0, started.elapsed().as_secs_f64());
    init_rec.error = error_of(&x)?;
    trace.push(init_rec);

    let mut t = 0usize;
    while t < cfg.max_outer {
        let block_end = (t + cfg.f).min(cfg.max_outer);
        let mut ll_block: Option<f64> = None;
        while t < block_end {
            let resp = e_step(obs, &x, &rho, sigma)?;
            let ll = resp.log_normalizers().sum();
            if ll_block.is_none() {
                ll_block = Some(ll);
            }
            let (x_next, floored) = m_step_image(obs, &resp, cfg.diag_floor)?;
            rho = m_step_rho(&resp)?;
            x = x_next;
            t += 1;
            let mut rec = TraceRecord::at(t, started.elapsed().as_secs_f64());
            rec.loglik = Some(ll);
            rec.floored_pixels = Some(floored);
            rec.error = error_of(&x)?;
            trace.push(rec);
        }

        let sigma_t = schedule.sigma_current();
        let outer = (t - 1) / cfg.f;
        x = denoise(denoiser, &x, sigma_t).map_err(|e| match e {
            SrError::Denoiser { name, detail } => SrError::Denoiser {
                name,
                detail: format!("outer iteration {outer}: {detail}"),
            },
            other => other,
        })?;
        schedule = schedule.advanced();
        let mut rec = TraceRecord::at(t, started.elapsed().as_secs_f64());
        rec.sigma_denoise = Some(sigma_t);
        rec.error = error_of(&x)?;
        trace.push(rec);

        let ll_block = ll_block.expect("block ran at least one EM iteration");
        if let Some(prev) = ll_prev_block {
            if (ll_block - prev).abs() / prev.abs().max(f64::MIN_POSITIVE) < cfg.stop_tol {
                converged = true;
                break;
            }
        }
        ll_prev_block = Some(ll_block);
    }

    let mut final_rec = TraceRecord::at(t, started.elapsed().as_secs_f64());
    final_rec.loglik = Some(log_likelihood(obs, &x, &rho, sigma)?);
    final_rec.error = error_of(&x)?;
    trace.push(final_rec);

    Ok(Estimate {
        x_hat: x,
        rho_hat: rho,
        trace,
        converged,
        line_search_failures: 0,
    })
}

// ─── tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::normalize_unit_range;
    use crate::model::{
        circular_shift, decimated_shift, equivalent_params, sample_observations, ModelParams,
        ObservationSet,
    };
    use crate::phantom::{builtin_phantom, PhantomKind};
    use crate::rng::{stream, tags};
    use ndarray::Array2;
    use rand::Rng;

    fn random_image(l: usize, seed: u64) -> Image {
        let mut rng = stream(seed, tags::SOLVER_INIT, 910);
        let (img, _) = normalize_unit_range(
            &Image::new(Array2::from_shape_fn((l, l), |_| rng.random::<f64>())).unwrap(),
        );
        img
    }

    fn random_product(l: usize, seed: u64) -> ShiftDistribution {
        let mut rng = stream(seed, tags::SOLVER_INIT, 911);
        let mut draw = || {
            let mut v = Array1::from_shape_fn(l, |_| rng.random::<f64>());
            let total = v.sum();
            v.mapv_inplace(|a| a / total);
            v
        };
        ShiftDistribution::from_marginals(draw(), draw()).unwrap()
    }

    /// Point-mass responsibilities: every observation assigns all weight to
    /// its entry of `shifts`.
    fn point_mass_resp(l: usize, shifts: &[(usize, usize)]) -> Responsibilities {
        let n = shifts.len();
        let mut log_w = Array3::from_elem((n, l, l), f64::NEG_INFINITY);
        for (i, &(s1, s2)) in shifts.iter().enumerate() {
            log_w[[i, s1, s2]] = 0.0;
        }
        Responsibilities {
            log_w,
            log_z: Array1::zeros(n),
        }
    }

    /// Brute-force per-shift residuals `‖y − P R_s x‖²` by direct shifting.
    fn brute_residuals(y: &Array2<f64>, x: &Image, k: usize) -> Array2<f64> {
        let l = x.side();
        Array2::from_shape_fn((l, l), |(s1, s2)| {
            let model = decimated_shift(x, (s1, s2), k).unwrap();
            y.iter()
                .zip(model.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
    }

    fn brute_log_likelihood(
        obs: &ObservationSet,
        x: &Image,
        rho: &ShiftDistribution,
        sigma: f64,
    ) -> f64 {
        let joint = rho.joint_matrix();
        let inv = 1.0 / (2.0 * sigma * sigma);
        obs.frames()
            .iter()
            .map(|y| {
                let r = brute_residuals(y, x, obs.params().k);
                let t = Array2::from_shape_fn(r.dim(), |idx| joint[idx].ln() - r[idx] * inv);
                let m = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + t.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
            })
            .sum()
    }

    #[test]
    fn config_defaults_are_documented_values() {
        let cfg = EmSolverConfig::default();
        assert_eq!(cfg.f, 5);
        assert_eq!(cfg.max_outer, 100);
        assert_eq!(cfg.diag_floor, 1e-10);
        assert_eq!(cfg.stop_tol, 1e-9);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.schedule_offset, 0);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_rejects_zero_counts_and_bad_floors() {
        let mut cfg = EmSolverConfig::default();
        cfg.f = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = EmSolverConfig::default();
        cfg.max_outer = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = EmSolverConfig::default();
        cfg.diag_floor = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = EmSolverConfig::default();
        cfg.stop_tol = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn log_likelihood_is_zero_for_exact_fit_point_mass() {
        let x = random_image(8, 1);
        let rho = ShiftDistribution::delta(8, (3, 5));
        let params = ModelParams::new(8, 2, 0.0, 1).unwrap();
        let obs = sample_observations(&x, &rho, &params, 7).unwrap();
        let ll = log_likelihood(&obs, &x, &rho, 0.5).unwrap();
        assert!(ll.abs() < 1e-8, "exact fit should score 0, got {ll}");
    }

    #[test]
    fn log_likelihood_rejects_zero_sigma() {
        let x = random_image(8, 2);
        let rho = ShiftDistribution::uniform(8);
        let params = ModelParams::new(8, 2, 0.25, 3).unwrap();
        let obs = sample_observations(&x, &rho, &params, 8).unwrap();
        assert!(log_likelihood(&obs, &x, &rho, 0.0).is_err());
        assert!(e_step(&obs, &x, &rho, 0.0).is_err());
    }

    #[test]
    fn fft_log_likelihood_matches_brute_force() {
        let truth = random_image(8, 3);
        let rho_true = random_product(8, 3);
        let params = ModelParams::new(8, 2, 0.25, 6).unwrap();
        let obs = sample_observations(&truth, &rho_true, &params, 9).unwrap();
        // Evaluate at parameters other than the generating ones.
        let x = random_image(8, 4);
        let rho = random_product(8, 5);
        let fft = log_likelihood(&obs, &x, &rho, 0.25).unwrap();
        let brute = brute_log_likelihood(&obs, &x, &rho, 0.25);
        assert!(
            (fft - brute).abs() < 1e-9,
            "fft {fft} vs brute-force {brute}"
        );
    }

    #[test]
    fn log_likelihood_is_invariant_across_equivalent_parameters() {
        let truth = random_image(8, 6);
        let rho_true = random_product(8, 6);
        let params = ModelParams::new(8, 2, 0.25, 5).unwrap();
        let obs = sample_observations(&truth, &rho_true, &params, 10).unwrap();
        let x = random_image(8, 7);
        let rho = random_product(8, 8);
        let base = log_likelihood(&obs, &x, &rho, 0.25).unwrap();
        let witnesses = [
            (vec![2usize, 0, 3, 1], vec![(1usize, 2usize), (0, 3), (2, 2), (3, 0)]),
            (vec![1, 2, 3, 0], vec![(0, 0), (1, 1), (2, 3), (3, 2)]),
            (vec![0, 1, 2, 3], vec![(2, 1), (0, 0), (1, 3), (3, 3)]),
        ];
        for (perm, tile_shifts) in witnesses {
            let (x2, rho2) = equivalent_params(&x, &rho, 2, &perm, &tile_shifts).unwrap();
            let ll = log_likelihood(&obs, &x2, &rho2, 0.25).unwrap();
            assert!(
                (ll - base).abs() < 1e-9,
                "equivalent parameters moved the likelihood: {base} -> {ll}"
            );
        }
    }

    #[test]
    fn responsibilities_normalize_and_zero_mass_shifts_stay_log_infinite() {
        let x = random_image(8, 9);
        let params = ModelParams::new(8, 2, 0.25, 4).unwrap();
        let rho_gen = ShiftDistribution::uniform(8);
        let obs = sample_observations(&x, &rho_gen, &params, 11).unwrap();

        // Generic strictly positive prior: weights sum to one.
        let resp = e_step(&obs, &x, &random_product(8, 10), 0.25).unwrap();
        for i in 0..resp.n() {
            let total = resp.weights(i).sum();
            assert!((total - 1.0).abs() < 1e-10, "obs {i} sums to {total}");
        }

        // Point-mass prior: exactly one finite log-weight, never NaN.
        let delta = ShiftDistribution::delta(8, (2, 6));
        let resp = e_step(&obs, &x, &delta, 0.25).unwrap();
        for i in 0..resp.n() {
            let lw = resp.log_weights(i);
            assert!(lw.iter().all(|v| !v.is_nan()));
            assert_eq!(lw.iter().filter(|v| v.is_finite()).count(), 1);
            assert!((lw[[2, 6]]).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_likelihood_limit_returns_the_prior() {
        let x = random_image(8, 11);
        let params = ModelParams::new(8, 2, 0.25, 3).unwrap();
        let rho = random_product(8, 12);
        let obs = sample_observations(&x, &rho, &params, 12).unwrap();
        let resp = e_step(&obs, &x, &rho, 1e6).unwrap();
        let joint = rho.joint_matrix();
        for i in 0..resp.n() {
            let w = resp.weights(i);
            let dev = w
                .iter()
                .zip(joint.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dev < 1e-6, "obs {i}: max deviation from prior {dev}");
        }
    }

    #[test]
    fn fft_posterior_matches_brute_force_per_shift() {
        let truth = random_image(8, 13);
        let params = ModelParams::new(8, 2, 0.3, 4).unwrap();
        let obs =
            sample_observations(&truth, &ShiftDistribution::uniform(8), &params, 13).unwrap();
        let x = random_image(8, 14);
        let rho = random_product(8, 15);
        let sigma = 0.3;
        let resp = e_step(&obs, &x, &rho, sigma).unwrap();
        let joint = rho.joint_matrix();
        let inv = 1.0 / (2.0 * sigma * sigma);
        for (i, y) in obs.frames().iter().enumerate() {
            let r = brute_residuals(y, &x, 2);
            let t = Array2::from_shape_fn((8, 8), |idx| joint[idx].ln() - r[idx] * inv);
            let m = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = m + t.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            let lw = resp.log_weights(i);
            for (idx, &v) in t.indexed_iter() {
                assert!(
                    (lw[idx] - (v - z)).abs() < 1e-9,
                    "obs {i} shift {idx:?}: fft {} vs brute {}",
                    lw[idx],
                    v - z
                );
            }
        }
    }

    #[test]
    fn noiseless_posterior_peaks_at_the_true_shift() {
        let x = random_image(8, 16);
        let params = ModelParams::new(8, 2, 0.0, 12).unwrap();
        let obs =
            sample_observations(&x, &ShiftDistribution::uniform(8), &params, 14).unwrap();
        let resp = e_step(&obs, &x, &ShiftDistribution::uniform(8), 1e-3).unwrap();
        let truth = obs.diagnostic_true_shifts().unwrap();
        for i in 0..resp.n() {
            let lw = resp.log_weights(i);
            let mut best = ((0usize, 0usize), f64::NEG_INFINITY);
            for (idx, &v) in lw.indexed_iter() {
                if v > best.1 {
                    best = (idx, v);
                }
            }
            assert_eq!(best.0, truth[i], "observation {i}");
        }
    }

    #[test]
    fn point_mass_m_step_inverts_the_shift_at_full_sampling() {
        let x = random_image(8, 17);
        let shift = (2, 5);
        let params = ModelParams::new(8, 1, 0.0, 1).unwrap();
        let obs =
            sample_observations(&x, &ShiftDistribution::delta(8, shift), &params, 15).unwrap();
        let resp = point_mass_resp(8, &[shift]);
        let (x_hat, floored) = m_step_image(&obs, &resp, 1e-10).unwrap();
        assert_eq!(floored, 0);
        // K = 1: the observation is R_s x, so the M-step returns R_{-s} y = x.
        let y_img = Image::new(obs.frames()[0].clone()).unwrap();
        let expected = circular_shift(&y_img, (8 - shift.0, 8 - shift.1));
        for (a, b) in x_hat.pixels().iter().zip(expected.pixels().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in x_hat.pixels().iter().zip(x.pixels().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_responsibilities_on_constant_frames_give_a_constant_image() {
        let l = 8;
        let x = Image::new(Array2::from_elem((l, l), 0.7)).unwrap();
        let params = ModelParams::new(l, 2, 0.0, 5).unwrap();
        let obs =
            sample_observations(&x, &ShiftDistribution::uniform(l), &params, 16).unwrap();
        let log_w = Array3::from_elem((5, l, l), -((l * l) as f64).ln());
        let resp = Responsibilities {
            log_w,
            log_z: Array1::zeros(5),
        };
        let (x_hat, floored) = m_step_image(&obs, &resp, 1e-10).unwrap();
        assert_eq!(floored, 0);
        for &v in x_hat.pixels().iter() {
            assert!((v - 0.7).abs() < 1e-12, "pixel {v}");
        }
    }

    #[test]
    fn m_step_maximizes_the_surrogate() {
        let truth = random_image(8, 18);
        let params = ModelParams::new(8, 2, 0.5, 30).unwrap();
        let obs =
            sample_observations(&truth, &random_product(8, 19), &params, 17).unwrap();
        let x0 = random_image(8, 20);
        let rho0 = ShiftDistribution::uniform(8);
        let resp = e_step(&obs, &x0, &rho0, 0.5).unwrap();
        let (x1, floored) = m_step_image(&obs, &resp, 1e-10).unwrap();
        assert_eq!(floored, 0, "strictly positive weights must not floor");
        let rho1 = m_step_rho(&resp).unwrap();
        let q_star = q_value(&obs, &resp, &x1, &rho1, 0.5).unwrap();

        let mut rng = stream(21, tags::SOLVER_INIT, 912);
        for trial in 0..100 {
            let scale = if trial % 2 == 0 { 1e-2 } else { 1e-4 };
            let bumped = Array2::from_shape_fn((8, 8), |idx| {
                x1.pixels()[idx] + scale * (rng.random::<f64>() - 0.5)
            });
            let q = q_value(&obs, &resp, &Image::new(bumped).unwrap(), &rho1, 0.5).unwrap();
            assert!(
                q <= q_star + 1e-9 * q_star.abs(),
                "image perturbation {trial} raised Q: {q_star} -> {q}"
            );
        }
        for trial in 0..50 {
            let mut joint = rho1.joint_matrix();
            joint.mapv_inplace(|v| v + 1e-3 * rng.random::<f64>());
            let total = joint.sum();
            joint.mapv_inplace(|v| v / total);
            let rho_b = ShiftDistribution::from_joint(joint).unwrap();
            let q = q_value(&obs, &resp, &x1, &rho_b, 0.5).unwrap();
            assert!(
                q <= q_star + 1e-9 * q_star.abs(),
                "shift-distribution perturbation {trial} raised Q: {q_star} -> {q}"
            );
        }
    }

    #[test]
    fn shift_update_covers_uniform_point_mass_and_two_term_mean() {
        let l = 8;
        let n = 3;
        let uniform = Responsibilities {
            log_w: Array3::from_elem((n, l, l), -((l * l) as f64).ln()),
            log_z: Array1::zeros(n),
        };
        let rho = m_step_rho(&uniform).unwrap();
        let joint = rho.joint_matrix();
        for &v in joint.iter() {
            assert!((v - 1.0 / 64.0).abs() < 1e-12);
        }

        let delta = point_mass_resp(l, &[(4, 1), (4, 1)]);
        let rho = m_step_rho(&delta).unwrap();
        let joint = rho.joint_matrix();
        assert!((joint[[4, 1]] - 1.0).abs() < 1e-12);
        assert!(joint.sum() - joint[[4, 1]] < 1e-12);

        // Two hand-set weight maps: the update is their arithmetic mean.
        let mut w = Array3::from_elem((2, l, l), f64::NEG_INFINITY);
        w[[0, 0, 0]] = 0.25f64.ln();
        w[[0, 3, 3]] = 0.75f64.ln();
        w[[1, 0, 0]] = 0.5f64.ln();
        w[[1, 7, 2]] = 0.5f64.ln();
        let resp = Responsibilities {
            log_w: w,
            log_z: Array1::zeros(2),
        };
        let joint = m_step_rho(&resp).unwrap().joint_matrix();
        assert!((joint[[0, 0]] - 0.375).abs() < 1e-12);
        assert!((joint[[3, 3]] - 0.375).abs() < 1e-12);
        assert!((joint[[7, 2]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn q_value_point_mass_reduces_to_a_single_term() {
        let x = random_image(8, 22);
        let truth = random_image(8, 23);
        let shift = (5, 2);
        let sigma = 0.3;
        let params = ModelParams::new(8, 2, 0.0, 1).unwrap();
        let obs =
            sample_observations(&truth, &ShiftDistribution::delta(8, shift), &params, 18)
                .unwrap();
        let resp = point_mass_resp(8, &[shift]);
        let rho = ShiftDistribution::uniform(8);
        let q = q_value(&obs, &resp, &x, &rho, sigma).unwrap();
        let model = decimated_shift(&x, shift, 2).unwrap();
        let r: f64 = obs.frames()[0]
            .iter()
            .zip(model.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let expected = (1.0f64 / 64.0).ln() - r / (2.0 * sigma * sigma);
        assert!(
            (q - expected).abs() < 1e-10,
            "single-term Q: got {q}, expected {expected}"
        );
    }

    #[test]
    fn q_value_is_pure_entropy_for_zero_residual_data() {
        let x = random_image(8, 24);
        let n = 4;
        let params = ModelParams::new(8, 2, 0.0, n).unwrap();
        let obs =
            sample_observations(&x, &ShiftDistribution::uniform(8), &params, 19).unwrap();
        let shifts = obs.diagnostic_true_shifts().unwrap().to_vec();
        let resp = point_mass_resp(8, &shifts);
        let q = q_value(&obs, &resp, &x, &ShiftDistribution::uniform(8), 0.125).unwrap();
        let expected = -(n as f64) * 64.0f64.ln();
        assert!(
            (q - expected).abs() < 1e-6,
            "entropy-only Q: got {q}, expected {expected}"
        );
    }

    #[test]
    fn em_iterations_ascend_both_surrogate_and_likelihood() {
        let truth = random_image(8, 25);
        let sigma = 0.3;
        let params = ModelParams::new(8, 2, sigma, 200).unwrap();
        let obs = sample_observations(&truth, &random_product(8, 26), &params, 20).unwrap();
        let mut x = random_image(8, 27);
        let mut rho = ShiftDistribution::uniform(8);
        let mut lls = Vec::new();
        for iter in 0..20 {
            let resp = e_step(&obs, &x, &rho, sigma).unwrap();
            lls.push(resp.log_normalizers().sum());
            let q_before = q_value(&obs, &resp, &x, &rho, sigma).unwrap();
            let (x_next, _) = m_step_image(&obs, &resp, 1e-10).unwrap();
            let rho_next = m_step_rho(&resp).unwrap();
            let q_after = q_value(&obs, &resp, &x_next, &rho_next, sigma).unwrap();
            assert!(
                q_after >= q_before - 1e-8 * q_before.abs(),
                "iteration {iter}: surrogate fell {q_before} -> {q_after}"
            );
            x = x_next;
            rho = rho_next;
        }
        lls.push(log_likelihood(&obs, &x, &rho, sigma).unwrap());
        for (t, pair) in lls.windows(2).enumerate() {
            assert!(
                pair[1] >= pair[0] - 1e-8 * pair[0].abs(),
                "log-likelihood fell at iteration {t}: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn permuting_observations_leaves_updates_unchanged() {
        let truth = random_image(8, 28);
        let params = ModelParams::new(8, 2, 0.25, 40).unwrap();
        let obs = sample_observations(&truth, &random_product(8, 29), &params, 21).unwrap();
        let mut reversed_frames: Vec<Array2<f64>> = obs.frames().to_vec();
        reversed_frames.reverse();
        let obs_rev = ObservationSet::new(*obs.params(), reversed_frames).unwrap();

        let x = random_image(8, 30);
        let rho = random_product(8, 31);
        let ll_a = log_likelihood(&obs, &x, &rho, 0.25).unwrap();
        let ll_b = log_likelihood(&obs_rev, &x, &rho, 0.25).unwrap();
        assert!((ll_a - ll_b).abs() <= 1e-10 * ll_a.abs());

        let resp_a = e_step(&obs, &x, &rho, 0.25).unwrap();
        let resp_b = e_step(&obs_rev, &x, &rho, 0.25).unwrap();
        let (xa, _) = m_step_image(&obs, &resp_a, 1e-10).unwrap();
        let (xb, _) = m_step_image(&obs_rev, &resp_b, 1e-10).unwrap();
        for (a, b) in xa.pixels().iter().zip(xb.pixels().iter()) {
            assert!((a - b).abs() < 1e-10, "image update moved: {a} vs {b}");
        }
        let ja = m_step_rho(&resp_a).unwrap().joint_matrix();
        let jb = m_step_rho(&resp_b).unwrap().joint_matrix();
        for (a, b) in ja.iter().zip(jb.iter()) {
            assert!((a - b).abs() < 1e-12, "shift update moved: {a} vs {b}");
        }
    }

    #[test]
    fn identity_denoiser_reproduces_plain_em_bit_for_bit() {
        let truth = builtin_phantom(PhantomKind::Blobs, 8).unwrap();
        let sigma = 0.25;
        let params = ModelParams::new(8, 2, sigma, 100).unwrap();
        let obs = sample_observations(&truth, &random_product(8, 32), &params, 22).unwrap();
        let cfg = EmSolverConfig {
            f: 3,
            max_outer: 12,
            stop_tol: 1e-300,
            seed: 5,
            ..EmSolverConfig::default()
        };
        let est = projected_em(&obs, sigma, &DenoiserHandle::Identity, &cfg, Some(&truth))
            .unwrap();

        // Plain EM replay from the same initialization.
        let (mut x, r1, r2) = random_init(8, cfg.seed, 0);
        let mut rho = ShiftDistribution::from_marginals(r1, r2).unwrap();
        for _ in 0..12 {
            let resp = e_step(&obs, &x, &rho, sigma).unwrap();
            let (x_next, _) = m_step_image(&obs, &resp, cfg.diag_floor).unwrap();
            rho = m_step_rho(&resp).unwrap();
            x = x_next;
        }
        assert_eq!(est.x_hat.side(), 8);
        for (a, b) in est.x_hat.pixels().iter().zip(x.pixels().iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "projected EM diverged from plain EM");
        }
        for (a, b) in est
            .rho_hat
            .joint_matrix()
            .iter()
            .zip(rho.joint_matrix().iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // The recorded log-likelihoods are the plain EM sequence: nondecreasing.
        let lls: Vec<f64> = est.trace.iter().filter_map(|r| r.loglik).collect();
        assert_eq!(lls.len(), 13, "12 EM records plus the closing evaluation");
        for pair in lls.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-8 * pair[0].abs(),
                "log-likelihood fell: {} -> {}",
                pair[0],
                pair[1]
            );
        }
        assert!(!est.converged);
        assert_eq!(est.line_search_failures, 0);
    }

    #[test]
    fn trace_layout_interleaves_iteration_and_denoise_records() {
        let truth = builtin_phantom(PhantomKind::Blobs, 8).unwrap();
        let sigma = 0.25;
        let params = ModelParams::new(8, 2, sigma, 60).unwrap();
        let obs =
            sample_observations(&truth, &ShiftDistribution::uniform(8), &params, 23).unwrap();
        let cfg = EmSolverConfig {
            f: 2,
            max_outer: 6,
            stop_tol: 1e-300,
            schedule_offset: 10,
            ..EmSolverConfig::default()
        };
        let est = projected_em(
            &obs,
            sigma,
            &DenoiserHandle::GaussianBlur,
            &cfg,
            Some(&truth),
        )
        .unwrap();

        // 1 initial + 6 EM + 3 denoise + 1 final.
        assert_eq!(est.trace.len(), 11);
        let rec = &est.trace[0];
        assert_eq!(rec.iter, 0);
        assert!(rec.loglik.is_none() && rec.sigma_denoise.is_none());
        assert!(rec.error.is_some());

        let em_records: Vec<_> = est
            .trace
            .iter()
            .filter(|r| r.floored_pixels.is_some())
            .collect();
        assert_eq!(em_records.len(), 6);
        assert!(em_records.iter().all(|r| r.loglik.is_some()));

        let denoise_records: Vec<_> = est
            .trace
            .iter()
            .filter(|r| r.sigma_denoise.is_some())
            .collect();
        assert_eq!(denoise_records.len(), 3);
        // Offset 10 on the schedule: 2^(-1) then 2^(-1.1), 2^(-1.2).
        assert_eq!(denoise_records[0].sigma_denoise.unwrap(), 0.5);
        assert_eq!(
            denoise_records[1].sigma_denoise.unwrap(),
            0.5 * (-0.1f64).exp2()
        );
        assert!(denoise_records.iter().all(|r| r.clip.is_none()));

        let last = est.trace.last().unwrap();
        assert_eq!(last.iter, 6);
        assert!(last.loglik.is_some() && last.error.is_some());

        // Wall-clock stamps never run backwards.
        for pair in est.trace.windows(2) {
            assert!(pair[1].seconds >= pair[0].seconds);
        }
    }

    #[test]
    fn repeated_runs_are_identical_except_wall_clock() {
        let truth = builtin_phantom(PhantomKind::Blobs, 8).unwrap();
        let sigma = 0.25;
        let params = ModelParams::new(8, 2, sigma, 50).unwrap();
        let obs = sample_observations(&truth, &random_product(8, 33), &params, 24).unwrap();
        let cfg = EmSolverConfig {
            f: 2,
            max_outer: 8,
            seed: 9,
            ..EmSolverConfig::default()
        };
        let run = || {
            projected_em(
                &obs,
                sigma,
                &DenoiserHandle::GaussianBlur,
                &cfg,
                Some(&truth),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.trace.len(), b.trace.len());
        for (ra, rb) in a.trace.iter().zip(b.trace.iter()) {
            assert_eq!(ra.iter, rb.iter);
            assert_eq!(ra.loglik.map(f64::to_bits), rb.loglik.map(f64::to_bits));
            assert_eq!(ra.error.map(f64::to_bits), rb.error.map(f64::to_bits));
            assert_eq!(ra.floored_pixels, rb.floored_pixels);
            assert_eq!(
                ra.sigma_denoise.map(f64::to_bits),
                rb.sigma_denoise.map(f64::to_bits)
            );
        }
        for (pa, pb) in a.x_hat.pixels().iter().zip(b.x_hat.pixels().iter()) {
            assert_eq!(pa.to_bits(), pb.to_bits());
        }
        assert_eq!(a.converged, b.converged);
    }

    #[test]
    fn projected_em_halves_the_error_of_a_random_start_at_desk_scale() {
        let truth = builtin_phantom(PhantomKind::Blobs, 16).unwrap();
        let sigma = 0.125;
        let params = ModelParams::new(16, 2, sigma, 2000).unwrap();
        let obs =
            sample_observations(&truth, &random_product(16, 34), &params, 25).unwrap();
        let cfg = EmSolverConfig {
            f: 5,
            max_outer: 60,
            seed: 2,
            ..EmSolverConfig::default()
        };
        let est = projected_em(
            &obs,
            sigma,
            &DenoiserHandle::GaussianBlur,
            &cfg,
            Some(&truth),
        )
        .unwrap();
        let start = est.trace.first().unwrap().error.unwrap();
        let end = est.trace.last().unwrap().error.unwrap();
        assert!(
            end <= 0.5 * start,
            "EM should at least halve the random-start error: {start} -> {end}"
        );
    }

    #[test]
    fn denoiser_failure_names_the_outer_iteration() {
        let truth = random_image(8, 35);
        let sigma = 0.25;
        let params = ModelParams::new(8, 2, sigma, 20).unwrap();
        let obs =
            sample_observations(&truth, &ShiftDistribution::uniform(8), &params, 26).unwrap();
        let broken = DenoiserHandle::external(vec!["false".into()]).unwrap();
        let cfg = EmSolverConfig {
            f: 2,
            max_outer: 4,
            ..EmSolverConfig::default()
        };
        let err = projected_em(&obs, sigma, &broken, &cfg, None).unwrap_err();
        match err {
            SrError::Denoiser { detail, .. } => {
                assert!(
                    detail.contains("outer iteration 0"),
                    "detail should locate the failure: {detail}"
                );
            }
            other => panic!("expected a denoiser error, got {other:?}"),
        }
    }

    #[test]
    fn shape_guards_reject_mismatched_inputs() {
        let x = random_image(8, 36);
        let params = ModelParams::new(8, 2, 0.25, 3).unwrap();
        let obs =
            sample_observations(&x, &ShiftDistribution::uniform(8), &params, 27).unwrap();
        let wrong_img = random_image(16, 37);
        assert!(log_likelihood(&obs, &wrong_img, &ShiftDistribution::uniform(8), 0.25).is_err());
        assert!(log_likelihood(&obs, &x, &ShiftDistribution::uniform(16), 0.25).is_err());

        let resp_wrong = point_mass_resp(8, &[(0, 0)]);
        assert!(m_step_image(&obs, &resp_wrong, 1e-10).is_err());
        assert!(q_value(&obs, &resp_wrong, &x, &ShiftDistribution::uniform(8), 0.25).is_err());

        let empty = ObservationSet::new(ModelParams::new(8, 2, 0.25, 0).unwrap(), vec![]);
        let empty = empty.unwrap();
        assert!(e_step(&empty, &x, &ShiftDistribution::uniform(8), 0.25).is_err());
    }
}

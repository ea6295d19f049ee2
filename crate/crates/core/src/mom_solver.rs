//! Projected method of moments: limited-memory quasi-Newton minimization of
//! the moment-matching objective, interleaved with a denoiser.
//!
//! The iterate is the triple `(x, ρ1, ρ2)`: image pixels plus the two shift
//! marginals, packed into one flat vector. A strong-Wolfe line search drives
//! an L-BFGS step; after every accepted step the marginals are projected back
//! onto the probability simplex (the pixels are unconstrained). Every
//! [`MomSolverConfig::f`] steps the image is clipped to
//! [`CLIP_LO`]`..=`[`CLIP_HI`] and passed through the denoiser at the current
//! schedule noise level; the quasi-Newton curvature history survives that
//! boundary unless the denoiser actually changed the image, so running with
//! the identity denoiser reproduces the unprojected trajectory bit for bit.
//!
//! Line-search trial points that evaluate to NaN/∞ are treated as rejected
//! trials (the search shrinks away from them); a non-finite value or gradient
//! at an accepted iterate or at initialization is an error. A line search
//! that finds no acceptable point leaves the iterate unchanged and is
//! reported through [`QnRun::line_search_failed`] /
//! [`Estimate::line_search_failures`] rather than as an error.

use std::collections::VecDeque;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoise::{denoise, DenoiseSchedule, DenoiserHandle};
use crate::error::{invalid, SrError, SrResult};
use crate::estimate::{Estimate, TraceRecord};
use crate::image::{clip, normalize_unit_range, Image};
use crate::metrics::shift_aligned_error;
use crate::model::ShiftDistribution;
use crate::moments::{MomentPair, ObjectiveWeights};
use crate::rng::{stream, tags};

/// Lower pixel clip bound applied before every denoiser call.
pub const CLIP_LO: f64 = -0.5;
/// Upper pixel clip bound applied before every denoiser call.
pub const CLIP_HI: f64 = 1.5;

/// Gradient norm below which an iterate is declared stationary.
const STATIONARY_GRAD_NORM: f64 = 1e-12;
/// Relative pairing threshold for accepting an L-BFGS curvature pair.
const CURVATURE_EPS: f64 = 1e-10;
/// Largest step length the line search will probe.
const ALPHA_MAX: f64 = 1e6;

// ─── configuration ───────────────────────────────────────────────────────────

/// Tuning knobs for [`quasi_newton_run`] and [`projected_mom`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MomSolverConfig {
    /// Quasi-Newton steps between consecutive denoiser applications.
    pub f: usize,
    /// Maximum number of outer (denoise) iterations.
    pub max_outer: usize,
    /// Number of curvature pairs kept by the L-BFGS recursion.
    pub memory: usize,
    /// Sufficient-decrease constant of the Wolfe conditions.
    pub c1: f64,
    /// Curvature constant of the Wolfe conditions.
    pub c2: f64,
    /// Objective evaluations the line search may spend per step.
    pub max_ls_trials: usize,
    /// Stop when the relative objective change over one outer iteration
    /// falls below this.
    pub stop_tol: f64,
    /// Seed for the random initialization streams.
    pub seed: u64,
    /// Initial position on the denoiser noise schedule (number of
    /// applications already consumed).
    pub schedule_offset: u32,
    /// Independent random restarts; the estimate with the lowest final
    /// objective wins.
    pub multi_start: usize,
    /// First-moment weight in the objective; `None` picks the
    /// image-size/noise-level default.
    pub lambda: Option<f64>,
}

impl Default for MomSolverConfig {
    fn default() -> Self {
        MomSolverConfig {
            f: 5,
            max_outer: 100,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_ls_trials: 20,
            stop_tol: 1e-8,
            seed: 0,
            schedule_offset: 0,
            multi_start: 1,
            lambda: None,
        }
    }
}

impl MomSolverConfig {
    pub fn validate(&self) -> SrResult<()> {
        if self.f == 0 {
            return Err(invalid("solver steps per projection", "must be at least 1"));
        }
        if self.max_outer == 0 {
            return Err(invalid("solver outer iterations", "must be at least 1"));
        }
        if self.memory == 0 {
            return Err(invalid("solver memory", "must be at least 1"));
        }
        if !(self.c1.is_finite() && self.c2.is_finite() && 0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(invalid(
                "line-search constants",
                format!("need 0 < c1 < c2 < 1, got c1 = {}, c2 = {}", self.c1, self.c2),
            ));
        }
        if self.max_ls_trials == 0 {
            return Err(invalid("line-search trials", "must be at least 1"));
        }
        if !(self.stop_tol.is_finite() && self.stop_tol > 0.0) {
            return Err(invalid("stopping tolerance", "must be finite and positive"));
        }
        if self.multi_start == 0 {
            return Err(invalid("multi-start count", "must be at least 1"));
        }
        if let Some(lambda) = self.lambda {
            ObjectiveWeights::new(lambda)?;
        }
        Ok(())
    }

    fn weights_for(&self, l_high: usize, sigma: f64) -> SrResult<ObjectiveWeights> {
        match self.lambda {
            Some(lambda) => ObjectiveWeights::new(lambda),
            None => ObjectiveWeights::default_for(l_high, sigma),
        }
    }
}

// ─── simplex projection ──────────────────────────────────────────────────────

/// Euclidean projection of a finite vector onto the probability simplex
/// `{p : p ≥ 0, Σp = 1}` via the sorted-threshold construction: with the
/// entries sorted in decreasing order, the threshold `τ` is chosen so that
/// `max(v − τ, 0)` sums to one, and the support is the largest prefix whose
/// entries stay positive after shifting.
pub fn project_to_simplex(v: ArrayView1<'_, f64>) -> SrResult<Array1<f64>> {
    if v.is_empty() {
        return Err(invalid("simplex projection input", "must be nonempty"));
    }
    if v.iter().any(|a| !a.is_finite()) {
        return Err(SrError::NonFinite {
            what: "simplex projection input",
        });
    }
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite values compare"));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    Ok(v.mapv(|a| (a - tau).max(0.0)))
}

// ─── packed objective ────────────────────────────────────────────────────────

/// The optimization variable is `[x row-major | ρ1 | ρ2]` of length `L² + 2L`.
struct Problem<'a> {
    ctx: crate::moments::MomentContext,
    l: usize,
    sigma: f64,
    target: &'a MomentPair,
    lambda: f64,
}

impl<'a> Problem<'a> {
    fn new(l_high: usize, target: &'a MomentPair, sigma: f64, lambda: f64) -> SrResult<Self> {
        let l_low = target.l_low();
        if l_low == 0 || l_high % l_low != 0 {
            return Err(SrError::Shape {
                what: "moment target",
                detail: format!(
                    "low-res side {l_low} does not divide high-res side {l_high}"
                ),
            });
        }
        let ctx = crate::moments::MomentContext::new_with(l_high, l_high / l_low, true)?;
        Ok(Problem {
            ctx,
            l: l_high,
            sigma,
            target,
            lambda,
        })
    }

    fn dim(&self) -> usize {
        self.l * self.l + 2 * self.l
    }

    fn views<'z>(
        &self,
        z: &'z Array1<f64>,
    ) -> (ArrayView2<'z, f64>, ArrayView1<'z, f64>, ArrayView1<'z, f64>) {
        let n = self.l * self.l;
        let zs = z.as_slice().expect("packed iterate is contiguous");
        let x = ArrayView2::from_shape((self.l, self.l), &zs[..n]).expect("length checked");
        let r1 = ArrayView1::from(&zs[n..n + self.l]);
        let r2 = ArrayView1::from(&zs[n + self.l..]);
        (x, r1, r2)
    }

    /// Value and packed gradient; errors if either is non-finite.
    fn eval(&self, z: &Array1<f64>) -> SrResult<(f64, Array1<f64>)> {
        let (x, r1, r2) = self.views(z);
        let (f, grad) = self
            .ctx
            .value_and_grad(x, r1, r2, self.sigma, self.target, self.lambda)?;
        let mut g = Array1::<f64>::zeros(self.dim());
        {
            let gs = g.as_slice_mut().expect("owned");
            let n = self.l * self.l;
            gs[..n].copy_from_slice(grad.grad_x.as_slice().expect("row-major"));
            gs[n..n + self.l].copy_from_slice(grad.grad_rho1.as_slice().expect("owned"));
            gs[n + self.l..].copy_from_slice(grad.grad_rho2.as_slice().expect("owned"));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(SrError::NonFinite {
                what: "objective gradient",
            });
        }
        Ok((f, g))
    }

    /// Projects the two marginal blocks of a packed iterate onto the simplex.
    fn project_marginals(&self, z: &Array1<f64>) -> SrResult<Array1<f64>> {
        let n = self.l * self.l;
        let zs = z.as_slice().expect("contiguous");
        let p1 = project_to_simplex(ArrayView1::from(&zs[n..n + self.l]))?;
        let p2 = project_to_simplex(ArrayView1::from(&zs[n + self.l..]))?;
        let mut out = z.clone();
        {
            let os = out.as_slice_mut().expect("owned");
            os[n..n + self.l].copy_from_slice(p1.as_slice().expect("owned"));
            os[n + self.l..].copy_from_slice(p2.as_slice().expect("owned"));
        }
        Ok(out)
    }
}

fn pack(x: &Image, rho1: &Array1<f64>, rho2: &Array1<f64>) -> Array1<f64> {
    let l = x.side();
    let mut z = Array1::<f64>::zeros(l * l + 2 * l);
    {
        let zs = z.as_slice_mut().expect("owned");
        zs[..l * l].copy_from_slice(x.as_slice());
        zs[l * l..l * l + l].copy_from_slice(rho1.as_slice().expect("owned"));
        zs[l * l + l..].copy_from_slice(rho2.as_slice().expect("owned"));
    }
    z
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn l2(v: &Array1<f64>) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

// ─── L-BFGS memory ───────────────────────────────────────────────────────────

struct LbfgsMemory {
    cap: usize,
    s: VecDeque<Array1<f64>>,
    y: VecDeque<Array1<f64>>,
    inv_sy: VecDeque<f64>,
}

impl LbfgsMemory {
    fn new(cap: usize) -> Self {
        LbfgsMemory {
            cap,
            s: VecDeque::new(),
            y: VecDeque::new(),
            inv_sy: VecDeque::new(),
        }
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.inv_sy.clear();
    }

    /// Stores a displacement/gradient-change pair; pairs whose inner product
    /// is not safely positive are discarded (a projected step need not
    /// satisfy the curvature condition the line search enforced at the
    /// unprojected point).
    fn push(&mut self, s: Array1<f64>, y: Array1<f64>) {
        let sy = s.dot(&y);
        if !(sy.is_finite() && sy > CURVATURE_EPS * l2(&s) * l2(&y)) {
            return;
        }
        if self.s.len() == self.cap {
            self.s.pop_front();
            self.y.pop_front();
            self.inv_sy.pop_front();
        }
        self.s.push_back(s);
        self.y.push_back(y);
        self.inv_sy.push_back(1.0 / sy);
    }

    /// Two-loop recursion: returns `−H·g` with the initial Hessian scaled by
    /// the most recent curvature pair. Falls back to `−g` with no history.
    fn direction(&self, g: &Array1<f64>) -> Array1<f64> {
        if self.s.is_empty() {
            return g.mapv(|v| -v);
        }
        let m = self.s.len();
        let mut q = g.clone();
        let mut alpha = vec![0.0f64; m];
        for i in (0..m).rev() {
            alpha[i] = self.inv_sy[i] * self.s[i].dot(&q);
            q.scaled_add(-alpha[i], &self.y[i]);
        }
        let y_last = &self.y[m - 1];
        let gamma = 1.0 / (self.inv_sy[m - 1] * y_last.dot(y_last));
        let mut r = q.mapv(|v| gamma * v);
        for i in 0..m {
            let beta = self.inv_sy[i] * self.y[i].dot(&r);
            r.scaled_add(alpha[i] - beta, &self.s[i]);
        }
        r.mapv_inplace(|v| -v);
        r
    }
}

// ─── line search ─────────────────────────────────────────────────────────────

struct Trial {
    alpha: f64,
    z: Array1<f64>,
    f: f64,
    g: Array1<f64>,
}

/// One evaluation along the ray; non-finite values/gradients reject the trial.
fn eval_ray(problem: &Problem<'_>, z: &Array1<f64>, d: &Array1<f64>, alpha: f64) -> Option<Trial> {
    let mut za = z.clone();
    za.scaled_add(alpha, d);
    match problem.eval(&za) {
        Ok((f, g)) if f.is_finite() => Some(Trial { alpha, z: za, f, g }),
        _ => None,
    }
}

/// Strong-Wolfe line search (bracket + bisection zoom). Returns a point
/// satisfying both conditions when found within the trial budget; if the
/// budget runs out, the best sufficient-decrease point seen (if any) is
/// returned so progress is not discarded; `None` means no trial achieved
/// sufficient decrease.
fn wolfe_search(
    problem: &Problem<'_>,
    z: &Array1<f64>,
    d: &Array1<f64>,
    f0: f64,
    dphi0: f64,
    c1: f64,
    c2: f64,
    budget: usize,
) -> Option<Trial> {
    debug_assert!(dphi0 < 0.0);
    let armijo = |alpha: f64, f: f64| f <= f0 + c1 * alpha * dphi0;
    let strong = |dphi: f64| dphi.abs() <= c2 * dphi0.abs();
    let mut best: Option<Trial> = None;
    let consider = |t: Trial, best: &mut Option<Trial>| {
        if armijo(t.alpha, t.f) && best.as_ref().map_or(true, |b| t.f < b.f) {
            *best = Some(t);
        }
    };

    let mut trials = 0usize;
    let mut alpha_lo = 0.0f64;
    let mut f_lo = f0;
    let mut alpha = 1.0f64;
    // Bracketing phase: grow the step until the minimum is bracketed.
    let bracket = loop {
        if trials == budget {
            return best;
        }
        trials += 1;
        match eval_ray(problem, z, d, alpha) {
            Some(t) => {
                let dphi = t.g.dot(d);
                if !armijo(alpha, t.f) || (alpha_lo > 0.0 && t.f >= f_lo) {
                    break (alpha_lo, f_lo, alpha);
                }
                if strong(dphi) {
                    return Some(t);
                }
                if dphi >= 0.0 {
                    let hi = alpha_lo;
                    alpha_lo = t.alpha;
                    f_lo = t.f;
                    consider(t, &mut best);
                    break (alpha_lo, f_lo, hi);
                }
                alpha_lo = t.alpha;
                f_lo = t.f;
                consider(t, &mut best);
                if alpha >= ALPHA_MAX {
                    return best;
                }
                alpha = (2.0 * alpha).min(ALPHA_MAX);
            }
            None => break (alpha_lo, f_lo, alpha),
        }
    };

    // Zoom phase: bisect the bracket, keeping `lo` the best Armijo point.
    let (mut lo, mut f_lo, mut hi) = bracket;
    while trials < budget {
        trials += 1;
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            return best;
        }
        match eval_ray(problem, z, d, mid) {
            Some(t) => {
                let dphi = t.g.dot(d);
                if !armijo(mid, t.f) || t.f >= f_lo {
                    hi = mid;
                } else {
                    let accept = strong(dphi);
                    if dphi * (hi - lo) >= 0.0 {
                        hi = lo;
                    }
                    lo = t.alpha;
                    f_lo = t.f;
                    consider(t, &mut best);
                    if accept {
                        return best;
                    }
                }
            }
            None => hi = mid,
        }
    }
    best
}

// ─── quasi-Newton driver ─────────────────────────────────────────────────────

enum StepOutcome {
    /// The iterate moved to a point with a strictly smaller objective.
    Advanced,
    /// The gradient is numerically zero; no decrease is possible.
    Stationary,
    /// No acceptable point was found; the iterate is unchanged.
    LineSearchFailed,
}

struct QnDriver<'a> {
    problem: Problem<'a>,
    memory: LbfgsMemory,
    c1: f64,
    c2: f64,
    max_ls_trials: usize,
    z: Array1<f64>,
    f: f64,
    g: Array1<f64>,
}

impl<'a> QnDriver<'a> {
    fn new(problem: Problem<'a>, z0: Array1<f64>, cfg: &MomSolverConfig) -> SrResult<Self> {
        let (f, g) = problem.eval(&z0)?;
        Ok(QnDriver {
            memory: LbfgsMemory::new(cfg.memory),
            c1: cfg.c1,
            c2: cfg.c2,
            max_ls_trials: cfg.max_ls_trials,
            problem,
            z: z0,
            f,
            g,
        })
    }

    fn x_image(&self) -> Image {
        let (x, _, _) = self.problem.views(&self.z);
        Image::new(x.to_owned()).expect("accepted iterates are finite")
    }

    fn marginals(&self) -> (Array1<f64>, Array1<f64>) {
        let (_, r1, r2) = self.problem.views(&self.z);
        (r1.to_owned(), r2.to_owned())
    }

    /// One quasi-Newton step: direction, strong-Wolfe search on the ray,
    /// then simplex projection of the marginals with a monotonicity guard
    /// that backtracks the step length when projection undoes the decrease.
    ///
    /// When the marginals sit on the simplex boundary, projecting a
    /// quasi-Newton ray point can deflect the step into ascent no matter how
    /// short it is; the projected arc of the *negative gradient*, however,
    /// descends whenever the iterate is not constrained-stationary. The step
    /// therefore falls back to a steepest-descent attempt before giving up,
    /// and stationarity is measured through the projected-gradient
    /// displacement `‖P(z − ∇f) − z‖` (which reduces to `‖∇f‖` away from the
    /// boundary) rather than the raw gradient norm.
    fn step(&mut self) -> SrResult<StepOutcome> {
        let mut probe = self.z.clone();
        probe.scaled_add(-1.0, &self.g);
        let projected_probe = self.problem.project_marginals(&probe)?;
        if l2(&(&projected_probe - &self.z)) <= STATIONARY_GRAD_NORM {
            return Ok(StepOutcome::Stationary);
        }

        for attempt in 0..2 {
            let d = if attempt == 0 {
                self.memory.direction(&self.g)
            } else {
                self.memory.clear();
                self.g.mapv(|v| -v)
            };
            let dphi0 = self.g.dot(&d);
            if !(dphi0 < 0.0) {
                continue;
            }
            let Some(found) = wolfe_search(
                &self.problem,
                &self.z,
                &d,
                self.f,
                dphi0,
                self.c1,
                self.c2,
                self.max_ls_trials,
            ) else {
                continue;
            };
            if self.try_projected_accept(found, &d)? {
                return Ok(StepOutcome::Advanced);
            }
        }
        Ok(StepOutcome::LineSearchFailed)
    }

    /// Projects a line-search point and accepts it if the objective still
    /// decreases; otherwise halves the step length along the same ray and
    /// retries. Returns whether a point was accepted.
    fn try_projected_accept(&mut self, mut raw: Trial, d: &Array1<f64>) -> SrResult<bool> {
        for _ in 0..=self.max_ls_trials {
            let zp = self.problem.project_marginals(&raw.z)?;
            if bitwise_eq(
                zp.as_slice().expect("owned"),
                raw.z.as_slice().expect("owned"),
            ) {
                if raw.f < self.f {
                    self.accept(zp, raw.f, raw.g);
                    return Ok(true);
                }
            } else if let Ok((fp, gp)) = self.problem.eval(&zp) {
                if fp < self.f {
                    self.accept(zp, fp, gp);
                    return Ok(true);
                }
            }
            let alpha = raw.alpha * 0.5;
            let Some(next) = eval_ray(&self.problem, &self.z, d, alpha) else {
                let mut za = self.z.clone();
                za.scaled_add(alpha, d);
                raw = Trial {
                    alpha,
                    z: za,
                    f: f64::INFINITY,
                    g: Array1::zeros(self.problem.dim()),
                };
                continue;
            };
            raw = next;
        }
        Ok(false)
    }

    fn accept(&mut self, z_new: Array1<f64>, f_new: f64, g_new: Array1<f64>) {
        let s = &z_new - &self.z;
        let y = &g_new - &self.g;
        self.memory.push(s, y);
        self.z = z_new;
        self.f = f_new;
        self.g = g_new;
    }

    /// Replaces the image block after a denoiser application. When the new
    /// image is bit-identical the cached value, gradient, and curvature
    /// history all remain valid and nothing is recomputed; otherwise the
    /// history is cleared and the objective re-evaluated.
    fn replace_x(&mut self, new_x: &Image) -> SrResult<bool> {
        let n = self.problem.l * self.problem.l;
        let current = &self.z.as_slice().expect("owned")[..n];
        if bitwise_eq(current, new_x.as_slice()) {
            return Ok(false);
        }
        self.z.as_slice_mut().expect("owned")[..n].copy_from_slice(new_x.as_slice());
        self.memory.clear();
        let (f, g) = self.problem.eval(&self.z)?;
        self.f = f;
        self.g = g;
        Ok(true)
    }
}

// ─── public entry points ─────────────────────────────────────────────────────

/// Result of a plain (denoiser-free) quasi-Newton run.
#[derive(Debug, Clone)]
pub struct QnRun {
    pub x: Image,
    pub rho: ShiftDistribution,
    /// Objective value at the returned iterate.
    pub objective: f64,
    /// Steps that moved the iterate (≤ the requested budget).
    pub steps_taken: usize,
    /// True when a line search exhausted its budget without an acceptable
    /// point; the run stops there with the iterate unchanged.
    pub line_search_failed: bool,
}

/// Runs up to `steps` quasi-Newton steps on the moment-matching objective
/// from the given initial point. The marginals are projected onto the
/// simplex after every accepted step; the image is unconstrained. The
/// objective is nonincreasing across accepted steps. Initialization at a
/// global minimizer returns the initial point unchanged.
pub fn quasi_newton_run(
    init_x: &Image,
    init_rho: &ShiftDistribution,
    target: &MomentPair,
    sigma: f64,
    weights: &ObjectiveWeights,
    steps: usize,
    cfg: &MomSolverConfig,
) -> SrResult<QnRun> {
    cfg.validate()?;
    check_product_form(init_rho)?;
    check_sides(init_x, init_rho)?;
    let problem = Problem::new(init_x.side(), target, sigma, weights.lambda)?;
    let z0 = pack(init_x, init_rho.rho1(), init_rho.rho2());
    let mut driver = QnDriver::new(problem, z0, cfg)?;
    let mut taken = 0usize;
    let mut failed = false;
    for _ in 0..steps {
        match driver.step()? {
            StepOutcome::Advanced => taken += 1,
            StepOutcome::Stationary => break,
            StepOutcome::LineSearchFailed => {
                failed = true;
                break;
            }
        }
    }
    let (r1, r2) = driver.marginals();
    Ok(QnRun {
        x: driver.x_image(),
        rho: ShiftDistribution::from_marginals(r1, r2)?,
        objective: driver.f,
        steps_taken: taken,
        line_search_failed: failed,
    })
}

/// Projected method of moments from random initialization: image pixels
/// i.i.d. uniform stretched to span `[0, 1]`, marginals i.i.d. uniform
/// normalized to sum one. With `multi_start > 1` the run restarts from that
/// many independent initializations and keeps the lowest-objective estimate.
pub fn projected_mom(
    l_high: usize,
    target: &MomentPair,
    sigma: f64,
    denoiser: &DenoiserHandle,
    cfg: &MomSolverConfig,
    ground_truth: Option<&Image>,
) -> SrResult<Estimate> {
    cfg.validate()?;
    let mut best: Option<(f64, Estimate)> = None;
    for start in 0..cfg.multi_start {
        let (x0, r1, r2) = random_init(l_high, cfg.seed, start as u64);
        let outcome = run_projected(
            l_high,
            target,
            sigma,
            denoiser,
            cfg,
            &x0,
            &ShiftDistribution::from_marginals(r1, r2)?,
            ground_truth,
        )?;
        if best.as_ref().map_or(true, |(f, _)| outcome.0 < *f) {
            best = Some(outcome);
        }
    }
    Ok(best.expect("multi_start ≥ 1").1)
}

/// [`projected_mom`] from an explicit initial point (`multi_start` is
/// ignored; exactly one run is performed).
pub fn projected_mom_with_init(
    target: &MomentPair,
    sigma: f64,
    denoiser: &DenoiserHandle,
    cfg: &MomSolverConfig,
    init_x: &Image,
    init_rho: &ShiftDistribution,
    ground_truth: Option<&Image>,
) -> SrResult<Estimate> {
    cfg.validate()?;
    check_product_form(init_rho)?;
    check_sides(init_x, init_rho)?;
    let (_, estimate) = run_projected(
        init_x.side(),
        target,
        sigma,
        denoiser,
        cfg,
        init_x,
        init_rho,
        ground_truth,
    )?;
    Ok(estimate)
}

/// Draws the random initialization for restart `start`: three independent
/// streams (image, first marginal, second marginal) so the draw order never
/// couples the components. Shared by both solvers so their starting points
/// agree in distribution (and bitwise, for equal seeds).
pub(crate) fn random_init(l: usize, seed: u64, start: u64) -> (Image, Array1<f64>, Array1<f64>) {
    let mut rng_x = stream(seed, tags::SOLVER_INIT, 4 * start);
    let raw = Array2::from_shape_fn((l, l), |_| rng_x.random::<f64>());
    let (x0, _) = normalize_unit_range(&Image::new(raw).expect("uniform draws are finite"));
    let marginal = |idx: u64| {
        let mut rng = stream(seed, tags::SOLVER_INIT, 4 * start + idx);
        let mut v = Array1::from_shape_fn(l, |_| rng.random::<f64>());
        let total: f64 = v.sum();
        if total > 0.0 {
            v.mapv_inplace(|a| a / total);
        } else {
            v.fill(1.0 / l as f64);
        }
        v
    };
    (x0, marginal(1), marginal(2))
}

#[allow(clippy::too_many_arguments)]
fn run_projected(
    l_high: usize,
    target: &MomentPair,
    sigma: f64,
    denoiser: &DenoiserHandle,
    cfg: &MomSolverConfig,
    init_x: &Image,
    init_rho: &ShiftDistribution,
    ground_truth: Option<&Image>,
) -> SrResult<(f64, Estimate)> {
    let weights = cfg.weights_for(l_high, sigma)?;
    let problem = Problem::new(l_high, target, sigma, weights.lambda)?;
    let z0 = pack(init_x, init_rho.rho1(), init_rho.rho2());
    let mut driver = QnDriver::new(problem, z0, cfg)?;
    let mut schedule = DenoiseSchedule::starting_at(cfg.schedule_offset);
    let started = Instant::now();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut qn_steps = 0usize;
    let mut failures = 0usize;
    let mut converged = false;

    let record = |driver: &QnDriver<'_>, iter: usize, seconds: f64| -> SrResult<TraceRecord> {
        let mut rec = TraceRecord::at(iter, seconds);
        rec.objective = Some(driver.f);
        if let Some(truth) = ground_truth {
            rec.error = Some(shift_aligned_error(&driver.x_image(), truth)?.error);
        }
        Ok(rec)
    };

    trace.push(record(&driver, 0, started.elapsed().as_secs_f64())?);
    for outer in 0..cfg.max_outer {
        let f_outer_start = driver.f;
        for _ in 0..cfg.f {
            match driver.step()? {
                StepOutcome::Advanced => {
                    qn_steps += 1;
                    trace.push(record(&driver, qn_steps, started.elapsed().as_secs_f64())?);
                }
                StepOutcome::Stationary => break,
                StepOutcome::LineSearchFailed => {
                    failures += 1;
                    break;
                }
            }
        }

        let sigma_t = schedule.sigma_current();
        let clipped = clip(&driver.x_image(), CLIP_LO, CLIP_HI);
        let denoised = denoise(denoiser, &clipped, sigma_t).map_err(|e| match e {
            SrError::Denoiser { name, detail } => SrError::Denoiser {
                name,
                detail: format!("outer iteration {outer}: {detail}"),
            },
            other => other,
        })?;
        schedule = schedule.advanced();
        driver.replace_x(&denoised)?;
        let mut rec = record(&driver, qn_steps, started.elapsed().as_secs_f64())?;
        rec.sigma_denoise = Some(sigma_t);
        rec.clip = Some((CLIP_LO, CLIP_HI));
        trace.push(rec);

        let denom = f_outer_start.abs().max(f64::MIN_POSITIVE);
        if (driver.f - f_outer_start).abs() / denom < cfg.stop_tol {
            converged = true;
            break;
        }
    }

    let (r1, r2) = driver.marginals();
    let estimate = Estimate {
        x_hat: driver.x_image(),
        rho_hat: ShiftDistribution::from_marginals(r1, r2)?,
        trace,
        converged,
        line_search_failures: failures,
    };
    Ok((driver.f, estimate))
}

fn check_product_form(rho: &ShiftDistribution) -> SrResult<()> {
    if rho.has_joint() {
        return Err(invalid(
            "initial shift distribution",
            "the solver optimizes the two marginals and needs a product-form start",
        ));
    }
    Ok(())
}

fn check_sides(x: &Image, rho: &ShiftDistribution) -> SrResult<()> {
    if rho.len() != x.side() {
        return Err(SrError::Shape {
            what: "initial shift distribution",
            detail: format!(
                "side {} does not match image side {}",
                rho.len(),
                x.side()
            ),
        });
    }
    Ok(())
}

// ─── tests ───────────────────────────────────────────────────────────────────

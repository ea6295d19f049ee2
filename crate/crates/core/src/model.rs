//! The super-resolution multi-reference alignment observation model.
//!
//! A high-resolution image x on the cyclic grid Z_L × Z_L is observed N times
//! through random cyclic shifts followed by K-fold decimation and white
//! Gaussian noise:
//!
//! ```text
//! y_i[n1, n2] = x[(n1·K − s_i^1) mod L, (n2·K − s_i^2) mod L] + ε_i[n1, n2]
//! ```
//!
//! with shifts s_i drawn i.i.d. from an unknown distribution over Z_L × Z_L
//! (independent row/col marginals in the generative model; estimators may
//! carry a full joint) and ε_i ~ N(0, σ²) per entry. This module owns the
//! geometry: cyclic shifts, decimation and its adjoint, observation sampling,
//! the sub-image decomposition, and the explicit construction of parameter
//! pairs that the likelihood cannot distinguish.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, SrError, SrResult};
use crate::image::Image;
use crate::rng::{stream, tags};

/// Tolerance for "sums to one" checks on shift distributions.
pub const SIMPLEX_TOL: f64 = 1e-12;

// ─── parameters ─────────────────────────────────────────────────────────────

/// Dimensions and noise level of the observation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// High-resolution side length L.
    pub l_high: usize,
    /// Decimation factor K; L must be an integer multiple of K.
    pub k: usize,
    /// Noise standard deviation σ ≥ 0.
    pub sigma: f64,
    /// Number of observations N.
    pub n: usize,
}

impl ModelParams {
    pub fn new(l_high: usize, k: usize, sigma: f64, n: usize) -> SrResult<Self> {
        if l_high == 0 {
            return Err(invalid("l_high", "must be positive"));
        }
        if k == 0 {
            return Err(invalid("k", "must be positive"));
        }
        if l_high % k != 0 {
            return Err(SrError::Indivisible { l_high, k });
        }
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(invalid("sigma", format!("must be finite and >= 0, got {sigma}")));
        }
        Ok(ModelParams { l_high, k, sigma, n })
    }

    /// Low-resolution side length L/K.
    pub fn l_low(&self) -> usize {
        self.l_high / self.k
    }

    /// Re-checks the struct invariants (used after deserialization).
    pub fn validate(&self) -> SrResult<()> {
        ModelParams::new(self.l_high, self.k, self.sigma, self.n).map(|_| ())
    }
}

// ─── shift distributions ────────────────────────────────────────────────────

/// Distribution of the 2-D cyclic shift.
///
/// The generative model draws the two shift coordinates independently from
/// marginals `rho1` (rows) and `rho2` (columns). EM estimates a full joint
/// over Z_L × Z_L; when present it takes precedence, and the stored marginals
/// are its axis sums.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftDistribution {
    rho1: Array1<f64>,
    rho2: Array1<f64>,
    joint: Option<Array2<f64>>,
}

fn check_simplex(v: &Array1<f64>, what: &'static str) -> SrResult<()> {
    if v.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(invalid(what, "entries must be finite and nonnegative"));
    }
    let sum: f64 = v.sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(invalid(what, format!("entries must sum to 1, got {sum}")));
    }
    Ok(())
}

impl ShiftDistribution {
    /// Product distribution from row/column marginals of equal length.
    pub fn from_marginals(rho1: Array1<f64>, rho2: Array1<f64>) -> SrResult<Self> {
        if rho1.len() != rho2.len() || rho1.is_empty() {
            return Err(SrError::Shape {
                what: "ShiftDistribution::from_marginals",
                detail: format!("marginal lengths {} vs {}", rho1.len(), rho2.len()),
            });
        }
        check_simplex(&rho1, "rho1")?;
        check_simplex(&rho2, "rho2")?;
        Ok(ShiftDistribution { rho1, rho2, joint: None })
    }

    /// Full joint over Z_L × Z_L; marginals are derived by axis sums.
    pub fn from_joint(joint: Array2<f64>) -> SrResult<Self> {
        let (r, c) = joint.dim();
        if r != c || r == 0 {
            return Err(SrError::Shape {
                what: "ShiftDistribution::from_joint",
                detail: format!("expected square joint, got {r}x{c}"),
            });
        }
        if joint.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(invalid("rho_joint", "entries must be finite and nonnegative"));
        }
        let sum: f64 = joint.sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid("rho_joint", format!("entries must sum to 1, got {sum}")));
        }
        let rho1 = joint.sum_axis(Axis(1));
        let rho2 = joint.sum_axis(Axis(0));
        Ok(ShiftDistribution { rho1, rho2, joint: Some(joint) })
    }

    /// Uniform distribution over all L² shifts.
    pub fn uniform(l: usize) -> Self {
        let m = Array1::from_elem(l, 1.0 / l as f64);
        ShiftDistribution { rho1: m.clone(), rho2: m, joint: None }
    }

    /// Point mass at a single shift.
    pub fn delta(l: usize, shift: (usize, usize)) -> Self {
        let mut rho1 = Array1::zeros(l);
        let mut rho2 = Array1::zeros(l);
        rho1[shift.0 % l] = 1.0;
        rho2[shift.1 % l] = 1.0;
        ShiftDistribution { rho1, rho2, joint: None }
    }

    pub fn len(&self) -> usize {
        self.rho1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho1.is_empty()
    }

    pub fn rho1(&self) -> &Array1<f64> {
        &self.rho1
    }

    pub fn rho2(&self) -> &Array1<f64> {
        &self.rho2
    }

    /// True when a full joint is stored (EM estimates); false for products.
    pub fn has_joint(&self) -> bool {
        self.joint.is_some()
    }

    /// Joint probability matrix: the stored joint, or the outer product of
    /// the marginals.
    pub fn joint_matrix(&self) -> Array2<f64> {
        match &self.joint {
            Some(j) => j.clone(),
            None => {
                let l = self.len();
                Array2::from_shape_fn((l, l), |(a, b)| self.rho1[a] * self.rho2[b])
            }
        }
    }

    /// Draws one shift. Consumes one uniform for the joint path, or two
    /// (row then column) for the product path — the order is part of the
    /// determinism contract.
    pub fn sample_shift<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        match &self.joint {
            Some(j) => {
                let u: f64 = rng.random();
                let flat = inverse_cdf(j.as_slice().expect("owned joint"), u);
                let l = self.len();
                (flat / l, flat % l)
            }
            None => {
                let u1: f64 = rng.random();
                let u2: f64 = rng.random();
                (
                    inverse_cdf(self.rho1.as_slice().expect("owned marginal"), u1),
                    inverse_cdf(self.rho2.as_slice().expect("owned marginal"), u2),
                )
            }
        }
    }
}

/// Smallest index whose cumulative mass exceeds `u`; the final index absorbs
/// any floating-point shortfall in the total.
fn inverse_cdf(weights: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return i;
        }
    }
    // u landed in the rounding gap past the last positive weight.
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(weights.len() - 1)
}

// ─── grid operators ─────────────────────────────────────────────────────────

/// Cyclic shift of a square matrix: `out[n] = src[(n − s) mod L]` per axis.
pub(crate) fn shift_matrix(src: ArrayView2<'_, f64>, s1: usize, s2: usize) -> Array2<f64> {
    let l = src.nrows();
    debug_assert_eq!(src.ncols(), l);
    let (s1, s2) = (s1 % l, s2 % l);
    let mut out = Array2::zeros((l, l));
    for n1 in 0..l {
        let src_row = src.row((n1 + l - s1) % l);
        let mut out_row = out.row_mut(n1);
        for n2 in 0..l {
            out_row[n2] = src_row[(n2 + l - s2) % l];
        }
    }
    out
}

/// Cyclic shift of an image by `s = (s1, s2)`: the content moves down by s1
/// rows and right by s2 columns (`out[n] = x[(n − s) mod L]`).
pub fn circular_shift(x: &Image, shift: (usize, usize)) -> Image {
    Image::new(shift_matrix(x.pixels().view(), shift.0, shift.1))
        .expect("shift preserves shape and finiteness")
}

/// K-fold decimation: keeps every K-th pixel per axis, `out[n] = x[n·K]`.
pub fn downsample(x: &Image, k: usize) -> SrResult<Array2<f64>> {
    let l = x.side();
    if k == 0 {
        return Err(invalid("k", "must be positive"));
    }
    if l % k != 0 {
        return Err(SrError::Indivisible { l_high: l, k });
    }
    Ok(x.pixels().slice(s![..;k, ..;k]).to_owned())
}

/// Zero-insertion upsampling, the adjoint of [`downsample`]:
/// `out[n·K] = y[n]`, all other pixels zero. Satisfies
/// `⟨downsample(x), y⟩ = ⟨x, upsample_adjoint(y)⟩` and
/// `downsample(upsample_adjoint(y)) = y` exactly.
pub fn upsample_adjoint(y: ArrayView2<'_, f64>, k: usize) -> SrResult<Image> {
    let (r, c) = y.dim();
    if r != c || r == 0 {
        return Err(SrError::Shape {
            what: "upsample_adjoint",
            detail: format!("expected nonempty square input, got {r}x{c}"),
        });
    }
    if k == 0 {
        return Err(invalid("k", "must be positive"));
    }
    let mut out = Array2::zeros((r * k, c * k));
    out.slice_mut(s![..;k, ..;k]).assign(&y);
    Image::new(out)
}

/// Raw-array variant of [`upsample_adjoint`] for hot paths that then feed the
/// result straight into an FFT.
pub(crate) fn upsample_matrix(y: ArrayView2<'_, f64>, k: usize) -> Array2<f64> {
    let (r, c) = y.dim();
    let mut out = Array2::zeros((r * k, c * k));
    out.slice_mut(s![..;k, ..;k]).assign(&y);
    out
}

/// One noiseless observation: decimated cyclic shift `P R_s x`.
pub fn decimated_shift(x: &Image, shift: (usize, usize), k: usize) -> SrResult<Array2<f64>> {
    downsample(&circular_shift(x, shift), k)
}

// ─── observations ───────────────────────────────────────────────────────────

/// A batch of N observed low-resolution frames plus the parameters that
/// produced them.
///
/// The true shifts are retained for diagnostics when the set was synthesized
/// locally, but they are deliberately hidden behind
/// [`ObservationSet::diagnostic_true_shifts`]: estimators receive the frames
/// and parameters only.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    params: ModelParams,
    frames: Vec<Array2<f64>>,
    true_shifts: Option<Vec<(usize, usize)>>,
    seed: Option<u64>,
}

impl ObservationSet {
    /// Wraps externally produced frames (e.g. loaded from disk).
    pub fn new(params: ModelParams, frames: Vec<Array2<f64>>) -> SrResult<Self> {
        params.validate()?;
        if frames.len() != params.n {
            return Err(SrError::Shape {
                what: "ObservationSet::new",
                detail: format!("expected {} frames, got {}", params.n, frames.len()),
            });
        }
        let l_low = params.l_low();
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != (l_low, l_low) {
                return Err(SrError::Shape {
                    what: "ObservationSet::new",
                    detail: format!("frame {i} has shape {:?}, expected {l_low}x{l_low}", f.dim()),
                });
            }
            if !f.iter().all(|v| v.is_finite()) {
                return Err(SrError::NonFinite { what: "observation frame" });
            }
        }
        Ok(ObservationSet { params, frames, true_shifts: None, seed: None })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn frames(&self) -> &[Array2<f64>] {
        &self.frames
    }

    pub fn n(&self) -> usize {
        self.frames.len()
    }

    /// Seed used to synthesize this set, when it was sampled locally.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Ground-truth shifts, available only for locally synthesized sets.
    /// Diagnostics only — estimators must never call this.
    pub fn diagnostic_true_shifts(&self) -> Option<&[(usize, usize)]> {
        self.true_shifts.as_deref()
    }

    /// Reattaches seed and true shifts after a disk round trip.
    pub(crate) fn attach_provenance(
        &mut self,
        seed: Option<u64>,
        true_shifts: Option<Vec<(usize, usize)>>,
    ) {
        self.seed = seed;
        self.true_shifts = true_shifts.filter(|v| v.len() == self.frames.len());
    }
}

/// Draws N observations `y_i = P R_{s_i} x + ε_i`.
///
/// Observation `i` consumes its own RNG stream derived from
/// `(seed, OBSERVATION, i)`: shift draw first, then the noise entries in
/// row-major order. Results are identical regardless of thread count.
pub fn sample_observations(
    x: &Image,
    rho: &ShiftDistribution,
    params: &ModelParams,
    seed: u64,
) -> SrResult<ObservationSet> {
    params.validate()?;
    if x.side() != params.l_high {
        return Err(SrError::Shape {
            what: "sample_observations",
            detail: format!("image side {} vs l_high {}", x.side(), params.l_high),
        });
    }
    if rho.len() != params.l_high {
        return Err(SrError::Shape {
            what: "sample_observations",
            detail: format!("rho length {} vs l_high {}", rho.len(), params.l_high),
        });
    }

    let sigma = params.sigma;
    let k = params.k;
    let drawn: Vec<(Array2<f64>, (usize, usize))> = (0..params.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, tags::OBSERVATION, i as u64);
            let shift = rho.sample_shift(&mut rng);
            let mut frame = downsample(&circular_shift(x, shift), k)
                .expect("params validated");
            if sigma > 0.0 {
                for v in frame.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += sigma * z;
                }
            }
            (frame, shift)
        })
        .collect();

    let mut frames = Vec::with_capacity(drawn.len());
    let mut shifts = Vec::with_capacity(drawn.len());
    for (f, s) in drawn {
        frames.push(f);
        shifts.push(s);
    }
    Ok(ObservationSet {
        params: *params,
        frames,
        true_shifts: Some(shifts),
        seed: Some(seed),
    })
}

// ─── sub-image decomposition ────────────────────────────────────────────────

/// The K² low-resolution sub-images of x: tile (n1, n2) collects the pixels
/// congruent to (n1, n2) mod K, i.e. `tile[ℓ] = x[n + ℓ·K]` per axis.
///
/// Each noiseless observation equals some cyclic low-res shift of exactly one
/// tile, which is why tiles can be permuted and translated without changing
/// the observation distribution (see [`equivalent_params`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SubImageGrid {
    k: usize,
    tile_side: usize,
    /// Row-major tiles: index n1·K + n2.
    tiles: Vec<Array2<f64>>,
}

impl SubImageGrid {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tile_side(&self) -> usize {
        self.tile_side
    }

    pub fn tile(&self, n1: usize, n2: usize) -> &Array2<f64> {
        &self.tiles[n1 * self.k + n2]
    }

    pub fn tiles(&self) -> &[Array2<f64>] {
        &self.tiles
    }
}

/// Splits x into its K² sub-images.
pub fn subimage_decompose(x: &Image, k: usize) -> SrResult<SubImageGrid> {
    let l = x.side();
    if k == 0 {
        return Err(invalid("k", "must be positive"));
    }
    if l % k != 0 {
        return Err(SrError::Indivisible { l_high: l, k });
    }
    let tile_side = l / k;
    let mut tiles = Vec::with_capacity(k * k);
    for n1 in 0..k {
        for n2 in 0..k {
            tiles.push(x.pixels().slice(s![n1..;k, n2..;k]).to_owned());
        }
    }
    Ok(SubImageGrid { k, tile_side, tiles })
}

/// Reassembles an image from its sub-image grid; exact inverse of
/// [`subimage_decompose`] (bit-for-bit).
pub fn subimage_compose(grid: &SubImageGrid) -> SrResult<Image> {
    let k = grid.k;
    let l = grid.tile_side * k;
    let mut out = Array2::zeros((l, l));
    for n1 in 0..k {
        for n2 in 0..k {
            let tile = grid.tile(n1, n2);
            if tile.dim() != (grid.tile_side, grid.tile_side) {
                return Err(SrError::Shape {
                    what: "subimage_compose",
                    detail: format!("tile ({n1},{n2}) has shape {:?}", tile.dim()),
                });
            }
            out.slice_mut(s![n1..;k, n2..;k]).assign(tile);
        }
    }
    Image::new(out)
}

// ─── likelihood-equivalent parameters ───────────────────────────────────────

/// Per-axis change of coordinates between a high-res shift s and the
/// (tile index n, low-res shift t) pair with `P R_s x = R_t · tile_n(x)`.
///
/// Derivation: write a = (−s) mod L as a = n + K·u with n = a mod K; then
/// x[(mK − s) mod L] = tile_n[(m + u) mod L_low] = (R_t tile_n)[m] for
/// t = (−u) mod L_low.
fn decode_axis(s: usize, k: usize, l: usize) -> (usize, usize) {
    let l_low = l / k;
    let a = (l - s % l) % l;
    let n = a % k;
    let u = a / k;
    let t = (l_low - u % l_low) % l_low;
    (n, t)
}

fn encode_axis(n: usize, t: usize, k: usize, l: usize) -> usize {
    let l_low = l / k;
    let u = (l_low - t % l_low) % l_low;
    let a = n + k * u;
    (l - a % l) % l
}

/// Produces `(x', rho')` with exactly the same observation likelihood as
/// `(x, rho)` for every dataset: tile n of x moves to position `perm[n]`
/// (flat row-major tile indices) after a cyclic low-res shift by
/// `tile_shifts[n]`, and the joint shift distribution is permuted to
/// compensate. With K² tiles and L_low² shifts per tile there are
/// K²! · (L_low²)^(K²) such parameter pairs in each equivalence class.
pub fn equivalent_params(
    x: &Image,
    rho: &ShiftDistribution,
    k: usize,
    perm: &[usize],
    tile_shifts: &[(usize, usize)],
) -> SrResult<(Image, ShiftDistribution)> {
    let l = x.side();
    if k == 0 {
        return Err(invalid("k", "must be positive"));
    }
    if l % k != 0 {
        return Err(SrError::Indivisible { l_high: l, k });
    }
    if rho.len() != l {
        return Err(SrError::Shape {
            what: "equivalent_params",
            detail: format!("rho length {} vs image side {l}", rho.len()),
        });
    }
    let k2 = k * k;
    if perm.len() != k2 || tile_shifts.len() != k2 {
        return Err(SrError::Shape {
            what: "equivalent_params",
            detail: format!(
                "perm/tile_shifts must have K²={k2} entries, got {}/{}",
                perm.len(),
                tile_shifts.len()
            ),
        });
    }
    let mut seen = vec![false; k2];
    for &p in perm {
        if p >= k2 || seen[p] {
            return Err(invalid("perm", "must be a permutation of 0..K²"));
        }
        seen[p] = true;
    }

    let l_low = l / k;
    let grid = subimage_decompose(x, k)?;
    let mut new_tiles: Vec<Array2<f64>> = vec![Array2::zeros((l_low, l_low)); k2];
    for n in 0..k2 {
        let (r1, r2) = tile_shifts[n];
        new_tiles[perm[n]] = shift_matrix(grid.tiles[n].view(), r1 % l_low, r2 % l_low);
    }
    let x_new = subimage_compose(&SubImageGrid {
        k,
        tile_side: l_low,
        tiles: new_tiles,
    })?;

    let joint = rho.joint_matrix();
    let mut joint_new = Array2::zeros((l, l));
    for s1 in 0..l {
        let (n1, t1) = decode_axis(s1, k, l);
        for s2 in 0..l {
            let (n2, t2) = decode_axis(s2, k, l);
            let n = n1 * k + n2;
            let np = perm[n];
            let (np1, np2) = (np / k, np % k);
            let (r1, r2) = tile_shifts[n];
            let t1p = (t1 + l_low - r1 % l_low) % l_low;
            let t2p = (t2 + l_low - r2 % l_low) % l_low;
            let s1p = encode_axis(np1, t1p, k, l);
            let s2p = encode_axis(np2, t2p, k, l);
            joint_new[[s1p, s2p]] = joint[[s1, s2]];
        }
    }
    let rho_new = ShiftDistribution::from_joint(joint_new)?;
    Ok((x_new, rho_new))
}

/// Size of the likelihood-equivalence class at (L, K): K²! · (L_low²)^(K²).
/// Saturates at `u128::MAX` for large grids.
pub fn equivalence_class_size(l: usize, k: usize) -> u128 {
    let k2 = (k * k) as u128;
    let l_low2 = ((l / k) * (l / k)) as u128;
    let mut count: u128 = 1;
    for i in 1..=k2 {
        count = count.saturating_mul(i);
    }
    for _ in 0..k2 {
        count = count.saturating_mul(l_low2);
    }
    count
}

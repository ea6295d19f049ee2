//! Pluggable denoisers and the decaying denoiser-strength schedule.
//!
//! The projected solvers alternate optimization steps with a denoiser
//! application whose strength decays geometrically. Denoisers are selected
//! by a [`DenoiserHandle`]:
//!
//! * `Identity` — returns its input; turns a projected solver into its
//!   unprojected counterpart.
//! * `GaussianBlur` — circular convolution with an isotropic Gaussian; a
//!   weak-prior baseline for ablations.
//! * `DctThreshold` — sliding 8×8 orthonormal block DCT with hard
//!   thresholding and overlap averaging; the built-in strong denoiser.
//! * `External` — any program speaking the wire protocol below, so a
//!   state-of-the-art denoiser can be attached without linking it.
//!
//! # External wire protocol
//!
//! Parent → child stdin: the magic bytes `SRMRD1\n`, the strength as one
//! 64-bit little-endian IEEE-754 value, then the image as an `SRMR1` matrix
//! blob. Child → parent stdout: one `SRMR1` blob of identical dimensions.
//! Exit code 0 signals success. The parent clips the image to [0, 1] before
//! sending and accepts the reply unclipped.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use ndarray::Array2;

use crate::error::{invalid, SrError, SrResult};
use crate::fft2::Fft2d;
use crate::image::{clip, Image};
use crate::io::{matrix_blob, read_matrix_from};

/// Magic bytes opening every request to an external denoiser.
pub const EXTERNAL_MAGIC: &[u8; 7] = b"SRMRD1\n";

/// Default wall-clock budget for one external denoiser call.
pub const DEFAULT_EXTERNAL_TIMEOUT: Duration = Duration::from_secs(60);

/// Pixels of Gaussian-blur standard deviation per unit of denoiser strength.
const BLUR_PIXELS_PER_SIGMA: f64 = 2.0;

/// Hard-threshold multiplier for the block-DCT denoiser.
const DCT_THRESHOLD_FACTOR: f64 = 3.0;

/// Block side of the sliding DCT denoiser.
const DCT_BLOCK: usize = 8;

/// A denoiser selection. Handles are cheap to clone and immutable.
#[derive(Debug, Clone)]
pub enum DenoiserHandle {
    /// No-op: `denoise` returns the input unchanged for every strength.
    Identity,
    /// Circular convolution with an isotropic Gaussian of standard
    /// deviation `2·sigma_d` pixels.
    GaussianBlur,
    /// Sliding 8×8 orthonormal DCT, hard threshold `3·sigma_d` on all AC
    /// coefficients, overlap-average reconstruction.
    DctThreshold,
    /// External subprocess speaking the `SRMRD1` protocol.
    External {
        /// Program and arguments.
        argv: Vec<String>,
        /// Multiplier applied to the strength before sending (for denoisers
        /// that expect a [0, 255] noise scale, say 255).
        sigma_scale: f64,
        /// Wall-clock budget per call; the child is killed when exceeded.
        timeout: Duration,
    },
}

impl DenoiserHandle {
    /// External handle with unit strength scale and the default timeout.
    pub fn external(argv: Vec<String>) -> SrResult<Self> {
        Self::external_with(argv, 1.0, DEFAULT_EXTERNAL_TIMEOUT)
    }

    pub fn external_with(
        argv: Vec<String>,
        sigma_scale: f64,
        timeout: Duration,
    ) -> SrResult<Self> {
        if argv.is_empty() {
            return Err(invalid("external denoiser", "argv must not be empty"));
        }
        if !(sigma_scale.is_finite() && sigma_scale > 0.0) {
            return Err(invalid("sigma_scale", "must be finite and positive"));
        }
        Ok(DenoiserHandle::External {
            argv,
            sigma_scale,
            timeout,
        })
    }

    /// Short name used in traces and error messages.
    pub fn name(&self) -> String {
        match self {
            DenoiserHandle::Identity => "identity".into(),
            DenoiserHandle::GaussianBlur => "gaussian_blur".into(),
            DenoiserHandle::DctThreshold => "dct_threshold".into(),
            DenoiserHandle::External { argv, .. } => argv[0].clone(),
        }
    }
}

/// Applies the selected denoiser at strength `sigma_d ≥ 0`. Output
/// dimensions always equal input dimensions.
pub fn denoise(handle: &DenoiserHandle, x: &Image, sigma_d: f64) -> SrResult<Image> {
    if !(sigma_d.is_finite() && sigma_d >= 0.0) {
        return Err(invalid("sigma_d", "must be finite and nonnegative"));
    }
    match handle {
        DenoiserHandle::Identity => Ok(x.clone()),
        DenoiserHandle::GaussianBlur => Ok(gaussian_blur(x, sigma_d)),
        DenoiserHandle::DctThreshold => Ok(dct_threshold(x, sigma_d)),
        DenoiserHandle::External {
            argv,
            sigma_scale,
            timeout,
        } => external_denoise(argv, *sigma_scale * sigma_d, *timeout, x),
    }
}

// ─── schedule ────────────────────────────────────────────────────────────────

/// Geometrically decaying denoiser strength: after `t` applications the
/// strength is `2^(−t/10)` — starting at 1 and halving every 10
/// applications.
///
/// The strength is recomputed from the application counter on every call
/// (never by repeated multiplication), so `2^(−t/10)` holds to machine
/// precision for any `t`, and exactly at multiples of 10.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiseSchedule {
    applications: u32,
}

impl DenoiseSchedule {
    /// Fresh schedule: strength 1.0, nothing applied yet.
    pub fn new() -> Self {
        Self { applications: 0 }
    }

    /// Schedule that behaves as if `applications` denoiser calls already
    /// happened — for warm starts at a lower strength.
    pub fn starting_at(applications: u32) -> Self {
        Self { applications }
    }

    /// Number of applications so far.
    pub fn applications(&self) -> u32 {
        self.applications
    }

    /// Current strength `2^(−t/10)`. The halvings are applied as exact
    /// powers of two, so multiples of ten applications give exact values.
    pub fn sigma_current(&self) -> f64 {
        let t = self.applications;
        let halvings = (t / 10) as i32;
        let rem = (t % 10) as f64;
        0.5f64.powi(halvings) * (-rem / 10.0).exp2()
    }

    /// The schedule after one more application.
    #[must_use]
    pub fn advanced(self) -> Self {
        Self {
            applications: self.applications.saturating_add(1),
        }
    }
}

impl Default for DenoiseSchedule {
    fn default() -> Self {
        Self::new()
    }
}

// ─── gaussian blur ───────────────────────────────────────────────────────────

fn gaussian_blur(x: &Image, sigma_d: f64) -> Image {
    let std = BLUR_PIXELS_PER_SIGMA * sigma_d;
    if std < 1e-8 {
        return x.clone();
    }
    let l = x.side();
    let wrap = |t: usize| -> f64 { (t.min(l - t)) as f64 };
    let mut kernel = Array2::from_shape_fn((l, l), |(t1, t2)| {
        let (d1, d2) = (wrap(t1), wrap(t2));
        (-(d1 * d1 + d2 * d2) / (2.0 * std * std)).exp()
    });
    let total = kernel.sum();
    kernel /= total;
    let fft = Fft2d::new(l);
    let blurred = fft.conv(kernel.view(), x.pixels().view());
    Image::new(blurred).expect("blur preserves shape and finiteness")
}

// ─── sliding block DCT ───────────────────────────────────────────────────────

/// Orthonormal 8×8 DCT basis: `basis[u][n] = α(u)·cos(π(2n+1)u/16)`.
fn dct8_basis() -> [[f64; DCT_BLOCK]; DCT_BLOCK] {
    let mut c = [[0.0; DCT_BLOCK]; DCT_BLOCK];
    let m = DCT_BLOCK as f64;
    for (u, row) in c.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = alpha
                * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * u as f64 / (2.0 * m)).cos();
        }
    }
    c
}

/// Sliding-window 8×8 DCT hard-threshold denoiser with circular wrapping.
///
/// Every block position (all `l²`, stride 1, wrapping at the borders) is
/// transformed; AC coefficients with `|c| < 3·sigma_d` are zeroed (the DC
/// coefficient is exempt so flat regions keep their level); blocks are
/// inverse-transformed and averaged over the 64 blocks covering each pixel.
/// At `sigma_d = 0` no coefficient is touched and the input returns
/// unchanged up to round-off.
fn dct_threshold(x: &Image, sigma_d: f64) -> Image {
    let l = x.side();
    let c = dct8_basis();
    let threshold = DCT_THRESHOLD_FACTOR * sigma_d;
    let src = x.pixels();
    let mut acc = Array2::<f64>::zeros((l, l));

    let mut block = [[0.0f64; DCT_BLOCK]; DCT_BLOCK];
    let mut tmp = [[0.0f64; DCT_BLOCK]; DCT_BLOCK];
    let mut coef = [[0.0f64; DCT_BLOCK]; DCT_BLOCK];
    for i in 0..l {
        for j in 0..l {
            for (a, row) in block.iter_mut().enumerate() {
                let si = (i + a) % l;
                for (b, v) in row.iter_mut().enumerate() {
                    *v = src[[si, (j + b) % l]];
                }
            }
            // coef = C · block · Cᵀ
            mat8(&c, &block, &mut tmp, false, false);
            mat8(&tmp, &c, &mut coef, false, true);
            for (u, row) in coef.iter_mut().enumerate() {
                for (v, value) in row.iter_mut().enumerate() {
                    if !(u == 0 && v == 0) && value.abs() < threshold {
                        *value = 0.0;
                    }
                }
            }
            // block = Cᵀ · coef · C
            mat8(&c, &coef, &mut tmp, true, false);
            mat8(&tmp, &c, &mut block, false, false);
            for (a, row) in block.iter().enumerate() {
                let si = (i + a) % l;
                for (b, v) in row.iter().enumerate() {
                    acc[[si, (j + b) % l]] += *v;
                }
            }
        }
    }
    acc /= (DCT_BLOCK * DCT_BLOCK) as f64;
    Image::new(acc).expect("overlap average preserves shape and finiteness")
}

/// 8×8 matrix product `out = op(a) · op(b)` where `op` optionally transposes.
fn mat8(
    a: &[[f64; DCT_BLOCK]; DCT_BLOCK],
    b: &[[f64; DCT_BLOCK]; DCT_BLOCK],
    out: &mut [[f64; DCT_BLOCK]; DCT_BLOCK],
    transpose_a: bool,
    transpose_b: bool,
) {
    for i in 0..DCT_BLOCK {
        for j in 0..DCT_BLOCK {
            let mut s = 0.0;
            for (t, _) in a.iter().enumerate() {
                let av = if transpose_a { a[t][i] } else { a[i][t] };
                let bv = if transpose_b { b[j][t] } else { b[t][j] };
                s += av * bv;
            }
            out[i][j] = s;
        }
    }
}

// ─── external subprocess ─────────────────────────────────────────────────────

fn denoiser_err(argv: &[String], detail: impl Into<String>) -> SrError {
    SrError::Denoiser {
        name: argv[0].clone(),
        detail: detail.into(),
    }
}

fn external_denoise(
    argv: &[String],
    sigma_sent: f64,
    timeout: Duration,
    x: &Image,
) -> SrResult<Image> {
    let clipped = clip(x, 0.0, 1.0);
    let mut payload = Vec::with_capacity(16 + 8 * clipped.as_slice().len());
    payload.extend_from_slice(EXTERNAL_MAGIC);
    payload.extend_from_slice(&sigma_sent.to_le_bytes());
    payload.extend_from_slice(&matrix_blob(clipped.pixels().view()));

    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| denoiser_err(argv, format!("failed to start: {e}")))?;

    let mut stdin = child
        .stdin
        .take()
        .ok_or_else(|| denoiser_err(argv, "stdin unavailable"))?;
    let mut stdout = child
        .stdout
        .take()
        .ok_or_else(|| denoiser_err(argv, "stdout unavailable"))?;

    // Writer and reader run on their own threads so a child that interleaves
    // reading and writing cannot deadlock against us, and so the read can be
    // abandoned on timeout.
    let writer = thread::spawn(move || {
        // A child that exits early closes the pipe; that shows up as the
        // child's status/reply, so the write error itself is not reported.
        let _ = stdin.write_all(&payload);
    });
    let (tx, rx) = mpsc::channel();
    let reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let outcome = stdout.read_to_end(&mut buf).map(|_| buf);
        let _ = tx.send(outcome);
    });

    let reply = match rx.recv_timeout(timeout) {
        Ok(Ok(buf)) => buf,
        Ok(Err(e)) => {
            let _ = child.kill();
            let _ = child.wait();
            let _ = writer.join();
            let _ = reader.join();
            return Err(denoiser_err(argv, format!("failed reading reply: {e}")));
        }
        Err(_) => {
            let _ = child.kill();
            let _ = child.wait();
            // Deliberately do NOT join the I/O threads here: a grandchild
            // process spawned by the command can inherit the pipes and keep
            // them open past the direct child's death, which would park the
            // reader (and this call) until the orphan exits. The detached
            // threads finish on their own once the pipes finally close.
            return Err(denoiser_err(
                argv,
                format!("timed out after {:.1}s", timeout.as_secs_f64()),
            ));
        }
    };
    let _ = writer.join();
    let _ = reader.join();

    let status = child
        .wait()
        .map_err(|e| denoiser_err(argv, format!("failed waiting for exit: {e}")))?;
    if !status.success() {
        return Err(denoiser_err(argv, format!("exited with {status}")));
    }

    let mut cursor = &reply[..];
    let matrix =
        read_matrix_from(&mut cursor).map_err(|e| denoiser_err(argv, format!("bad reply: {e}")))?;
    if matrix.dim() != (x.side(), x.side()) {
        return Err(denoiser_err(
            argv,
            format!(
                "reply is {:?}, expected ({}, {})",
                matrix.dim(),
                x.side(),
                x.side()
            ),
        ));
    }
    Image::new(matrix).map_err(|e| denoiser_err(argv, format!("bad reply: {e}")))
}

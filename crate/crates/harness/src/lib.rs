//! Experiment runner for the SR-MRA toolkit: dataset synthesis, end-to-end
//! recoveries with both solvers, and CSV emission for plotting.
//!
//! An experiment is described by one JSON [`ExperimentConfig`]. Each trial
//! draws a fresh shift distribution, a fresh observation set, and fresh
//! solver initializations — all from per-trial RNG streams keyed by the
//! experiment seed — then runs the selected solver(s) and measures the
//! shift-aligned error against the ground-truth image. The output directory
//! receives the verbatim config, the full per-run records (with iteration
//! traces), and a plot-ready CSV.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::Array1;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use srmra_core::denoise::DenoiserHandle;
use srmra_core::em_solver::{projected_em, EmSolverConfig};
use srmra_core::estimate::{Estimate, TraceRecord};
use srmra_core::io::{read_matrix, read_pgm, save_estimate};
use srmra_core::metrics::shift_aligned_error;
use srmra_core::model::sample_observations;
use srmra_core::mom_solver::{projected_mom, MomSolverConfig};
use srmra_core::moments::empirical_moments;
use srmra_core::phantom::phantom_by_name;
use srmra_core::rng::{stream, tags};
use srmra_core::{
    Image, ModelParams, ObservationSet, ShiftDistribution, SrError, SrResult,
};

/// Exact header of every results CSV.
pub const CSV_HEADER: &str = "trial,solver,L_high,L_low,N,sigma,F,error,seconds";

// ─── image sources ───────────────────────────────────────────────────────────

/// Where the ground-truth image comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageSource {
    /// A built-in deterministic phantom (`blobs`, `checker`, `shepp_like`).
    Phantom { name: String },
    /// An image file: `.pgm` (8-bit binary, rescaled to [0, 1]) or the
    /// exact binary matrix format (any other extension).
    File { path: PathBuf },
}

/// Loads an image file: `.pgm` is read as 8-bit binary PGM rescaled to
/// [0, 1]; any other extension is read as the exact binary matrix format.
pub fn load_image_file(path: &Path) -> SrResult<Image> {
    let is_pgm = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("pgm"))
        .unwrap_or(false);
    if is_pgm {
        read_pgm(path)
    } else {
        Image::new(read_matrix(path)?)
    }
}

impl ImageSource {
    /// Loads the image and checks it matches the requested side length.
    pub fn load(&self, l_high: usize) -> SrResult<Image> {
        let img = match self {
            ImageSource::Phantom { name } => phantom_by_name(name, l_high)?,
            ImageSource::File { path } => load_image_file(path)?,
        };
        if img.side() != l_high {
            return Err(SrError::Shape {
                what: "experiment image",
                detail: format!(
                    "loaded side {} does not match configured L_high {}",
                    img.side(),
                    l_high
                ),
            });
        }
        Ok(img)
    }
}

// ─── denoiser specification ──────────────────────────────────────────────────

/// JSON-friendly denoiser selection (turned into a
/// [`DenoiserHandle`] before running).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    Identity,
    GaussianBlur,
    DctThreshold,
    External {
        argv: Vec<String>,
        #[serde(default = "default_sigma_scale")]
        sigma_scale: f64,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: f64,
    },
}

fn default_sigma_scale() -> f64 {
    1.0
}

fn default_timeout_secs() -> f64 {
    60.0
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::DctThreshold
    }
}

impl DenoiserSpec {
    pub fn handle(&self) -> SrResult<DenoiserHandle> {
        match self {
            DenoiserSpec::Identity => Ok(DenoiserHandle::Identity),
            DenoiserSpec::GaussianBlur => Ok(DenoiserHandle::GaussianBlur),
            DenoiserSpec::DctThreshold => Ok(DenoiserHandle::DctThreshold),
            DenoiserSpec::External {
                argv,
                sigma_scale,
                timeout_secs,
            } => {
                if !(timeout_secs.is_finite() && *timeout_secs > 0.0) {
                    return Err(SrError::InvalidParam {
                        what: "denoiser timeout".into(),
                        detail: "must be finite and positive".into(),
                    });
                }
                DenoiserHandle::external_with(
                    argv.clone(),
                    *sigma_scale,
                    Duration::from_secs_f64(*timeout_secs),
                )
            }
        }
    }
}

// ─── experiment configuration ────────────────────────────────────────────────

/// Which solver(s) each trial runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Mom,
    Em,
    Both,
}

impl SolverChoice {
    pub fn runs_mom(self) -> bool {
        matches!(self, SolverChoice::Mom | SolverChoice::Both)
    }

    pub fn runs_em(self) -> bool {
        matches!(self, SolverChoice::Em | SolverChoice::Both)
    }
}

/// One experiment: a ground-truth image, model parameters, solver selection,
/// and a repeat count. Serialized verbatim into the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub image: ImageSource,
    pub params: ModelParams,
    pub solver: SolverChoice,
    #[serde(default)]
    pub mom: MomSolverConfig,
    #[serde(default)]
    pub em: EmSolverConfig,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
    /// Independent repetitions; each draws its own shift distribution,
    /// observations, and initializations.
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Base seed; trial t derives everything from the stream (seed, trial t).
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Run trials serially and zero the CSV seconds column so repeated runs
    /// produce byte-identical CSV files.
    #[serde(default)]
    pub deterministic: bool,
    /// Save each run's full estimate (image, shift distribution, trace)
    /// under `output_dir/trial_NNN/<solver>/`.
    #[serde(default)]
    pub save_estimates: bool,
}

fn default_trials() -> usize {
    1
}

impl ExperimentConfig {
    pub fn validate(&self) -> SrResult<()> {
        self.params.validate()?;
        self.mom.validate()?;
        self.em.validate()?;
        self.denoiser.handle()?;
        if self.trials == 0 {
            return Err(SrError::InvalidParam {
                what: "trials".into(),
                detail: "must be at least 1".into(),
            });
        }
        if self.params.n == 0 {
            return Err(SrError::InvalidParam {
                what: "params.n".into(),
                detail: "experiments need at least one observation".into(),
            });
        }
        Ok(())
    }
}

/// FNV-1a 64-bit hash of the canonical JSON serialization of the config,
/// as 16 lowercase hex digits. Stored in every record so CSV rows can be
/// traced back to the exact configuration that produced them.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

// ─── run records ─────────────────────────────────────────────────────────────

/// Outcome of one solver on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trial: usize,
    /// `"mom"` or `"em"`.
    pub solver: String,
    pub config_hash: String,
    pub l_high: usize,
    pub l_low: usize,
    pub n: usize,
    pub sigma: f64,
    /// Solver iterations between denoiser applications.
    pub f: usize,
    /// Shift-aligned relative error against the ground truth;
    /// absent when the run failed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<f64>,
    /// The aligning shift found by the error metric.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub best_shift: Option<(usize, usize)>,
    /// Wall-clock seconds of the solve itself. For the method of moments
    /// this excludes the single pass computing empirical moments, which is
    /// reported separately.
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub moment_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub line_search_failures: Option<usize>,
    /// Error message when the run failed; `error` is then absent.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<String>,
    /// Full iteration trace (empty on failure).
    #[serde(default)]
    pub trace: Vec<TraceRecord>,
}

impl RunRecord {
    fn skeleton(trial: usize, solver: &str, hash: &str, params: &ModelParams, f: usize) -> Self {
        RunRecord {
            trial,
            solver: solver.to_string(),
            config_hash: hash.to_string(),
            l_high: params.l_high,
            l_low: params.l_low(),
            n: params.n,
            sigma: params.sigma,
            f,
            error: None,
            best_shift: None,
            seconds: 0.0,
            moment_seconds: None,
            converged: None,
            line_search_failures: None,
            failure: None,
            trace: Vec::new(),
        }
    }

    fn absorb(&mut self, truth: &Image, outcome: SrResult<Estimate>) {
        match outcome {
            Ok(est) => {
                match shift_aligned_error(&est.x_hat, truth) {
                    Ok(report) => {
                        self.error = Some(report.error);
                        self.best_shift = Some(report.best_shift);
                    }
                    Err(e) => self.failure = Some(e.to_string()),
                }
                self.converged = Some(est.converged);
                self.line_search_failures = Some(est.line_search_failures);
                self.trace = est.trace;
            }
            Err(e) => self.failure = Some(e.to_string()),
        }
    }
}

// ─── the experiment loop ─────────────────────────────────────────────────────

fn normalized_draw<R: Rng>(rng: &mut R, l: usize) -> Array1<f64> {
    let mut v = Array1::from_shape_fn(l, |_| rng.random::<f64>());
    let total = v.sum();
    if total > 0.0 {
        v.mapv_inplace(|a| a / total);
    } else {
        v.fill(1.0 / l as f64);
    }
    v
}

/// Draws the per-trial shift distribution and derived seeds. The marginals
/// are independent normalized uniform draws — every trial gets a genuinely
/// different, generic distribution.
fn trial_inputs(seed: u64, trial: u64, l: usize) -> (ShiftDistribution, u64, u64, u64) {
    let mut rng = stream(seed, tags::TRIAL_RHO, trial);
    let r1 = normalized_draw(&mut rng, l);
    let r2 = normalized_draw(&mut rng, l);
    let rho = ShiftDistribution::from_marginals(r1, r2)
        .expect("normalized positive draws form a distribution");
    let obs_seed = rng.random::<u64>();
    let mom_seed = rng.random::<u64>();
    let em_seed = rng.random::<u64>();
    (rho, obs_seed, mom_seed, em_seed)
}

fn run_trial(
    cfg: &ExperimentConfig,
    truth: &Image,
    handle: &DenoiserHandle,
    hash: &str,
    trial: usize,
) -> SrResult<Vec<RunRecord>> {
    let (rho, obs_seed, mom_seed, em_seed) =
        trial_inputs(cfg.seed, trial as u64, cfg.params.l_high);
    let obs = sample_observations(truth, &rho, &cfg.params, obs_seed)?;
    let mut records = Vec::new();

    if cfg.solver.runs_mom() {
        let mut rec = RunRecord::skeleton(trial, "mom", hash, &cfg.params, cfg.mom.f);
        let moments_started = Instant::now();
        match empirical_moments(&obs) {
            Ok(target) => {
                rec.moment_seconds = Some(moments_started.elapsed().as_secs_f64());
                let mut mom_cfg = cfg.mom.clone();
                mom_cfg.seed = mom_seed;
                let solve_started = Instant::now();
                let outcome = projected_mom(
                    cfg.params.l_high,
                    &target,
                    cfg.params.sigma,
                    handle,
                    &mom_cfg,
                    Some(truth),
                );
                rec.seconds = solve_started.elapsed().as_secs_f64();
                rec.absorb(truth, outcome);
            }
            Err(e) => rec.failure = Some(e.to_string()),
        }
        records.push(rec);
    }

    if cfg.solver.runs_em() {
        let mut rec = RunRecord::skeleton(trial, "em", hash, &cfg.params, cfg.em.f);
        let mut em_cfg = cfg.em.clone();
        em_cfg.seed = em_seed;
        let solve_started = Instant::now();
        let outcome = projected_em(&obs, cfg.params.sigma, handle, &em_cfg, Some(truth));
        rec.seconds = solve_started.elapsed().as_secs_f64();
        rec.absorb(truth, outcome);
        records.push(rec);
    }

    Ok(records)
}

/// Extracts the saved estimates out of successful records and writes them
/// under `output_dir/trial_NNN/<solver>/`. Only called when
/// `save_estimates` is set; re-runs the cheap error evaluation to recover
/// the estimate is not possible, so this keeps the estimates from the run.
fn estimate_dir(root: &Path, trial: usize, solver: &str) -> PathBuf {
    root.join(format!("trial_{trial:03}")).join(solver)
}

/// Runs every trial of the experiment and writes `config.json`,
/// `records.json`, and `results.csv` into the output directory.
///
/// A solver failure inside a trial is recorded on that run's [`RunRecord`]
/// (its `failure` field) and the remaining work proceeds; errors setting up
/// the experiment itself (bad config, unreadable image, unsampleable
/// parameters) abort the whole run.
pub fn run_experiment(cfg: &ExperimentConfig) -> SrResult<Vec<RunRecord>> {
    cfg.validate()?;
    let truth = cfg.image.load(cfg.params.l_high)?;
    let handle = cfg.denoiser.handle()?;
    let hash = config_hash(cfg);

    let trial_results: Vec<SrResult<Vec<RunRecord>>> = if cfg.deterministic {
        (0..cfg.trials)
            .map(|t| run_trial(cfg, &truth, &handle, &hash, t))
            .collect()
    } else {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, &truth, &handle, &hash, t))
            .collect()
    };
    let mut records = Vec::new();
    for r in trial_results {
        records.extend(r?);
    }

    fs::create_dir_all(&cfg.output_dir)?;
    let f = File::create(cfg.output_dir.join("config.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), cfg)?;
    let f = File::create(cfg.output_dir.join("records.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &records)?;
    write_csv(
        &cfg.output_dir.join("results.csv"),
        &records,
        cfg.deterministic,
    )?;

    if cfg.save_estimates {
        rerun_and_save_estimates(cfg, &truth, &handle, &records)?;
    }
    Ok(records)
}

/// Re-derives and saves the per-run estimates. Every run is a deterministic
/// function of (config, seed, trial), so replaying a trial reproduces its
/// estimate exactly; this trades a second solve for not holding every
/// estimate in memory during the main sweep.
fn rerun_and_save_estimates(
    cfg: &ExperimentConfig,
    truth: &Image,
    handle: &DenoiserHandle,
    records: &[RunRecord],
) -> SrResult<()> {
    for rec in records.iter().filter(|r| r.failure.is_none()) {
        let (rho, obs_seed, mom_seed, em_seed) =
            trial_inputs(cfg.seed, rec.trial as u64, cfg.params.l_high);
        let obs = sample_observations(truth, &rho, &cfg.params, obs_seed)?;
        let est = match rec.solver.as_str() {
            "mom" => {
                let target = empirical_moments(&obs)?;
                let mut mom_cfg = cfg.mom.clone();
                mom_cfg.seed = mom_seed;
                projected_mom(
                    cfg.params.l_high,
                    &target,
                    cfg.params.sigma,
                    handle,
                    &mom_cfg,
                    Some(truth),
                )?
            }
            _ => {
                let mut em_cfg = cfg.em.clone();
                em_cfg.seed = em_seed;
                projected_em(&obs, cfg.params.sigma, handle, &em_cfg, Some(truth))?
            }
        };
        save_estimate(&estimate_dir(&cfg.output_dir, rec.trial, &rec.solver), &est)?;
    }
    Ok(())
}

// ─── CSV emission ────────────────────────────────────────────────────────────

/// Formats records as CSV with the fixed header
/// `trial,solver,L_high,L_low,N,sigma,F,error,seconds`. One row per record;
/// a failed run leaves its `error` field empty. With `zero_seconds` the
/// seconds column is written as `0` so byte-identical output is possible
/// across repeated runs.
pub fn emit_csv<W: Write>(w: W, records: &[RunRecord], zero_seconds: bool) -> SrResult<()> {
    let mut writer = csv::Writer::from_writer(w);
    writer
        .write_record(CSV_HEADER.split(','))
        .map_err(|e| SrError::Format(format!("csv header: {e}")))?;
    for r in records {
        let error = r.error.map(|e| e.to_string()).unwrap_or_default();
        let seconds = if zero_seconds {
            "0".to_string()
        } else {
            r.seconds.to_string()
        };
        writer
            .write_record([
                r.trial.to_string(),
                r.solver.clone(),
                r.l_high.to_string(),
                r.l_low.to_string(),
                r.n.to_string(),
                r.sigma.to_string(),
                r.f.to_string(),
                error,
                seconds,
            ])
            .map_err(|e| SrError::Format(format!("csv row: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| SrError::Format(format!("csv flush: {e}")))?;
    Ok(())
}

/// [`emit_csv`] straight to a file.
pub fn write_csv(path: &Path, records: &[RunRecord], zero_seconds: bool) -> SrResult<()> {
    let f = File::create(path)?;
    emit_csv(BufWriter::new(f), records, zero_seconds)
}

// ─── summaries ───────────────────────────────────────────────────────────────

/// Median of the successful errors of one solver's records (`None` when
/// every run failed).
pub fn median_error(records: &[RunRecord], solver: &str) -> Option<f64> {
    let mut errs: Vec<f64> = records
        .iter()
        .filter(|r| r.solver == solver)
        .filter_map(|r| r.error)
        .collect();
    if errs.is_empty() {
        return None;
    }
    errs.sort_by(|a, b| a.partial_cmp(b).expect("errors are finite"));
    Some(errs[errs.len() / 2])
}

/// Human-readable per-solver summary of an experiment's records.
pub fn summarize(records: &[RunRecord]) -> String {
    let mut out = String::new();
    for solver in ["mom", "em"] {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.solver == solver).collect();
        if runs.is_empty() {
            continue;
        }
        let failures = runs.iter().filter(|r| r.failure.is_some()).count();
        let mean_seconds =
            runs.iter().map(|r| r.seconds).sum::<f64>() / runs.len() as f64;
        let _ = write!(out, "{solver}: {} runs", runs.len());
        if let Some(med) = median_error(records, solver) {
            let _ = write!(out, ", median error {med:.4}");
        }
        let _ = write!(out, ", mean solve {mean_seconds:.2}s");
        if failures > 0 {
            let _ = write!(out, ", {failures} FAILED");
        }
        out.push('\n');
    }
    out
}

/// The shift distribution trial `trial` of an experiment with base seed
/// `seed` draws — exposed so standalone dataset synthesis uses the same
/// generic product distributions as experiment sweeps.
pub fn trial_distribution(seed: u64, trial: u64, l: usize) -> ShiftDistribution {
    trial_inputs(seed, trial, l).0
}

/// Convenience used by both the CLI and tests: synthesize one observation
/// set the way `run_experiment` does for trial `trial`.
pub fn synthesize_trial(
    cfg: &ExperimentConfig,
    trial: usize,
) -> SrResult<(Image, ShiftDistribution, ObservationSet)> {
    let truth = cfg.image.load(cfg.params.l_high)?;
    let (rho, obs_seed, _, _) = trial_inputs(cfg.seed, trial as u64, cfg.params.l_high);
    let obs = sample_observations(&truth, &rho, &cfg.params, obs_seed)?;
    Ok((truth, rho, obs))
}

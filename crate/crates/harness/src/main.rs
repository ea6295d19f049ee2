//! `srmra` — command-line interface to the SR-MRA toolkit.
//!
//! Subcommands: `simulate` (synthesize an observation set), `recover-mom`
//! and `recover-em` (run one solver end to end), `evaluate` (score an
//! estimate against ground truth), `benchmark` (run a full experiment
//! config), and `phantom` (write a built-in test image).
//!
//! Exit codes: 0 on success, 2 for configuration problems (bad flags,
//! malformed inputs, invalid configs), 3 for runtime failures (solver or
//! denoiser errors, output I/O).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use srmra_core::em_solver::{projected_em, EmSolverConfig};
use srmra_core::estimate::Estimate;
use srmra_core::io::{
    load_moments, load_observations, save_estimate, save_moments, save_observations,
    write_matrix, write_pgm,
};
use srmra_core::metrics::{shift_aligned_error, snr};
use srmra_core::model::sample_observations;
use srmra_core::mom_solver::{projected_mom, MomSolverConfig};
use srmra_core::moments::{empirical_moments, MomentPair};
use srmra_core::phantom::phantom_by_name;
use srmra_core::{Image, ModelParams, ShiftDistribution, SrResult};

use srmra_harness::{
    load_image_file, run_experiment, summarize, trial_distribution, DenoiserSpec,
    ExperimentConfig,
};

// ─── error plumbing ──────────────────────────────────────────────────────────

enum CliError {
    /// Bad flags, unreadable or malformed inputs, invalid configurations.
    Config(String),
    /// Failures while doing the actual work.
    Runtime(String),
}

impl CliError {
    fn config(e: impl ToString) -> Self {
        CliError::Config(e.to_string())
    }

    fn runtime(e: impl ToString) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

// ─── CLI definition ──────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "srmra",
    version,
    about = "Simulate and solve 2-D super-resolution multi-reference alignment problems"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize an observation set from a ground-truth image
    Simulate(SimulateArgs),
    /// Recover the image by projected moment matching
    RecoverMom(RecoverMomArgs),
    /// Recover the image by projected expectation-maximization
    RecoverEm(RecoverEmArgs),
    /// Score a recovered image against the ground truth
    Evaluate(EvaluateArgs),
    /// Run a full experiment config (sweeps, repeats, CSV output)
    Benchmark(BenchmarkArgs),
    /// Write a built-in phantom image
    Phantom(PhantomArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BuiltinDenoiser {
    Identity,
    GaussianBlur,
    DctThreshold,
}

#[derive(Args)]
struct DenoiserArgs {
    /// Built-in denoiser applied every F solver iterations
    #[arg(long, value_enum, default_value = "dct-threshold", conflicts_with = "denoiser_cmd")]
    denoiser: BuiltinDenoiser,
    /// External denoiser command line (program plus arguments)
    #[arg(long, num_args = 1.., value_name = "CMD")]
    denoiser_cmd: Option<Vec<String>>,
    /// Strength multiplier passed to the external denoiser
    #[arg(long, default_value_t = 1.0)]
    denoiser_scale: f64,
    /// External denoiser timeout in seconds
    #[arg(long, default_value_t = 60.0)]
    denoiser_timeout: f64,
}

impl DenoiserArgs {
    fn spec(&self) -> DenoiserSpec {
        match &self.denoiser_cmd {
            Some(argv) => DenoiserSpec::External {
                argv: argv.clone(),
                sigma_scale: self.denoiser_scale,
                timeout_secs: self.denoiser_timeout,
            },
            None => match self.denoiser {
                BuiltinDenoiser::Identity => DenoiserSpec::Identity,
                BuiltinDenoiser::GaussianBlur => DenoiserSpec::GaussianBlur,
                BuiltinDenoiser::DctThreshold => DenoiserSpec::DctThreshold,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RhoChoice {
    /// Uniform over all shifts
    Uniform,
    /// A generic product distribution drawn from the seed
    Random,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in phantom used as ground truth
    #[arg(long, conflicts_with = "image_file")]
    phantom: Option<String>,
    /// Image file used as ground truth (.pgm or exact matrix)
    #[arg(long)]
    image_file: Option<PathBuf>,
    /// High-resolution side length L
    #[arg(long, default_value_t = 32)]
    l_high: usize,
    /// Decimation factor K (L must be divisible by K)
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Noise standard deviation
    #[arg(long, default_value_t = 0.125)]
    sigma: f64,
    /// Number of observations
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Seed for the shift distribution, shifts, and noise
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shift distribution
    #[arg(long, value_enum, default_value = "random")]
    rho: RhoChoice,
    /// Also write the empirical moments of the synthesized observations
    #[arg(long)]
    with_moments: bool,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MomConfigArgs {
    /// JSON file with the full solver configuration
    #[arg(long, value_name = "FILE")]
    solver_config: Option<PathBuf>,
    /// Quasi-Newton steps between denoiser applications
    #[arg(long)]
    f: Option<usize>,
    /// Maximum outer (denoise) iterations
    #[arg(long)]
    max_outer: Option<usize>,
    /// Seed for random initialization
    #[arg(long)]
    seed: Option<u64>,
    /// Independent random starts (best final objective wins)
    #[arg(long)]
    multi_start: Option<usize>,
    /// Relative objective-change stopping tolerance
    #[arg(long)]
    stop_tol: Option<f64>,
    /// Start this many applications into the denoiser schedule
    #[arg(long)]
    schedule_offset: Option<u32>,
}

impl MomConfigArgs {
    fn build(&self) -> Result<MomSolverConfig, CliError> {
        let mut cfg = match &self.solver_config {
            Some(path) => read_json_config(path)?,
            None => MomSolverConfig::default(),
        };
        if let Some(v) = self.f {
            cfg.f = v;
        }
        if let Some(v) = self.max_outer {
            cfg.max_outer = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.multi_start {
            cfg.multi_start = v;
        }
        if let Some(v) = self.stop_tol {
            cfg.stop_tol = v;
        }
        if let Some(v) = self.schedule_offset {
            cfg.schedule_offset = v;
        }
        cfg.validate().map_err(CliError::config)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EmConfigArgs {
    /// JSON file with the full solver configuration
    #[arg(long, value_name = "FILE")]
    solver_config: Option<PathBuf>,
    /// EM iterations between denoiser applications
    #[arg(long)]
    f: Option<usize>,
    /// Total EM iteration budget
    #[arg(long)]
    max_outer: Option<usize>,
    /// Seed for random initialization
    #[arg(long)]
    seed: Option<u64>,
    /// Relative log-likelihood stopping tolerance
    #[arg(long)]
    stop_tol: Option<f64>,
    /// Floor for the M-step normal-equation diagonal
    #[arg(long)]
    diag_floor: Option<f64>,
    /// Start this many applications into the denoiser schedule
    #[arg(long)]
    schedule_offset: Option<u32>,
}

impl EmConfigArgs {
    fn build(&self) -> Result<EmSolverConfig, CliError> {
        let mut cfg = match &self.solver_config {
            Some(path) => read_json_config(path)?,
            None => EmSolverConfig::default(),
        };
        if let Some(v) = self.f {
            cfg.f = v;
        }
        if let Some(v) = self.max_outer {
            cfg.max_outer = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.stop_tol {
            cfg.stop_tol = v;
        }
        if let Some(v) = self.diag_floor {
            cfg.diag_floor = v;
        }
        if let Some(v) = self.schedule_offset {
            cfg.schedule_offset = v;
        }
        cfg.validate().map_err(CliError::config)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RecoverMomArgs {
    /// Observation directory written by `simulate`
    #[arg(long, required_unless_present = "moments")]
    obs: Option<PathBuf>,
    /// Precomputed moments directory (skips the observation pass)
    #[arg(long, conflicts_with = "obs", requires = "l_high", requires = "sigma")]
    moments: Option<PathBuf>,
    /// High-resolution side length (required with --moments)
    #[arg(long)]
    l_high: Option<usize>,
    /// Noise level for moment matching (defaults to the simulated value)
    #[arg(long)]
    sigma: Option<f64>,
    /// Ground-truth image for error reporting
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    config: MomConfigArgs,
    #[command(flatten)]
    denoiser: DenoiserArgs,
    /// Directory receiving the estimate
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverEmArgs {
    /// Observation directory written by `simulate`
    #[arg(long)]
    obs: PathBuf,
    /// Noise level for the likelihood (defaults to the simulated value)
    #[arg(long)]
    sigma: Option<f64>,
    /// Ground-truth image for error reporting
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    config: EmConfigArgs,
    #[command(flatten)]
    denoiser: DenoiserArgs,
    /// Directory receiving the estimate
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Estimate: an x_hat file or a directory written by the recover commands
    #[arg(long)]
    estimate: PathBuf,
    /// Ground-truth image
    #[arg(long)]
    truth: PathBuf,
    /// Report the signal-to-noise ratio at this noise level
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Experiment configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the configured trial count
    #[arg(long)]
    trials: Option<usize>,
    /// Force deterministic mode (serial trials, zeroed CSV seconds)
    #[arg(long)]
    deterministic: bool,
    /// Save every run's full estimate under the output directory
    #[arg(long)]
    save_estimates: bool,
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom name: blobs, checker, or shepp_like
    #[arg(long)]
    name: String,
    /// Side length
    #[arg(long, default_value_t = 32)]
    l: usize,
    /// Output file; .pgm writes 8-bit PGM, anything else the exact matrix
    #[arg(long)]
    out: PathBuf,
}

// ─── helpers ─────────────────────────────────────────────────────────────────

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_truth(path: &Path) -> Result<Image, CliError> {
    load_image_file(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn final_field(est: &Estimate, pick: impl Fn(&srmra_core::estimate::TraceRecord) -> Option<f64>) -> Option<f64> {
    est.trace.iter().rev().find_map(pick)
}

fn print_recovery_summary(
    solver: &str,
    est: &Estimate,
    truth: Option<&Image>,
    seconds: f64,
    out: &Path,
) -> SrResult<()> {
    let error = match truth {
        Some(t) => Some(shift_aligned_error(&est.x_hat, t)?.error),
        None => None,
    };
    let mut summary = json!({
        "solver": solver,
        "converged": est.converged,
        "seconds": seconds,
        "out": out.display().to_string(),
    });
    if let Some(e) = error {
        summary["error"] = json!(e);
    }
    if solver == "mom" {
        if let Some(obj) = final_field(est, |r| r.objective) {
            summary["objective"] = json!(obj);
        }
        summary["line_search_failures"] = json!(est.line_search_failures);
    } else if let Some(ll) = final_field(est, |r| r.loglik) {
        summary["loglik"] = json!(ll);
    }
    println!("{summary}");
    Ok(())
}

// ─── subcommand implementations ──────────────────────────────────────────────

fn cmd_simulate(a: SimulateArgs) -> CliResult {
    let params =
        ModelParams::new(a.l_high, a.k, a.sigma, a.n).map_err(CliError::config)?;
    let truth = match (&a.phantom, &a.image_file) {
        (Some(name), None) => phantom_by_name(name, a.l_high).map_err(CliError::config)?,
        (None, Some(path)) => {
            let img = load_truth(path)?;
            if img.side() != a.l_high {
                return Err(CliError::Config(format!(
                    "image side {} does not match --l-high {}",
                    img.side(),
                    a.l_high
                )));
            }
            img
        }
        (None, None) => {
            return Err(CliError::Config(
                "one of --phantom or --image-file is required".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap enforces the conflict"),
    };
    let rho = match a.rho {
        RhoChoice::Uniform => ShiftDistribution::uniform(a.l_high),
        RhoChoice::Random => trial_distribution(a.seed, 0, a.l_high),
    };

    let obs = sample_observations(&truth, &rho, &params, a.seed).map_err(CliError::runtime)?;
    save_observations(&a.out, &obs).map_err(CliError::runtime)?;
    write_matrix(&a.out.join("truth.srmr"), truth.pixels().view()).map_err(CliError::runtime)?;
    write_pgm(&a.out.join("truth.pgm"), &truth).map_err(CliError::runtime)?;
    let l = a.l_high;
    let rho1 = rho.rho1().to_shape((1, l)).expect("row vector").to_owned();
    let rho2 = rho.rho2().to_shape((1, l)).expect("row vector").to_owned();
    write_matrix(&a.out.join("rho1.srmr"), rho1.view()).map_err(CliError::runtime)?;
    write_matrix(&a.out.join("rho2.srmr"), rho2.view()).map_err(CliError::runtime)?;
    if a.with_moments {
        let pair = empirical_moments(&obs).map_err(CliError::runtime)?;
        save_moments(&a.out.join("moments"), &pair, obs.n(), 512)
            .map_err(CliError::runtime)?;
    }
    println!(
        "{}",
        json!({
            "l_high": a.l_high,
            "l_low": params.l_low(),
            "k": a.k,
            "sigma": a.sigma,
            "n": a.n,
            "seed": a.seed,
            "out": a.out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_recover_mom(a: RecoverMomArgs) -> CliResult {
    let cfg = a.config.build()?;
    let denoiser = a.denoiser.spec().handle().map_err(CliError::config)?;
    let truth = a.truth.as_deref().map(load_truth).transpose()?;

    let (target, l_high, sigma): (MomentPair, usize, f64) = match (&a.obs, &a.moments) {
        (Some(dir), None) => {
            let obs = load_observations(dir)
                .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
            let sigma = a.sigma.unwrap_or(obs.params().sigma);
            let target = empirical_moments(&obs).map_err(CliError::runtime)?;
            (target, obs.params().l_high, sigma)
        }
        (None, Some(dir)) => {
            let target = load_moments(dir)
                .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
            let l_high = a.l_high.expect("clap requires --l-high with --moments");
            let sigma = a.sigma.expect("clap requires --sigma with --moments");
            (target, l_high, sigma)
        }
        _ => unreachable!("clap enforces exactly one input source"),
    };

    let started = Instant::now();
    let est = projected_mom(l_high, &target, sigma, &denoiser, &cfg, truth.as_ref())
        .map_err(CliError::runtime)?;
    let seconds = started.elapsed().as_secs_f64();
    save_estimate(&a.out, &est).map_err(CliError::runtime)?;
    print_recovery_summary("mom", &est, truth.as_ref(), seconds, &a.out)
        .map_err(CliError::runtime)
}

fn cmd_recover_em(a: RecoverEmArgs) -> CliResult {
    let cfg = a.config.build()?;
    let denoiser = a.denoiser.spec().handle().map_err(CliError::config)?;
    let truth = a.truth.as_deref().map(load_truth).transpose()?;
    let obs = load_observations(&a.obs)
        .map_err(|e| CliError::Config(format!("{}: {e}", a.obs.display())))?;
    let sigma = a.sigma.unwrap_or(obs.params().sigma);

    let started = Instant::now();
    let est = projected_em(&obs, sigma, &denoiser, &cfg, truth.as_ref())
        .map_err(CliError::runtime)?;
    let seconds = started.elapsed().as_secs_f64();
    save_estimate(&a.out, &est).map_err(CliError::runtime)?;
    print_recovery_summary("em", &est, truth.as_ref(), seconds, &a.out)
        .map_err(CliError::runtime)
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    let est_path = if a.estimate.is_dir() {
        a.estimate.join("x_hat.srmr")
    } else {
        a.estimate.clone()
    };
    let x_hat = load_truth(&est_path)?;
    let truth = load_truth(&a.truth)?;
    let report = shift_aligned_error(&x_hat, &truth).map_err(CliError::runtime)?;
    let mut summary = json!({
        "error": report.error,
        "best_shift": [report.best_shift.0, report.best_shift.1],
    });
    if let Some(sigma) = a.sigma {
        summary["snr"] = json!(snr(&truth, sigma).map_err(CliError::config)?);
    }
    println!("{summary}");
    Ok(())
}

fn cmd_benchmark(a: BenchmarkArgs) -> CliResult {
    let mut cfg: ExperimentConfig = read_json_config(&a.config)?;
    if let Some(dir) = a.out_dir {
        cfg.output_dir = dir;
    }
    if let Some(trials) = a.trials {
        cfg.trials = trials;
    }
    if a.deterministic {
        cfg.deterministic = true;
    }
    if a.save_estimates {
        cfg.save_estimates = true;
    }
    cfg.validate().map_err(CliError::config)?;

    let records = run_experiment(&cfg).map_err(CliError::runtime)?;
    print!("{}", summarize(&records));
    println!("results: {}", cfg.output_dir.join("results.csv").display());
    let failures = records.iter().filter(|r| r.failure.is_some()).count();
    if failures > 0 {
        return Err(CliError::Runtime(format!(
            "{failures} of {} runs failed (details in records.json)",
            records.len()
        )));
    }
    Ok(())
}

fn cmd_phantom(a: PhantomArgs) -> CliResult {
    let img = phantom_by_name(&a.name, a.l).map_err(CliError::config)?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(CliError::runtime)?;
        }
    }
    let is_pgm = a
        .out
        .extension()
        .map(|e| e.eq_ignore_ascii_case("pgm"))
        .unwrap_or(false);
    if is_pgm {
        write_pgm(&a.out, &img).map_err(CliError::runtime)?;
    } else {
        write_matrix(&a.out, img.pixels().view()).map_err(CliError::runtime)?;
    }
    println!(
        "{}",
        json!({"name": a.name, "l": a.l, "out": a.out.display().to_string()})
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::RecoverMom(a) => cmd_recover_mom(a),
        Cmd::RecoverEm(a) => cmd_recover_em(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Benchmark(a) => cmd_benchmark(a),
        Cmd::Phantom(a) => cmd_phantom(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("runtime error: {msg}");
            ExitCode::from(3)
        }
    }
}

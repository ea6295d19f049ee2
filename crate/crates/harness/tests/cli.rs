//! End-to-end tests of the `srmra` binary: every subcommand, the JSON
//! summary lines, and the documented exit codes (0 success, 2 config
//! error, 3 runtime error).

use std::path::Path;
use std::process::{Command, Output};

use srmra_harness::{DenoiserSpec, ExperimentConfig, ImageSource, SolverChoice};
use srmra_core::em_solver::EmSolverConfig;
use srmra_core::mom_solver::MomSolverConfig;
use srmra_core::ModelParams;

fn srmra(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srmra"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("bad summary '{line}': {e}"))
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn phantom_writes_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let out = srmra(
        &["phantom", "--name", "blobs", "--l", "16", "--out", "p.pgm"],
        dir.path(),
    );
    assert_exit(&out, 0);
    let bytes = std::fs::read(dir.path().join("p.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5"), "PGM magic expected");

    let out = srmra(
        &["phantom", "--name", "checker", "--l", "16", "--out", "p.srmr"],
        dir.path(),
    );
    assert_exit(&out, 0);
    let m = srmra_core::io::read_matrix(&dir.path().join("p.srmr")).unwrap();
    assert_eq!(m.dim(), (16, 16));

    let out = srmra(
        &["phantom", "--name", "nope", "--l", "16", "--out", "x.pgm"],
        dir.path(),
    );
    assert_exit(&out, 2);
}

#[test]
fn simulate_recover_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = srmra(
        &[
            "simulate",
            "--phantom",
            "blobs",
            "--l-high",
            "8",
            "--k",
            "2",
            "--sigma",
            "0.25",
            "--n",
            "60",
            "--seed",
            "4",
            "--out",
            "data",
            "--with-moments",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let summary = stdout_json(&out);
    assert_eq!(summary["l_low"], 4);
    assert!(dir.path().join("data/observations.json").exists());
    assert!(dir.path().join("data/truth.srmr").exists());
    assert!(dir.path().join("data/moments/m2.srmr").exists());

    let out = srmra(
        &[
            "recover-em",
            "--obs",
            "data",
            "--truth",
            "data/truth.srmr",
            "--f",
            "2",
            "--max-outer",
            "4",
            "--denoiser",
            "gaussian-blur",
            "--out",
            "est",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let summary = stdout_json(&out);
    assert_eq!(summary["solver"], "em");
    assert!(summary["error"].is_number());
    assert!(summary["loglik"].is_number());
    assert!(dir.path().join("est/x_hat.srmr").exists());
    assert!(dir.path().join("est/rho_joint.srmr").exists());
    assert!(dir.path().join("est/trace.json").exists());

    let out = srmra(
        &[
            "evaluate",
            "--estimate",
            "est",
            "--truth",
            "data/truth.srmr",
            "--sigma",
            "0.25",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let summary = stdout_json(&out);
    let cli_error = summary["error"].as_f64().unwrap();
    assert!(cli_error.is_finite());
    assert!(summary["snr"].is_number());

    // Moment-matching from the precomputed moments directory.
    let out = srmra(
        &[
            "recover-mom",
            "--moments",
            "data/moments",
            "--l-high",
            "8",
            "--sigma",
            "0.25",
            "--f",
            "2",
            "--max-outer",
            "3",
            "--denoiser",
            "identity",
            "--out",
            "est_mom",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let summary = stdout_json(&out);
    assert_eq!(summary["solver"], "mom");
    assert!(summary["objective"].is_number());
    assert!(dir.path().join("est_mom/x_hat.pgm").exists());
}

#[test]
fn recover_mom_from_observations_reports_error_against_truth() {
    let dir = tempfile::tempdir().unwrap();
    assert_exit(
        &srmra(
            &[
                "simulate", "--phantom", "blobs", "--l-high", "8", "--n", "60",
                "--sigma", "0.25", "--seed", "1", "--out", "data",
            ],
            dir.path(),
        ),
        0,
    );
    let out = srmra(
        &[
            "recover-mom",
            "--obs",
            "data",
            "--truth",
            "data/truth.srmr",
            "--f",
            "2",
            "--max-outer",
            "4",
            "--denoiser",
            "gaussian-blur",
            "--out",
            "est",
        ],
        dir.path(),
    );
    assert_exit(&out, 0);
    let summary = stdout_json(&out);
    assert!(summary["error"].is_number());
    assert!(summary["line_search_failures"].is_number());
}

#[test]
fn benchmark_runs_a_config_and_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        image: ImageSource::Phantom {
            name: "blobs".into(),
        },
        params: ModelParams::new(8, 2, 0.25, 50).unwrap(),
        solver: SolverChoice::Both,
        mom: MomSolverConfig {
            f: 2,
            max_outer: 2,
            ..MomSolverConfig::default()
        },
        em: EmSolverConfig {
            f: 2,
            max_outer: 2,
            ..EmSolverConfig::default()
        },
        denoiser: DenoiserSpec::GaussianBlur,
        trials: 2,
        seed: 7,
        output_dir: dir.path().join("run_a"),
        deterministic: true,
        save_estimates: false,
    };
    std::fs::write(
        dir.path().join("exp.json"),
        serde_json::to_string_pretty(&cfg).unwrap(),
    )
    .unwrap();

    let out = srmra(&["benchmark", "--config", "exp.json"], dir.path());
    assert_exit(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("mom:"), "summary lists mom runs: {text}");
    assert!(text.contains("em:"), "summary lists em runs: {text}");
    let csv = std::fs::read_to_string(dir.path().join("run_a/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "header + 2 trials x 2 solvers");
    assert!(csv.starts_with("trial,solver,L_high,L_low,N,sigma,F,error,seconds"));

    // Same config, different output directory: byte-identical CSV.
    let out = srmra(
        &["benchmark", "--config", "exp.json", "--out-dir", "run_b"],
        dir.path(),
    );
    assert_exit(&out, 0);
    let csv_b = std::fs::read_to_string(dir.path().join("run_b/results.csv")).unwrap();
    assert_eq!(csv, csv_b);
}

#[test]
fn config_problems_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown flag: clap usage error.
    assert_exit(&srmra(&["simulate", "--no-such-flag"], dir.path()), 2);
    // Conflicting image sources.
    assert_exit(
        &srmra(
            &[
                "simulate", "--phantom", "blobs", "--image-file", "x.pgm",
                "--l-high", "8", "--out", "d",
            ],
            dir.path(),
        ),
        2,
    );
    // Missing observations directory.
    assert_exit(
        &srmra(
            &["recover-em", "--obs", "missing", "--out", "est"],
            dir.path(),
        ),
        2,
    );
    // Invalid solver configuration value.
    std::fs::write(dir.path().join("bad.json"), "{\"not\": \"a config\"}").unwrap();
    assert_exit(
        &srmra(
            &["benchmark", "--config", "bad.json"],
            dir.path(),
        ),
        2,
    );
    // Indivisible geometry.
    assert_exit(
        &srmra(
            &[
                "simulate", "--phantom", "blobs", "--l-high", "9", "--k", "2",
                "--out", "d",
            ],
            dir.path(),
        ),
        2,
    );
}

#[test]
fn runtime_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_exit(
        &srmra(
            &[
                "simulate", "--phantom", "blobs", "--l-high", "8", "--n", "30",
                "--sigma", "0.25", "--out", "data",
            ],
            dir.path(),
        ),
        0,
    );
    // The external denoiser immediately exits nonzero: a runtime failure.
    let out = srmra(
        &[
            "recover-em",
            "--obs",
            "data",
            "--f",
            "1",
            "--max-outer",
            "1",
            "--denoiser-cmd",
            "false",
            "--out",
            "est",
        ],
        dir.path(),
    );
    assert_exit(&out, 3);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("runtime error"),
        "stderr should explain: {stderr}"
    );
}

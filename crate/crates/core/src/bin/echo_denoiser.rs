//! Test double for the external-denoiser wire protocol: reads one request
//! from stdin (`SRMRD1\n`, little-endian f64 strength, `SRMR1` image blob)
//! and echoes the image back to stdout unchanged.

use std::io::{self, Read, Write};
use std::process::ExitCode;

use srmra_core::io::{read_matrix_from, write_matrix_to};

fn run() -> Result<(), String> {
    let mut stdin = io::stdin().lock();
    let mut magic = [0u8; 7];
    stdin
        .read_exact(&mut magic)
        .map_err(|e| format!("reading magic: {e}"))?;
    if &magic != b"SRMRD1\n" {
        return Err("bad request magic".into());
    }
    let mut sigma_bytes = [0u8; 8];
    stdin
        .read_exact(&mut sigma_bytes)
        .map_err(|e| format!("reading strength: {e}"))?;
    let sigma = f64::from_le_bytes(sigma_bytes);
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(format!("invalid strength {sigma}"));
    }
    let matrix = read_matrix_from(&mut stdin).map_err(|e| format!("reading image: {e}"))?;
    let mut stdout = io::stdout().lock();
    write_matrix_to(&mut stdout, matrix.view()).map_err(|e| format!("writing reply: {e}"))?;
    stdout.flush().map_err(|e| format!("flushing reply: {e}"))?;
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("echo denoiser: {msg}");
            ExitCode::FAILURE
        }
    }
}

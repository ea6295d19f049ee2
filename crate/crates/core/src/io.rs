//! On-disk formats.
//!
//! * Exact matrices: magic `"SRMR1\n"`, two little-endian u32 (rows, cols),
//!   then rows·cols little-endian IEEE-754 f64 values row-major. Bit-exact
//!   round trips; used for frames, moments, estimates, and the external
//!   denoiser wire protocol.
//! * Visualization: binary PGM (`P5`, 8-bit), pixel p quantized as
//!   round(255·p) after clamping to [0, 1]. A loader for user-supplied 8-bit
//!   PGM images is included; quantization is export-only (noise is added and
//!   processed in full precision).
//! * Directory layouts for observation sets, moment pairs, and estimates,
//!   each with a JSON sidecar carrying the parameters and seed needed to
//!   reproduce them.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{SrError, SrResult};
use crate::estimate::{Estimate, TraceRecord};
use crate::image::Image;
use crate::model::{ModelParams, ObservationSet};
use crate::moments::MomentPair;

/// Magic bytes of the exact matrix format.
pub const MATRIX_MAGIC: &[u8; 6] = b"SRMR1\n";

/// Upper bound on rows·cols accepted by the reader, guarding against
/// corrupt headers demanding absurd allocations (2^28 f64 = 2 GiB).
const MAX_MATRIX_ENTRIES: u64 = 1 << 28;

// ─── exact matrix format ────────────────────────────────────────────────────

/// Writes one matrix in the exact format to a byte sink.
pub fn write_matrix_to<W: Write>(w: &mut W, m: ArrayView2<'_, f64>) -> SrResult<()> {
    let (rows, cols) = m.dim();
    if rows > u32::MAX as usize || cols > u32::MAX as usize {
        return Err(SrError::Format(format!("matrix {rows}x{cols} too large for header")));
    }
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    // Row-major regardless of the source layout.
    for row in m.rows() {
        for &v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads one matrix in the exact format from a byte source, validating the
/// magic, the size guard, and finiteness.
pub fn read_matrix_from<R: Read>(r: &mut R) -> SrResult<Array2<f64>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(SrError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MATRIX_MAGIC
        )));
    }
    let mut dims = [0u8; 8];
    r.read_exact(&mut dims)?;
    let rows = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
    let entries = rows as u64 * cols as u64;
    if entries == 0 || entries > MAX_MATRIX_ENTRIES {
        return Err(SrError::Format(format!("refusing matrix of {rows}x{cols} entries")));
    }
    let mut payload = vec![0u8; entries as usize * 8];
    r.read_exact(&mut payload)?;
    let mut values = Vec::with_capacity(entries as usize);
    for chunk in payload.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(SrError::NonFinite { what: "matrix payload" });
        }
        values.push(v);
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| SrError::Format(format!("shape error: {e}")))
}

pub fn write_matrix(path: &Path, m: ArrayView2<'_, f64>) -> SrResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix_to(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> SrResult<Array2<f64>> {
    read_matrix_from(&mut BufReader::new(File::open(path)?))
}

/// Encodes a matrix as an in-memory exact-format blob (wire protocol use).
pub fn matrix_blob(m: ArrayView2<'_, f64>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(14 + m.len() * 8);
    write_matrix_to(&mut buf, m).expect("writing to Vec cannot fail");
    buf
}

// ─── PGM ────────────────────────────────────────────────────────────────────

/// Exports an image as 8-bit binary PGM. Pixels are clamped to [0, 1] and
/// quantized by round(255·p); this is the only place precision is dropped.
pub fn write_pgm(path: &Path, img: &Image) -> SrResult<()> {
    let l = img.side();
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{l} {l}\n255\n")?;
    for &v in img.as_slice() {
        let q = (255.0 * v.clamp(0.0, 1.0)).round() as u8;
        w.write_all(&[q])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a user-supplied 8-bit binary PGM as a square image with raw
/// intensities in [0, 1] (divide by maxval); apply the normalization rule
/// downstream if a full [0, 1] span is required.
pub fn read_pgm(path: &Path) -> SrResult<Image> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(SrError::Format("not a binary PGM (P5)".into()));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and '#' comment lines between header fields.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(SrError::Format("malformed PGM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| SrError::Format(format!("PGM header: {e}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(SrError::Format(format!("only 8-bit PGM supported, maxval {maxval}")));
    }
    if width != height {
        return Err(SrError::Format(format!("image must be square, got {width}x{height}")));
    }
    // Single whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(SrError::Format("malformed PGM raster separator".into()));
    }
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(SrError::Format("truncated PGM raster".into()));
    }
    let values: Vec<f64> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let data = Array2::from_shape_vec((height, width), values).expect("length checked");
    Image::new(data)
}

// ─── observation sets ───────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ObservationSidecar {
    format: String,
    params: ModelParams,
    seed: Option<u64>,
    frame_files: Vec<String>,
    true_shifts: Option<Vec<(usize, usize)>>,
}

/// Writes an observation set as one exact-format file per frame plus a JSON
/// sidecar carrying the parameters, seed, and (when present) true shifts.
pub fn save_observations(dir: &Path, obs: &ObservationSet) -> SrResult<()> {
    fs::create_dir_all(dir)?;
    let mut frame_files = Vec::with_capacity(obs.n());
    for (i, frame) in obs.frames().iter().enumerate() {
        let name = format!("frame_{i:06}.srmr");
        write_matrix(&dir.join(&name), frame.view())?;
        frame_files.push(name);
    }
    let sidecar = ObservationSidecar {
        format: "srmra-observations-v1".into(),
        params: *obs.params(),
        seed: obs.seed(),
        frame_files,
        true_shifts: obs.diagnostic_true_shifts().map(|s| s.to_vec()),
    };
    let f = File::create(dir.join("observations.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &sidecar)?;
    Ok(())
}

/// Loads an observation set saved by [`save_observations`].
pub fn load_observations(dir: &Path) -> SrResult<ObservationSet> {
    let f = File::open(dir.join("observations.json"))?;
    let sidecar: ObservationSidecar = serde_json::from_reader(BufReader::new(f))?;
    if sidecar.format != "srmra-observations-v1" {
        return Err(SrError::Format(format!("unknown sidecar format '{}'", sidecar.format)));
    }
    sidecar.params.validate()?;
    if sidecar.frame_files.len() != sidecar.params.n {
        return Err(SrError::Format(format!(
            "sidecar lists {} frames but params.n = {}",
            sidecar.frame_files.len(),
            sidecar.params.n
        )));
    }
    let mut frames = Vec::with_capacity(sidecar.frame_files.len());
    for name in &sidecar.frame_files {
        frames.push(read_matrix(&dir.join(name))?);
    }
    let mut obs = ObservationSet::new(sidecar.params, frames)?;
    obs.attach_provenance(sidecar.seed, sidecar.true_shifts);
    Ok(obs)
}

// ─── moment pairs ───────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct MomentSidecar {
    format: String,
    l_low: usize,
    n: usize,
    sigma_used: f64,
    chunk_size: usize,
}

/// Writes a moment pair: m1 as an L_low×L_low matrix, m2 as L_low²×L_low²,
/// plus the JSON sidecar {l_low, n, sigma_used, chunk_size}.
pub fn save_moments(dir: &Path, pair: &MomentPair, n: usize, chunk_size: usize) -> SrResult<()> {
    fs::create_dir_all(dir)?;
    let l_low = pair.l_low();
    let m1 = pair
        .m1
        .to_shape((l_low, l_low))
        .map_err(|e| SrError::Format(format!("m1 reshape: {e}")))?
        .to_owned();
    write_matrix(&dir.join("m1.srmr"), m1.view())?;
    write_matrix(&dir.join("m2.srmr"), pair.m2.view())?;
    let sidecar = MomentSidecar {
        format: "srmra-moments-v1".into(),
        l_low,
        n,
        sigma_used: pair.sigma_used,
        chunk_size,
    };
    let f = File::create(dir.join("moments.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &sidecar)?;
    Ok(())
}

/// Loads a moment pair saved by [`save_moments`].
pub fn load_moments(dir: &Path) -> SrResult<MomentPair> {
    let f = File::open(dir.join("moments.json"))?;
    let sidecar: MomentSidecar = serde_json::from_reader(BufReader::new(f))?;
    if sidecar.format != "srmra-moments-v1" {
        return Err(SrError::Format(format!("unknown sidecar format '{}'", sidecar.format)));
    }
    let m1 = read_matrix(&dir.join("m1.srmr"))?;
    let m2 = read_matrix(&dir.join("m2.srmr"))?;
    let d = sidecar.l_low * sidecar.l_low;
    if m1.dim() != (sidecar.l_low, sidecar.l_low) || m2.dim() != (d, d) {
        return Err(SrError::Format("moment blob shapes disagree with sidecar".into()));
    }
    let m1 = m1.into_shape_with_order(d).expect("d = l_low^2");
    MomentPair::new(m1, m2, sidecar.sigma_used)
}

// ─── estimates ──────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct EstimateSidecar {
    format: String,
    converged: bool,
    line_search_failures: usize,
    trace: Vec<TraceRecord>,
}

/// Writes an estimate: x_hat in exact and PGM form, the shift distribution
/// (marginals, plus the joint when the solver produced one), and the trace.
pub fn save_estimate(dir: &Path, est: &Estimate) -> SrResult<()> {
    fs::create_dir_all(dir)?;
    write_matrix(&dir.join("x_hat.srmr"), est.x_hat.pixels().view())?;
    write_pgm(&dir.join("x_hat.pgm"), &est.x_hat)?;
    let l = est.rho_hat.len();
    let rho1 = est.rho_hat.rho1().to_shape((1, l)).expect("row vector").to_owned();
    let rho2 = est.rho_hat.rho2().to_shape((1, l)).expect("row vector").to_owned();
    write_matrix(&dir.join("rho1.srmr"), rho1.view())?;
    write_matrix(&dir.join("rho2.srmr"), rho2.view())?;
    if est.rho_hat.has_joint() {
        write_matrix(&dir.join("rho_joint.srmr"), est.rho_hat.joint_matrix().view())?;
    }
    let sidecar = EstimateSidecar {
        format: "srmra-estimate-v1".into(),
        converged: est.converged,
        line_search_failures: est.line_search_failures,
        trace: est.trace.clone(),
    };
    let f = File::create(dir.join("trace.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &sidecar)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_observations, ShiftDistribution};
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matrix_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Array2::from_shape_fn((5, 7), |_| {
            // Mix magnitudes, including subnormals.
            let v: f64 = rng.random::<f64>() - 0.5;
            v * 10f64.powi(rng.random_range(-300..300))
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.srmr");
        write_matrix(&path, m.view()).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.dim(), (5, 7));
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn matrix_reader_rejects_corruption() {
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        let blob = matrix_blob(m.view());

        let mut bad_magic = blob.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_matrix_from(&mut &bad_magic[..]),
            Err(SrError::Format(_))
        ));

        let truncated = &blob[..blob.len() - 4];
        assert!(read_matrix_from(&mut &truncated[..]).is_err());

        let mut huge = blob.clone();
        huge[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            read_matrix_from(&mut &huge[..]),
            Err(SrError::Format(_))
        ));

        let mut nan = blob;
        nan[14..22].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            read_matrix_from(&mut &nan[..]),
            Err(SrError::NonFinite { .. })
        ));
    }

    #[test]
    fn pgm_round_trip_quantizes_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Image::new(Array2::from_shape_fn((16, 16), |_| rng.random::<f64>())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_reader_handles_comments_and_rejects_nonsquare() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(&path, b"P5\n# a comment\n2 2\n255\n\x00\x7f\x80\xff").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.side(), 2);
        assert_eq!(img.pixels()[[1, 1]], 1.0);

        let bad = dir.path().join("bad.pgm");
        fs::write(&bad, b"P5\n3 2\n255\n\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(read_pgm(&bad).is_err());
    }

    #[test]
    fn observations_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Image::new(Array2::from_shape_fn((8, 8), |_| rng.random::<f64>())).unwrap();
        let params = crate::model::ModelParams::new(8, 2, 0.3, 5).unwrap();
        let rho = ShiftDistribution::uniform(8);
        let obs = sample_observations(&x, &rho, &params, 99).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_observations(dir.path(), &obs).unwrap();
        let back = load_observations(dir.path()).unwrap();
        assert_eq!(back.params(), obs.params());
        assert_eq!(back.seed(), Some(99));
        assert_eq!(back.diagnostic_true_shifts(), obs.diagnostic_true_shifts());
        for (a, b) in obs.frames().iter().zip(back.frames()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

//! On-request serialization of raw training records: a binary file of
//! little-endian f64 pairs (re, im), sample-major with antennas in order
//! inside each sample, plus a JSON sidecar describing the shapes.

use std::io::Write;
use std::path::Path;

use riscade_core::protocol::TrainingRecord;

/// Writes `<stem>.bin` and `<stem>.json` under `dir`.
pub fn dump_record(record: &TrainingRecord, dir: &Path, stem: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let antennas = record.dims().bs_antennas();
    let samples = record.total_samples();

    let mut bin = Vec::with_capacity(samples * antennas * 16);
    for sample in record.samples() {
        for z in sample.iter() {
            bin.extend_from_slice(&z.re.to_le_bytes());
            bin.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    std::fs::write(dir.join(format!("{stem}.bin")), &bin)?;

    let mut sidecar = std::fs::File::create(dir.join(format!("{stem}.json")))?;
    writeln!(
        sidecar,
        "{{\n  \"schema\": 1,\n  \"samples\": {samples},\n  \"antennas\": {antennas},\n  \"noise_var\": {},\n  \"layout\": \"sample-major, per sample one complex value per antenna\",\n  \"encoding\": \"little-endian f64, interleaved re/im\"\n}}",
        record.noise_var()
    )?;
    Ok(())
}

/// Reads a record dump back into (samples x antennas) complex values.
/// Intended for tests and downstream tooling.
pub fn read_record_bin(
    path: &Path,
    samples: usize,
    antennas: usize,
) -> std::io::Result<Vec<Vec<(f64, f64)>>> {
    let bytes = std::fs::read(path)?;
    let expected = samples * antennas * 16;
    if bytes.len() != expected {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(samples);
    let mut offset = 0;
    for _ in 0..samples {
        let mut row = Vec::with_capacity(antennas);
        for _ in 0..antennas {
            let re = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
            let im = f64::from_le_bytes(bytes[offset + 8..offset + 16].try_into().unwrap());
            row.push((re, im));
            offset += 16;
        }
        out.push(row);
    }
    Ok(out)
}

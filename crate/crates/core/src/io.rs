//! On-disk formats. Tensors use a small binary container ("RST1"): a
//! 4-byte magic, a u8 rank, little-endian u64 dims, then the row-major
//! payload. The payload is f64 or u8, told apart by its byte length.
//! Everything is written and read exactly, so reruns produce
//! byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::learn::IterRecord;
use crate::robust::OutlierMask;
use crate::tensor::{ActivationMap, Dictionary, SignalTensor};

const MAGIC: &[u8; 4] = b"RST1";
const MAX_RANK: u8 = 8;

fn checked_len(dims: &[u64], path: &Path) -> Result<usize> {
    let mut n: usize = 1;
    for &d in dims {
        let d: usize = d
            .try_into()
            .map_err(|_| Error::Parse(format!("{}: dimension {d} overflows", path.display())))?;
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Parse(format!("{}: element count overflows", path.display())))?;
    }
    Ok(n)
}

fn write_header<W: Write>(w: &mut W, dims: &[u64], path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path.to_path_buf(), e);
    if dims.is_empty() || dims.len() > MAX_RANK as usize {
        return Err(Error::OutOfRange(format!(
            "tensor rank must be 1..={MAX_RANK}, got {}",
            dims.len()
        )));
    }
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&[dims.len() as u8]).map_err(io_err)?;
    for &d in dims {
        w.write_all(&d.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

fn read_raw(path: &Path) -> Result<(Vec<u64>, Vec<u8>)> {
    let io_err = |e| Error::io(path.to_path_buf(), e);
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!(
            "{}: not a tensor file (bad magic)",
            path.display()
        )));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank).map_err(io_err)?;
    if rank[0] == 0 || rank[0] > MAX_RANK {
        return Err(Error::Parse(format!(
            "{}: unsupported tensor rank {}",
            path.display(),
            rank[0]
        )));
    }
    let mut dims = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(io_err)?;
        dims.push(u64::from_le_bytes(b));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io_err)?;
    Ok((dims, payload))
}

/// Writes an f64 tensor.
pub fn write_f64_tensor(path: &Path, dims: &[u64], data: &[f64]) -> Result<()> {
    let n = checked_len(dims, path)?;
    if n != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "dims {:?} describe {n} elements but {} were given",
            dims,
            data.len()
        )));
    }
    let io_err = |e| Error::io(path.to_path_buf(), e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write_header(&mut w, dims, path)?;
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads an f64 tensor; fails on u8 payloads.
pub fn read_f64_tensor(path: &Path) -> Result<(Vec<u64>, Vec<f64>)> {
    let (dims, payload) = read_raw(path)?;
    let n = checked_len(&dims, path)?;
    if payload.len() != n * 8 {
        return Err(Error::Parse(format!(
            "{}: expected {} payload bytes for an f64 tensor of {:?}, found {}",
            path.display(),
            n * 8,
            dims,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((dims, data))
}

/// Writes a u8 tensor (masks, labels).
pub fn write_u8_tensor(path: &Path, dims: &[u64], data: &[u8]) -> Result<()> {
    let n = checked_len(dims, path)?;
    if n != data.len() {
        return Err(Error::DimensionMismatch(format!(
            "dims {:?} describe {n} elements but {} were given",
            dims,
            data.len()
        )));
    }
    let io_err = |e| Error::io(path.to_path_buf(), e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write_header(&mut w, dims, path)?;
    w.write_all(data).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Reads a u8 tensor; fails on f64 payloads.
pub fn read_u8_tensor(path: &Path) -> Result<(Vec<u64>, Vec<u8>)> {
    let (dims, payload) = read_raw(path)?;
    let n = checked_len(&dims, path)?;
    if payload.len() != n {
        return Err(Error::Parse(format!(
            "{}: expected {} payload bytes for a u8 tensor of {:?}, found {}",
            path.display(),
            n,
            dims,
            payload.len()
        )));
    }
    Ok((dims, payload))
}

pub fn write_signal(path: &Path, x: &SignalTensor) -> Result<()> {
    write_f64_tensor(path, &[x.channels() as u64, x.length() as u64], x.data())
}

pub fn read_signal(path: &Path) -> Result<SignalTensor> {
    let (dims, data) = read_f64_tensor(path)?;
    if dims.len() != 2 {
        return Err(Error::Parse(format!(
            "{}: a signal needs rank 2 (channels x samples), found rank {}",
            path.display(),
            dims.len()
        )));
    }
    SignalTensor::new(dims[0] as usize, dims[1] as usize, data)
}

pub fn write_dictionary(path: &Path, d: &Dictionary) -> Result<()> {
    write_f64_tensor(
        path,
        &[d.n_atoms() as u64, d.channels() as u64, d.atom_len() as u64],
        d.data(),
    )
}

pub fn read_dictionary(path: &Path) -> Result<Dictionary> {
    let (dims, data) = read_f64_tensor(path)?;
    if dims.len() != 3 {
        return Err(Error::Parse(format!(
            "{}: a dictionary needs rank 3 (atoms x channels x length), found rank {}",
            path.display(),
            dims.len()
        )));
    }
    Dictionary::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, data)
}

pub fn write_activations(path: &Path, z: &ActivationMap) -> Result<()> {
    write_f64_tensor(path, &[z.n_atoms() as u64, z.valid_len() as u64], z.data())
}

pub fn read_activations(path: &Path) -> Result<ActivationMap> {
    let (dims, data) = read_f64_tensor(path)?;
    if dims.len() != 2 {
        return Err(Error::Parse(format!(
            "{}: activations need rank 2 (atoms x positions), found rank {}",
            path.display(),
            dims.len()
        )));
    }
    ActivationMap::new(dims[0] as usize, dims[1] as usize, data)
}

/// Per-sample boolean flags as a u8 tensor of shape `[samples]`.
pub fn write_sample_flags(path: &Path, flags: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = flags.iter().map(|&f| f as u8).collect();
    write_u8_tensor(path, &[bytes.len() as u64], &bytes)
}

pub fn read_sample_flags(path: &Path) -> Result<Vec<bool>> {
    let (dims, data) = read_u8_tensor(path)?;
    if dims.len() != 1 {
        return Err(Error::Parse(format!(
            "{}: sample flags need rank 1, found rank {}",
            path.display(),
            dims.len()
        )));
    }
    data.iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::Parse(format!(
                "{}: flag bytes must be 0 or 1, found {b}",
                path.display()
            ))),
        })
        .collect()
}

/// Reads a signal from CSV: one row per channel, comma-separated samples.
/// Blank lines are skipped; all rows must have the same length.
pub fn read_signal_csv(path: &Path) -> Result<SignalTensor> {
    let io_err = |e| Error::io(path.to_path_buf(), e);
    let mut text = String::new();
    BufReader::new(File::open(path).map_err(io_err)?)
        .read_to_string(&mut text)
        .map_err(io_err)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| {
                    Error::Parse(format!(
                        "{}: line {}: bad number {tok:?}",
                        path.display(),
                        i + 1
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse(format!(
                    "{}: line {}: {} values, expected {}",
                    path.display(),
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    SignalTensor::from_rows(&rows)
}

/// Training trace as CSV. The recovery column appears only when at least
/// one record carries a score. Wall-clock times are deliberately left out:
/// outputs of identical runs must compare equal.
pub fn write_report_csv(path: &Path, records: &[IterRecord]) -> Result<()> {
    let io_err = |e| Error::io(path.to_path_buf(), e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let with_recovery = records.iter().any(|r| r.recovery_score.is_some());
    let mut header =
        "iteration,trimmed_objective,untrimmed_objective,step_size,trimmed_fraction".to_string();
    if with_recovery {
        header.push_str(",recovery_score");
    }
    writeln!(w, "{header}").map_err(io_err)?;
    for r in records {
        let mut line = format!(
            "{},{},{},{},{}",
            r.iteration, r.trimmed_objective, r.untrimmed_objective, r.step_size, r.trimmed_fraction
        );
        if with_recovery {
            match r.recovery_score {
                Some(s) => line.push_str(&format!(",{s}")),
                None => line.push(','),
            }
        }
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Patch-level mask as CSV: index, sample bounds, flag.
pub fn write_mask_csv(path: &Path, mask: &OutlierMask) -> Result<()> {
    let io_err = |e| Error::io(path.to_path_buf(), e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    writeln!(w, "patch,start,end,flagged").map_err(io_err)?;
    for (i, &f) in mask.flags().iter().enumerate() {
        let (s, e) = mask.patch_bounds(i);
        writeln!(w, "{i},{s},{e},{}", f as u8).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Metadata written beside dictionaries so a model file is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryMeta {
    pub n_atoms: usize,
    pub channels: usize,
    pub atom_len: usize,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    /// Hex SHA-256 of the run configuration, for provenance checks.
    pub config_sha256: Option<String>,
}

impl DictionaryMeta {
    pub fn for_dictionary(d: &Dictionary) -> Self {
        DictionaryMeta {
            n_atoms: d.n_atoms(),
            channels: d.channels(),
            atom_len: d.atom_len(),
            lambda: None,
            seed: None,
            config_sha256: None,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let io_err = |e| Error::io(path.to_path_buf(), e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let io_err = |e| Error::io(path.to_path_buf(), e);
    let mut text = String::new();
    BufReader::new(File::open(path).map_err(io_err)?)
        .read_to_string(&mut text)
        .map_err(io_err)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

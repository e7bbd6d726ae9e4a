//! Binary tensor records: an ASCII header line `gridsight-tensor v1 n=<n>`
//! followed by `n * n * 36` little-endian `f64` values. A file may hold any
//! number of consecutive records.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{GridConfig, PredictionTensor};
use crate::{Error, Result};

pub const TENSOR_MAGIC: &str = "gridsight-tensor v1";

pub fn write_tensors(path: impl AsRef<Path>, tensors: &[PredictionTensor]) -> Result<()> {
    let mut out = Vec::new();
    for t in tensors {
        writeln!(out, "{TENSOR_MAGIC} n={}", t.n())?;
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<PredictionTensor>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(format!("record {} has no header line", out.len())))?;
        let header = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| bad(format!("record {} header is not text", out.len())))?;
        let n: usize = header
            .strip_prefix(TENSOR_MAGIC)
            .and_then(|rest| rest.strip_prefix(" n="))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad(format!("expected `{TENSOR_MAGIC} n=<n>`, found `{header}`")))?;
        let cfg = GridConfig::new(n)?;
        pos += nl + 1;
        let nbytes = cfg.tensor_len() * 8;
        if bytes.len() - pos < nbytes {
            return Err(bad(format!(
                "record {} truncated: need {nbytes} bytes, have {}",
                out.len(),
                bytes.len() - pos
            )));
        }
        let values = bytes[pos..pos + nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        pos += nbytes;
        out.push(PredictionTensor::from_values(&cfg, values)?);
    }
    Ok(out)
}

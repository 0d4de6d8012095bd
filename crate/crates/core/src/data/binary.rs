//! Bit-exact container for multivariate datasets.
//!
//! Layout (all little-endian): the 8-byte magic `DICOTD1\0`; `u32` N, T,
//! D, C; N·T·D `f32` values (instance, time, channel); N `i32` labels with
//! `-1` marking an unlabeled window.

use std::fs;
use std::path::Path;

use super::TimeSeriesBatch;
use crate::error::{Error, Result};

pub const DATA_MAGIC: &[u8; 8] = b"DICOTD1\0";

pub fn write_binary(batch: &TimeSeriesBatch) -> Vec<u8> {
    let n = batch.len();
    let mut out = Vec::with_capacity(24 + batch.values().len() * 4 + n * 4);
    out.extend_from_slice(DATA_MAGIC);
    for v in [n, batch.window_len(), batch.channels(), batch.n_classes()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in batch.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..n {
        let label = batch.labels().map_or(-1, |l| l[i] as i32);
        out.extend_from_slice(&label.to_le_bytes());
    }
    out
}

pub fn read_binary(bytes: &[u8]) -> Result<TimeSeriesBatch> {
    if bytes.len() < 24 || &bytes[..8] != DATA_MAGIC {
        return Err(Error::Format("missing DICOTD1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (n, t, d, c) = (word(0), word(1), word(2), word(3));
    let count = n
        .checked_mul(t)
        .and_then(|v| v.checked_mul(d))
        .ok_or_else(|| Error::Format("header extents overflow".into()))?;
    let expected = 24 + 4 * count + 4 * n;
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "truncated file: header promises {expected} bytes, found {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let body = &bytes[24..];
    let values: Vec<f32> = body[..4 * count]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let raw: Vec<i32> = body[4 * count..]
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
        .collect();

    let labels = if raw.iter().all(|&l| l == -1) {
        None
    } else {
        if raw.iter().any(|&l| l < 0) {
            return Err(Error::Format("mixed labeled and unlabeled windows".into()));
        }
        if let Some(&bad) = raw.iter().find(|&&l| l as usize >= c) {
            return Err(Error::Format(format!("label {bad} outside 0..{c}")));
        }
        Some(raw.iter().map(|&l| l as usize).collect())
    };
    let batch = TimeSeriesBatch::new(values, n, t, d, labels).map_err(|e| match e {
        Error::Shape { detail, .. } => Error::Format(detail),
        other => other,
    })?;
    let classes = if batch.labels().is_some() { c } else { 0 };
    Ok(batch.with_n_classes(classes))
}

pub fn save_binary(batch: &TimeSeriesBatch, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_binary(batch))?;
    Ok(())
}

pub fn load_binary(path: impl AsRef<Path>) -> Result<TimeSeriesBatch> {
    read_binary(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_is_32_bytes() {
        let b = TimeSeriesBatch::new(vec![1.5], 1, 1, 1, Some(vec![0])).unwrap();
        let bytes = write_binary(&b);
        assert_eq!(bytes.len(), 8 + 16 + 4 + 4);
        assert_eq!(read_binary(&bytes).unwrap(), b);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let values = vec![0.1, -0.0, f32::MIN_POSITIVE, 3.0e38, -7.25, 1.0 / 3.0];
        let b = TimeSeriesBatch::new(values, 3, 2, 1, Some(vec![2, 0, 1])).unwrap();
        let bytes = write_binary(&b);
        let back = read_binary(&bytes).unwrap();
        assert_eq!(back.labels(), b.labels());
        for (x, y) in back.values().iter().zip(b.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(write_binary(&back), bytes);
    }

    #[test]
    fn unlabeled_round_trip() {
        let b = TimeSeriesBatch::new(vec![1.0, 2.0], 2, 1, 1, None).unwrap();
        let back = read_binary(&write_binary(&b)).unwrap();
        assert!(back.labels().is_none());
        assert_eq!(back, b);
    }

    #[test]
    fn bad_inputs_are_format_errors() {
        let b = TimeSeriesBatch::new(vec![1.0, 2.0], 2, 1, 1, Some(vec![0, 1])).unwrap();
        let bytes = write_binary(&b);
        assert!(matches!(read_binary(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_binary(&bad), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_binary(&long), Err(Error::Format(_))));
        let mut nan = bytes.clone();
        nan[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_binary(&nan), Err(Error::Format(_))));
        let mut mixed = bytes;
        let at = mixed.len() - 4;
        mixed[at..].copy_from_slice(&(-1i32).to_le_bytes());
        assert!(matches!(read_binary(&mixed), Err(Error::Format(_))));
    }
}

//! Pre-extracted feature files.
//!
//! The native format is a little-endian `u32` row count, a `u32` column
//! count, then `rows × cols` little-endian `f32` values in row-major order.
//! `.npz` archives from the public feature releases are read as well.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Ix2};
use ndarray_npy::NpzReader;

use crate::error::{Error, Result};
use crate::types::FeatureSequence;

fn feature_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Feature {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_features(path: &Path, features: &Array2<f64>) -> Result<()> {
    let (rows, cols) = features.dim();
    let to_u32 = |n: usize| u32::try_from(n).map_err(|_| feature_err(path, "dimension exceeds u32"));
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&to_u32(rows)?.to_le_bytes())?;
    w.write_all(&to_u32(cols)?.to_le_bytes())?;
    for v in features.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bin(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(feature_err(path, "file shorter than its header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(0), word(4));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(8))
        .ok_or_else(|| feature_err(path, "header overflows"))?;
    if bytes.len() != expected {
        return Err(feature_err(
            path,
            format!("header says {rows}×{cols} but file has {} bytes", bytes.len()),
        ));
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| feature_err(path, e.to_string()))
}

/// Reads the first 2-D array of an `.npz` archive, preferring the entry
/// names used by the public releases.
pub fn read_npz(path: &Path) -> Result<Array2<f64>> {
    let mut npz = NpzReader::new(File::open(path)?).map_err(|e| feature_err(path, e.to_string()))?;
    let names = npz.names().map_err(|e| feature_err(path, e.to_string()))?;
    let preferred = ["features", "last_hidden_state", "arr_0"];
    let mut ordered: Vec<&String> = preferred
        .iter()
        .filter_map(|p| names.iter().find(|n| n.trim_end_matches(".npy") == *p))
        .collect();
    let rest: Vec<&String> = names.iter().filter(|n| !ordered.contains(n)).collect();
    ordered.extend(rest);
    for name in ordered {
        if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<f32>, Ix2>(name) {
            return Ok(a.mapv(f64::from));
        }
        if let Ok(a) = npz.by_name::<ndarray::OwnedRepr<f64>, Ix2>(name) {
            return Ok(a);
        }
    }
    Err(feature_err(path, "no 2-D float array in archive"))
}

/// `{dir}/{id}.bin`, falling back to `{dir}/{id}.npz`.
pub fn feature_path(dir: &Path, id: &str) -> Result<PathBuf> {
    let bin = dir.join(format!("{id}.bin"));
    if bin.is_file() {
        return Ok(bin);
    }
    let npz = dir.join(format!("{id}.npz"));
    if npz.is_file() {
        return Ok(npz);
    }
    Err(Error::MissingFeature(bin))
}

/// Loads a feature matrix as a fully valid sequence, checking its width
/// against `expected_dim` and optionally L2-normalizing every row.
pub fn load_features(path: &Path, expected_dim: Option<usize>, normalize: bool) -> Result<FeatureSequence> {
    if !path.is_file() {
        return Err(Error::MissingFeature(path.to_path_buf()));
    }
    let m = match path.extension().and_then(|e| e.to_str()) {
        Some("npz") => read_npz(path)?,
        _ => read_bin(path)?,
    };
    if let Some(d) = expected_dim {
        if m.ncols() != d {
            return Err(feature_err(path, format!("dimension {} does not match expected {d}", m.ncols())));
        }
    }
    let seq = FeatureSequence::new(m).map_err(|e| feature_err(path, e.to_string()))?;
    Ok(if normalize { seq.l2_normalized() } else { seq })
}

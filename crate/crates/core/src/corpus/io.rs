//! Feature files and manifests.
//!
//! Feature file (little-endian): magic `LATF`, u32 version = 1, u32 T,
//! u32 H, then `T·H` f32 values row-major.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const FEATURES_MAGIC: &[u8; 4] = b"LATF";
pub const FEATURES_VERSION: u32 = 1;

pub fn write_features<T: Scalar>(frames: &Matrix<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURES_MAGIC)?;
    w.write_all(&FEATURES_VERSION.to_le_bytes())?;
    w.write_all(&(frames.rows() as u32).to_le_bytes())?;
    w.write_all(&(frames.cols() as u32).to_le_bytes())?;
    for &x in frames.as_slice() {
        w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Matrix<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_features(&bytes)
}

pub fn decode_features(bytes: &[u8]) -> Result<Matrix<f32>> {
    if bytes.len() < 16 || &bytes[..4] != FEATURES_MAGIC {
        return Err(Error::format("feature file: bad magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURES_VERSION {
        return Err(Error::format(format!("feature file: unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if rows == 0 || cols == 0 {
        return Err(Error::format("feature file: empty matrix"));
    }
    let expected = 16 + rows * cols * 4;
    if bytes.len() < expected {
        return Err(Error::format(format!("feature file: payload truncated ({} of {expected} bytes)", bytes.len())));
    }
    if bytes.len() > expected {
        return Err(Error::format("feature file: trailing bytes"));
    }
    let data: Vec<f32> = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::format("feature file: non-finite value"));
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

/// One line of a corpus manifest. `path` is relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub labels: BTreeMap<String, String>,
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(entries)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let mut factors: Option<Vec<&String>> = None;
    for e in &entries {
        let keys: Vec<&String> = e.labels.keys().collect();
        match &factors {
            None => factors = Some(keys),
            Some(f) if *f != keys => {
                return Err(Error::input(format!("manifest entry {} does not label every declared factor", e.id)))
            }
            _ => {}
        }
    }
    Ok(entries)
}

fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(rel)
}

/// Reads a manifest and every feature file it lists.
pub fn load_manifest(path: &Path) -> Result<Vec<(ManifestEntry, FeatureSequence)>> {
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let frames = read_features(&resolve(path, &e.path))?;
            let seq = FeatureSequence::new(e.id.clone(), frames);
            Ok((e, seq))
        })
        .collect()
}

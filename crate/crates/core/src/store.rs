//! On-disk array directories.
//!
//! A store is a directory holding `manifest.json` plus one raw little-endian
//! IEEE-754 single-precision file per named array. Shapes live only in the
//! manifest. Checkpoints, datasets and embedding caches all use this layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

impl ArraySpec {
    pub fn new(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            file: file_name_for(name),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest<M> {
    format_version: u32,
    kind: String,
    meta: M,
    arrays: Vec<ArraySpec>,
}

pub fn file_name_for(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.f32")
}

pub fn encode_f32(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_f32_file(path: &Path, data: &[f64]) -> Result<()> {
    fs::write(path, encode_f32(data)).map_err(|e| Error::io(path, e))
}

/// Reads exactly `expected_len` values; any other byte count is corruption.
pub fn read_f32_file(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!(
                "expected {} bytes ({} f32 values), found {}",
                expected_len * 4,
                expected_len,
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::UnknownVersion {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Writes `arrays` and a manifest carrying `meta` into `dir`.
pub fn save_arrays<M: Serialize>(
    dir: &Path,
    kind: &str,
    meta: &M,
    arrays: &BTreeMap<String, Tensor>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut specs = Vec::with_capacity(arrays.len());
    for (name, t) in arrays {
        let spec = ArraySpec::new(name, t.shape());
        write_f32_file(&dir.join(&spec.file), t.data())?;
        specs.push(spec);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        arrays: specs,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

/// Loads a store written by [`save_arrays`], checking kind and version.
pub fn load_arrays<M: DeserializeOwned>(
    dir: &Path,
    kind: &str,
) -> Result<(M, BTreeMap<String, Tensor>)> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let manifest: Manifest<M> = read_json(&manifest_path)?;
    check_version(manifest.format_version)?;
    if manifest.kind != kind {
        return Err(Error::Corrupt {
            path: manifest_path,
            reason: format!("store kind is `{}`, expected `{kind}`", manifest.kind),
        });
    }
    let mut arrays = BTreeMap::new();
    for spec in manifest.arrays {
        let path: PathBuf = dir.join(&spec.file);
        if !path.exists() {
            return Err(Error::MissingArray(spec.name));
        }
        let data = read_f32_file(&path, spec.numel())?;
        arrays.insert(spec.name, Tensor::new(spec.shape, data));
    }
    Ok((manifest.meta, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f32");
        write_f32_file(&p, &[1.0, 2.0, 3.0]).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..10]).unwrap();
        assert!(matches!(read_f32_file(&p, 3), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        save_arrays(dir.path(), "x", &(), &BTreeMap::new()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&p, text).unwrap();
        let err = load_arrays::<()>(dir.path(), "x").unwrap_err();
        assert!(matches!(err, Error::UnknownVersion { found: 7, .. }));
    }

    #[test]
    fn unsafe_names_are_sanitized() {
        assert_eq!(file_name_for("a/b c.w"), "a_b_c.w.f32");
    }
}

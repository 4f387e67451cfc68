//! Raw little-endian tensor blobs and JSON manifests.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U32,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a manifest; syntax and schema errors carry the byte offset of the
/// offending position.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        let offset = line_col_offset(&text, inner.line(), inner.column());
        Error::Parse {
            file: path.to_path_buf(),
            offset,
            msg: format!("{} (at `{}`)", inner, e.path()),
        }
    })
}

fn line_col_offset(text: &str, line: usize, column: usize) -> u64 {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)) as u64
}

pub fn write_blob(path: &Path, values: &[f64], dtype: Dtype) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * dtype.width());
    for &v in values {
        match dtype {
            Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
            Dtype::U32 => bytes.extend_from_slice(&(v as u32).to_le_bytes()),
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_u32(path: &Path, values: &[usize]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as u32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_exact(path: &Path, count: usize, dtype: Dtype) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = count * dtype.width();
    if bytes.len() != want {
        let offset = bytes.len().min(want) as u64;
        let msg = if bytes.len() < want {
            format!("blob ends after {} bytes, expected {want}", bytes.len())
        } else {
            format!("{} trailing bytes after the expected {want}", bytes.len() - want)
        };
        return Err(Error::Parse { file: path.to_path_buf(), offset, msg });
    }
    Ok(bytes)
}

/// Reads exactly `count` reals stored as `dtype`.
pub fn read_blob(path: &Path, count: usize, dtype: Dtype) -> Result<Vec<f64>> {
    let bytes = read_exact(path, count, dtype)?;
    Ok(match dtype {
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::U32 => bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    })
}

pub fn read_u32(path: &Path, count: usize) -> Result<Vec<usize>> {
    let bytes = read_exact(path, count, Dtype::U32)?;
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let v = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, std::f64::consts::PI];
        write_blob(&p, &v, Dtype::F64).unwrap();
        let back = read_blob(&p, v.len(), Dtype::F64).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn short_blob_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_blob(&p, &[1.0, 2.0, 3.0], Dtype::F32).unwrap();
        match read_blob(&p, 4, Dtype::F32) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_error_has_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, "{\n  \"a\": 1,\n  \"b\": x\n}").unwrap();
        #[derive(serde::Deserialize, Debug)]
        #[allow(dead_code)]
        struct M {
            a: u32,
            b: u32,
        }
        match read_json::<M>(&p) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("{other:?}"),
        }
    }
}

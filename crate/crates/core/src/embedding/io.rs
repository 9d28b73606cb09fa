//! Binary tensor files: row-major little-endian `f64`, shape kept alongside in JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Where a tensor lives inside a snapshot directory and what shape it has.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

pub fn encode(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    )
}

pub fn write_values(path: &Path, values: &[f64]) -> Result<()> {
    fs::write(path, encode(values)).map_err(|e| Error::io(path, e))
}

pub fn read_values(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match decode(&bytes) {
        Some(v) if v.len() == expected_len => Ok(v),
        _ => Err(Error::Snapshot {
            path: path.to_path_buf(),
            message: format!("expected {} f64 values, file has {} bytes", expected_len, bytes.len()),
        }),
    }
}

/// Write `m` to `dir/file` and describe it.
pub fn write_matrix(dir: &Path, file: &str, m: &Matrix) -> Result<TensorInfo> {
    write_values(&dir.join(file), m.as_slice())?;
    Ok(TensorInfo {
        file: file.to_string(),
        rows: m.rows(),
        cols: m.cols(),
    })
}

pub fn read_matrix(dir: &Path, info: &TensorInfo) -> Result<Matrix> {
    let values = read_values(&dir.join(&info.file), info.rows * info.cols)?;
    Matrix::from_vec(info.rows, info.cols, values)
}

/// Serialize `value` as pretty JSON via a temporary file and rename.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Snapshot {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn matrix_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream(9, Purpose::GlobalInit, &[]);
        let mut m = Matrix::random_normal(5, 3, 1.0, &mut rng);
        m.set(0, 0, f64::MIN_POSITIVE);
        m.set(1, 1, -0.0);
        let info = write_matrix(dir.path(), "q.bin", &m).unwrap();
        let back = read_matrix(dir.path(), &info).unwrap();
        let bits = |x: &Matrix| x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&back));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::zeros(4, 4);
        let info = write_matrix(dir.path(), "q.bin", &m).unwrap();
        std::fs::write(dir.path().join("q.bin"), [0u8; 17]).unwrap();
        assert!(matches!(read_matrix(dir.path(), &info), Err(Error::Snapshot { .. })));
    }
}

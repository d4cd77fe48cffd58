//! Binary feature matrix file.
//!
//! Layout: 16-byte magic, u32 little-endian header length, a JSON header
//! `{"rows", "dims", "dtype"}`, then the row-major little-endian f32 payload.
//! Flat image features use dims `[d1]`; spatial grids use `[7, 7, d1]`.
//! Round trips are bit-exact.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURES_MAGIC: &[u8; 16] = b"POPATTN-FEAT-v1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeaturesHeader {
    rows: usize,
    dims: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let per_row: usize = dims.iter().product();
        if dims.is_empty() || per_row == 0 {
            return Err(Error::invalid(format!("feature dims {dims:?} are degenerate")));
        }
        if data.len() != rows * per_row {
            return Err(Error::invalid(format!(
                "feature payload has {} values, want {rows} rows x {per_row}",
                data.len()
            )));
        }
        Ok(FeatureMatrix { rows, dims, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn row_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn row(&self, index: usize) -> Result<&[f32]> {
        if index >= self.rows {
            return Err(Error::IndexOutOfRange {
                what: "feature row",
                index,
                len: self.rows,
            });
        }
        let w = self.row_len();
        Ok(&self.data[index * w..(index + 1) * w])
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

pub fn write_features(path: &Path, matrix: &FeatureMatrix) -> Result<()> {
    let header = FeaturesHeader {
        rows: matrix.rows,
        dims: matrix.dims.clone(),
        dtype: "f32le".to_string(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header_json.len() + matrix.data.len() * 4);
    out.extend_from_slice(FEATURES_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for v in &matrix.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path)?;
    let fmt = |offset: u64, msg: String| Error::Format {
        path: path.display().to_string(),
        offset,
        msg,
    };
    if bytes.len() < 20 {
        return Err(fmt(bytes.len() as u64, "file shorter than magic + header length".into()));
    }
    if &bytes[..16] != FEATURES_MAGIC {
        return Err(fmt(0, format!("bad magic, want {FEATURES_MAGIC:?}")));
    }
    let header_len = u32::from_le_bytes([bytes[16], bytes[17], bytes[18], bytes[19]]) as usize;
    let header_end = 20 + header_len;
    if bytes.len() < header_end {
        return Err(fmt(
            bytes.len() as u64,
            format!("header claims {header_len} bytes but file ends early"),
        ));
    }
    let header: FeaturesHeader = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| fmt(20, format!("header is not valid JSON: {e}")))?;
    if header.dtype != "f32le" {
        return Err(fmt(20, format!("unsupported dtype {:?}", header.dtype)));
    }
    let per_row: usize = header.dims.iter().product();
    let want = header.rows * per_row * 4;
    let payload = &bytes[header_end..];
    if payload.len() != want {
        return Err(fmt(
            header_end as u64,
            format!(
                "payload is {} bytes, header {} rows x {:?} needs {want}",
                payload.len(),
                header.rows,
                header.dims
            ),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureMatrix::new(header.rows, header.dims, data)
}

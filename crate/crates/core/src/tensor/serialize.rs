//! Flat parameter files: a plain-text manifest plus a little-endian blob.
//!
//! Manifest lines after the header comment are
//! `name dtype shape byte_offset`, where `shape` is a comma-separated extent
//! list (`-` for rank 0) and offsets index into the companion blob.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{numel, DType, Scalar};

pub const MANIFEST_HEADER: &str = "# datransunet tensor manifest v1";

#[derive(Debug, Error)]
pub enum SerializeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("tensor {name}: stored as {found}, expected {expected}")]
    DType { name: String, found: DType, expected: DType },
    #[error("tensor {name}: blob too short for offset {offset} + {len} bytes")]
    Truncated { name: String, offset: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
}

pub fn encode<F: Scalar>(tensors: &[NamedTensor<F>]) -> (String, Vec<u8>) {
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut blob = Vec::new();
    for t in tensors {
        let shape = if t.shape.is_empty() {
            "-".to_string()
        } else {
            t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        };
        let _ = writeln!(manifest, "{} {} {} {}", t.name, F::DTYPE, shape, blob.len());
        for &v in &t.data {
            v.write_le(&mut blob);
        }
    }
    (manifest, blob)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, SerializeError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| SerializeError::Malformed { line: line_no, reason: reason.to_string() };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, dtype, shape, offset] = fields[..] else {
            return Err(bad("expected 4 fields"));
        };
        let dtype = DType::parse(dtype).ok_or_else(|| bad("unknown dtype"))?;
        let shape = if shape == "-" {
            vec![]
        } else {
            shape.split(',').map(|d| d.parse::<usize>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad("bad shape"))?
        };
        let offset = offset.parse().map_err(|_| bad("bad offset"))?;
        out.push(ManifestEntry { name: name.to_string(), dtype, shape, offset });
    }
    Ok(out)
}

pub fn decode<F: Scalar>(manifest: &str, blob: &[u8]) -> Result<Vec<NamedTensor<F>>, SerializeError> {
    parse_manifest(manifest)?
        .into_iter()
        .map(|e| {
            if e.dtype != F::DTYPE {
                return Err(SerializeError::DType { name: e.name, found: e.dtype, expected: F::DTYPE });
            }
            let size = e.dtype.size();
            let len = numel(&e.shape) * size;
            let bytes = blob.get(e.offset..e.offset + len).ok_or_else(|| SerializeError::Truncated {
                name: e.name.clone(),
                offset: e.offset,
                len,
            })?;
            let data = bytes.chunks_exact(size).map(F::read_le).collect();
            Ok(NamedTensor { name: e.name, shape: e.shape, data })
        })
        .collect()
}

pub fn write_files<F: Scalar>(
    manifest_path: &Path,
    blob_path: &Path,
    tensors: &[NamedTensor<F>],
) -> Result<(), SerializeError> {
    let (manifest, blob) = encode(tensors);
    fs::write(manifest_path, manifest)?;
    fs::write(blob_path, blob)?;
    Ok(())
}

pub fn read_files<F: Scalar>(manifest_path: &Path, blob_path: &Path) -> Result<Vec<NamedTensor<F>>, SerializeError> {
    let manifest = fs::read_to_string(manifest_path)?;
    let blob = fs::read(blob_path)?;
    decode(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn manifest_lists_offsets() {
        let ts = vec![
            NamedTensor { name: "a.weight".into(), shape: vec![2, 3], data: vec![1.0f32; 6] },
            NamedTensor { name: "a.alpha".into(), shape: vec![1], data: vec![0.0f32] },
        ];
        let (m, blob) = encode(&ts);
        assert_eq!(m, format!("{MANIFEST_HEADER}\na.weight f32 2,3 0\na.alpha f32 1 24\n"));
        assert_eq!(blob.len(), 28);
        assert_eq!(&blob[0..4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let ts = vec![NamedTensor { name: "w".into(), shape: vec![1], data: vec![1.0f64] }];
        let (m, blob) = encode(&ts);
        assert!(matches!(decode::<f32>(&m, &blob), Err(SerializeError::DType { .. })));
    }

    #[test]
    fn truncated_blob_is_reported() {
        let ts = vec![NamedTensor { name: "w".into(), shape: vec![4], data: vec![1.0f64; 4] }];
        let (m, blob) = encode(&ts);
        assert!(matches!(decode::<f64>(&m, &blob[..16]), Err(SerializeError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let ts = vec![NamedTensor { name: "x".into(), shape: vec![vals.len()], data: vals.clone() }];
            let (m, blob) = encode(&ts);
            let back = decode::<f64>(&m, &blob).unwrap();
            prop_assert_eq!(back[0].data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}

//! Named-tensor container.
//!
//! Layout: a single-line JSON manifest
//! `{"tensors":[{"name","shape","dtype":"f32","offset","length"}, ...]}`, one
//! `\n`, then the payload of little-endian `f32` values. Offsets and lengths are
//! in bytes, relative to the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

pub fn encode_tensors(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let offset = payload.len();
        for &x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: payload.len() - offset,
        });
    }
    let mut out = serde_json::to_vec(&Manifest { tensors: entries })?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Integrity("no manifest terminator".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Integrity(format!("bad manifest: {e}")))?;
    let payload = &bytes[split + 1..];
    let declared: usize = manifest.tensors.iter().map(|e| e.length).sum();
    if declared != payload.len() {
        return Err(Error::Integrity(format!(
            "manifest declares {declared} payload bytes, found {}",
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Integrity(format!(
                "{}: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let n: usize = e.shape.iter().product();
        if e.length != 4 * n || e.offset + e.length > payload.len() {
            return Err(Error::Integrity(format!(
                "{}: shape {:?} does not match {} bytes at offset {}",
                e.name, e.shape, e.length, e.offset
            )));
        }
        let data = payload[e.offset..e.offset + e.length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode_tensors(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            (
                "qrn.w".into(),
                Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap(),
            ),
            ("qrn.b".into(), Tensor::vector(vec![0.1])),
        ]
    }

    #[test]
    fn round_trip() {
        let bytes = encode_tensors(&sample()).unwrap();
        assert_eq!(decode_tensors(&bytes).unwrap(), sample());
    }

    #[test]
    fn manifest_then_single_newline() {
        let bytes = encode_tensors(&sample()).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes[nl - 1], b'}');
        assert_eq!(bytes.len() - nl - 1, 5 * 4);
        // first payload float is 1.0 little-endian
        assert_eq!(&bytes[nl + 1..nl + 5], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_integrity_error() {
        let bytes = encode_tensors(&sample()).unwrap();
        let err = decode_tensors(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }
}

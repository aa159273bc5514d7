//! Model file format.
//!
//! Layout: magic `SSNM`, u32 LE version (= 1), u64 LE header length, JSON
//! header `{spec, tensors: [{name, shape, offset}]}`, then a raw little-
//! endian f32 payload. Offsets are bytes from the start of the payload and
//! must tile it contiguously in directory order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, Weights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"SSNM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
}

pub fn save_model(path: &Path, spec: &ModelSpec, weights: &Weights) -> Result<()> {
    weights.validate_against(spec)?;
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in weights.as_map() {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in tensor.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        spec: spec.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelSpec, Weights)> {
    let file = path.display().to_string();
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            file,
            detail: format!("{} bytes, need at least 16", bytes.len()),
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::BadMagic {
            file,
            expected: MAGIC,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            file,
            expected: VERSION,
            found: version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::Truncated {
            file,
            detail: format!(
                "header wants {header_len} bytes, only {} remain",
                bytes.len() - 16
            ),
        });
    }
    let header: Header =
        serde_json::from_slice(&bytes[16..16 + header_len]).map_err(|e| {
            Error::HeaderInconsistency {
                file: file.clone(),
                detail: format!("bad header json: {e}"),
            }
        })?;
    let payload = &bytes[16 + header_len..];

    // Entries must tile the payload contiguously.
    let mut expected_offset = 0u64;
    for entry in &header.tensors {
        if entry.offset != expected_offset {
            return Err(Error::HeaderInconsistency {
                file,
                detail: format!(
                    "tensor {} at offset {}, expected {expected_offset}",
                    entry.name, entry.offset
                ),
            });
        }
        let numel: usize = entry.shape.iter().product();
        let bytes_needed = numel as u64 * 4;
        if entry.offset + bytes_needed > payload.len() as u64 {
            return Err(Error::Truncated {
                file,
                detail: format!(
                    "tensor {} needs bytes {}..{} of a {}-byte payload",
                    entry.name,
                    entry.offset,
                    entry.offset + bytes_needed,
                    payload.len()
                ),
            });
        }
        expected_offset += bytes_needed;
    }
    if expected_offset != payload.len() as u64 {
        return Err(Error::HeaderInconsistency {
            file,
            detail: format!(
                "directory covers {expected_offset} bytes, payload has {}",
                payload.len()
            ),
        });
    }

    let mut map = BTreeMap::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let data: Vec<f64> = (0..numel)
            .map(|i| {
                f32::from_le_bytes(
                    payload[start + i * 4..start + i * 4 + 4].try_into().unwrap(),
                ) as f64
            })
            .collect();
        map.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?);
    }
    let weights = Weights::from_map(map);
    weights
        .validate_against(&header.spec)
        .map_err(|e| Error::HeaderInconsistency {
            file,
            detail: format!("directory does not match spec: {e}"),
        })?;
    header.spec.validate()?;
    Ok((header.spec, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_reference_cnn, init_weights};

    fn roundtrip_setup() -> (ModelSpec, Weights, tempfile::TempDir) {
        let spec = build_reference_cnn([1, 32, 32], 10).unwrap();
        let weights = init_weights(&spec, 21);
        (spec, weights, tempfile::tempdir().unwrap())
    }

    #[test]
    fn roundtrip_is_f32_exact() {
        let (spec, weights, dir) = roundtrip_setup();
        let path = dir.path().join("m.ssnm");
        save_model(&path, &spec, &weights).unwrap();
        let (spec2, weights2) = load_model(&path).unwrap();
        assert_eq!(spec, spec2);
        for (name, t) in weights.as_map() {
            let t2 = weights2.get(name).unwrap();
            for (&a, &b) in t.data().iter().zip(t2.data()) {
                assert_eq!(a as f32, b as f32);
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn corrupt_magic_detected() {
        let (spec, weights, dir) = roundtrip_setup();
        let path = dir.path().join("m.ssnm");
        save_model(&path, &spec, &weights).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch_detected() {
        let (spec, weights, dir) = roundtrip_setup();
        let path = dir.path().join("m.ssnm");
        save_model(&path, &spec, &weights).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn truncated_payload_detected() {
        let (spec, weights, dir) = roundtrip_setup();
        let path = dir.path().join("m.ssnm");
        save_model(&path, &spec, &weights).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        match load_model(&path) {
            Err(Error::Truncated { .. }) | Err(Error::HeaderInconsistency { .. }) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn offset_beyond_payload_detected() {
        // Hand-build a file whose directory points past the payload end.
        let spec = build_reference_cnn([1, 32, 32], 2).unwrap();
        let header = serde_json::json!({
            "spec": spec,
            "tensors": [{"name": "layer0.weight", "shape": [16, 1, 3, 3], "offset": 0}],
        });
        let header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(b"SSNM");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&[0u8; 16]); // far too short for 144 floats
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ssnm");
        fs::write(&path, out).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Truncated { .. })));
    }
}

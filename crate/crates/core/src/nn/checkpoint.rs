use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Precision, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "fcdn-ckpt/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in values.
    pub offset: usize,
}

/// JSON half of a checkpoint. The blob holds every tensor back to back as
/// little-endian values of `dtype` (`.f32` or `.f64` next to the manifest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub magic: String,
    pub dtype: Precision,
    pub tensors: Vec<TensorEntry>,
    /// Free-form hyperparameters, seed and other metadata.
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn paths(path: &Path, dtype: Precision) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("f32") | Some("f64") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let ext = match dtype {
        Precision::F32 => ".f32",
        Precision::F64 => ".f64",
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut blob = base.into_os_string();
    blob.push(ext);
    (json.into(), blob.into())
}

/// Writes `<base>.json` and its blob. In `F32` the values are rounded.
pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>, dtype: Precision) -> Result<()> {
    let (json_path, blob_path) = paths(path.as_ref(), dtype);
    let mut entries = Vec::with_capacity(ck.tensors.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, t) in &ck.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for &v in t.data() {
            match dtype {
                Precision::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => blob.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let manifest = CheckpointManifest {
        magic: CHECKPOINT_MAGIC.into(),
        dtype,
        tensors: entries,
        meta: ck.meta.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Checkpoint, Precision)> {
    let (json_path, _) = paths(path.as_ref(), Precision::F32);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: json_path.clone(),
        source,
    })?;
    if manifest.magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "magic mismatch: expected {CHECKPOINT_MAGIC:?}, found {:?}",
            manifest.magic
        )));
    }
    let (_, blob_path) = paths(path.as_ref(), manifest.dtype);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let values: Vec<f64> = match manifest.dtype {
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    let width = if manifest.dtype == Precision::F32 { 4 } else { 8 };
    let total: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * width {
        return Err(Error::Format(format!(
            "blob length mismatch: {} bytes for {total} values",
            bytes.len()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Format(format!("tensor {} exceeds blob", e.name)))?
            .to_vec();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("tensor {} holds non-finite values", e.name)));
        }
        tensors.push((e.name, Tensor::new(&e.shape, data)?));
    }
    Ok((
        Checkpoint {
            meta: manifest.meta,
            tensors,
        },
        manifest.dtype,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({"seed": 7}),
            tensors: vec![
                ("a".into(), Tensor::new(&[2, 2], vec![0.5, -1.25, 3.0, 1e-3_f32 as f64]).unwrap()),
                ("b".into(), Tensor::scalar(2.0)),
            ],
        }
    }

    #[test]
    fn round_trips_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        for dtype in [Precision::F32, Precision::F64] {
            let p = dir.path().join(format!("ck-{dtype:?}"));
            save_checkpoint(&sample(), &p, dtype).unwrap();
            let (back, d) = load_checkpoint(&p).unwrap();
            assert_eq!(d, dtype);
            assert_eq!(back, sample());
        }
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck");
        save_checkpoint(&sample(), &p, Precision::F32).unwrap();
        let blob = dir.path().join("ck.f32");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));
    }
}

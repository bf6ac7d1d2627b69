use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EpochSet, Montage};
use crate::error::{Error, Result};

pub const MANIFEST_MAGIC: &str = "fcdn-eeg/1";

/// JSON half of the dataset container.
///
/// The blob next to it holds `n_trials * channels * samples_per_trial`
/// little-endian f32 values, indexed `((n*K)+k)*T + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub fs_hz: f64,
    pub channels: Vec<String>,
    pub n_trials: usize,
    pub samples_per_trial: usize,
    pub classes: Vec<String>,
    pub labels: Vec<usize>,
    /// Source trial of each row; omitted when every trial is its own origin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origins: Option<Vec<usize>>,
}

/// Resolves `<base>.json` / `<base>.f32` from a base path or either file name.
pub(crate) fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("f32") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut blob = base.into_os_string();
    blob.push(".f32");
    (json.into(), blob.into())
}

pub fn save_epochset(set: &EpochSet, path: impl AsRef<Path>) -> Result<()> {
    if set.n_trials() == 0 {
        return Err(Error::InvalidInput("empty set".into()));
    }
    let (json_path, blob_path) = container_paths(path.as_ref());
    let identity = set.origins().iter().enumerate().all(|(i, &o)| i == o);
    let manifest = Manifest {
        magic: MANIFEST_MAGIC.into(),
        fs_hz: set.fs_hz(),
        channels: set.montage().names().to_vec(),
        n_trials: set.n_trials(),
        samples_per_trial: set.n_samples(),
        classes: set.class_names().to_vec(),
        labels: set.labels().to_vec(),
        origins: (!identity).then(|| set.origins().to_vec()),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    let mut blob = Vec::with_capacity(set.samples().len() * 4);
    for v in set.samples() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

pub fn load_epochset(path: impl AsRef<Path>) -> Result<EpochSet> {
    let (json_path, blob_path) = container_paths(path.as_ref());
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: json_path.clone(),
        source,
    })?;
    if manifest.magic != MANIFEST_MAGIC {
        return Err(Error::Format(format!(
            "magic mismatch: expected {MANIFEST_MAGIC:?}, found {:?}",
            manifest.magic
        )));
    }
    if manifest.labels.len() != manifest.n_trials {
        return Err(Error::Format(format!(
            "manifest lists {} labels for {} trials",
            manifest.labels.len(),
            manifest.n_trials
        )));
    }
    if let Some(bad) = manifest.labels.iter().find(|&&l| l >= manifest.classes.len()) {
        return Err(Error::Format(format!(
            "label out of range: {bad} with {} classes",
            manifest.classes.len()
        )));
    }
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected = manifest.n_trials * manifest.channels.len() * manifest.samples_per_trial;
    if blob.len() != expected * 4 {
        return Err(Error::Format(format!(
            "blob length mismatch: {} bytes, expected {} ({} floats)",
            blob.len(),
            expected * 4,
            expected
        )));
    }
    let samples: Vec<f32> = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let montage = Montage::new(manifest.channels).map_err(|e| Error::Format(e.to_string()))?;
    let origins = manifest.origins.unwrap_or_else(|| (0..manifest.n_trials).collect());
    EpochSet::with_origins(
        manifest.fs_hz,
        montage,
        manifest.samples_per_trial,
        samples,
        manifest.labels,
        manifest.classes,
        origins,
    )
    .map_err(|e| match e {
        Error::InvalidInput(msg) => Error::Format(msg),
        other => other,
    })
}

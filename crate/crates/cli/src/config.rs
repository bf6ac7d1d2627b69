//! Flat `key = value` run configuration.
//!
//! Values are resolved in three layers: built-in defaults, then the config
//! file, then command-line flags. Unknown keys are rejected in every layer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::exit::CliError;

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed; every stochastic step derives from it"),
    ("data", "", "dataset base path; several comma-separated paths are subjects (loso)"),
    ("model", "", "checkpoint to evaluate or export from"),
    ("out", "", "output path (dataset base, checkpoint, report or prefix)"),
    ("log", "", "training log (JSON lines); empty means <out>.log.jsonl"),
    ("teacher", "", "teacher checkpoint, required exactly when model.beta > 0"),
    ("synth.channels", "8", "synthetic channels"),
    ("synth.samples", "250", "samples per synthetic trial"),
    ("synth.fs_hz", "250", "synthetic sampling rate"),
    ("synth.per_class", "200", "synthetic trials per class"),
    ("synth.classes", "4", "synthetic classes"),
    (
        "synth.pairs",
        "0-1,1-2,2-3,3-0",
        "phase-coupled channel pair of each class, in class order",
    ),
    ("synth.band", "alpha", "band of the coupled oscillation"),
    ("synth.amplitude", "1.0", "peak amplitude of the coupled oscillation"),
    ("synth.phase_offset", "0.5", "phase lag between the coupled channels (radians)"),
    ("synth.noise", "1.0", "RMS of the independent pink background"),
    (
        "synth.subjects",
        "1",
        "number of synthetic subjects; more than one writes <out>_s<i>",
    ),
    ("bands", "delta,theta,alpha", "the three analysis bands, by name"),
    ("fir_order", "30", "FIR band-pass order (taps - 1)"),
    ("fc", "true", "weight channels by phase locking; false trains with unit weights"),
    ("augment.factor", "1", "training-set multiplier with Gaussian copies; 1 disables"),
    ("augment.sigma_rel", "0.05", "noise std relative to each trial's channel std"),
    ("model.preset", "small_250", "base network: tiny, small_250 or reference"),
    (
        "model.conv_channels",
        "preset",
        "feature maps of the three convolutions, e.g. 4,8,8",
    ),
    ("model.kernel_widths", "preset", "temporal kernel widths, e.g. 8,8,16"),
    ("model.pool_widths", "preset", "average-pool widths, e.g. 16,14"),
    ("model.dropout", "preset", "dropout probability"),
    ("model.resize", "preset", "side of the bicubic-resized map"),
    ("model.patch", "preset", "patch side"),
    ("model.embed_dim", "preset", "transformer width"),
    ("model.depth", "preset", "encoder blocks"),
    ("model.heads", "preset", "attention heads"),
    ("model.mlp_ratio", "preset", "MLP expansion"),
    ("model.alpha", "preset", "weight of the classification terms"),
    ("model.beta", "preset", "weight of the distillation similarity term"),
    ("model.distill_sign", "preset", "agreement or literal"),
    ("model.precision", "preset", "f32 or f64"),
    ("train.epochs", "preset", "training epochs"),
    ("train.batch_size", "preset", "mini-batch size"),
    ("train.lr", "preset", "Adam learning rate"),
    ("eval.mode", "holdout", "holdout, cv5, loso or pseudo-online"),
    ("eval.folds", "5", "folds of cross-validation"),
    ("eval.n_perm", "10000", "random sign flips of the permutation test (n > 12)"),
    ("eval.compare_fc", "false", "also train without FC and test the paired difference"),
    ("online.window_s", "2.0", "pseudo-online window length in seconds"),
    ("online.overlap", "0.5", "fraction of overlap between windows"),
    ("online.threshold", "0.75", "fraction of correct windows for a successful trial"),
    ("online.strict", "false", "require strictly more than the threshold"),
    ("connectivity.band", "alpha", "band whose PLV the connectivity command reports"),
    (
        "connectivity.threshold",
        "0.9",
        "edges strictly above this PLV are listed; must be < 1",
    ),
];

/// Resolved configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `file` (if any), then with `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| CliError::usage(format!("{}: {}", path.display(), e.message)))?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("line {}: expected `key = value`", no + 1)))?;
            let k = k.trim();
            if let Some(first) = seen.insert(k.to_string(), no + 1) {
                return Err(CliError::usage(format!("line {}: key `{k}` already set on line {first}", no + 1)));
            }
            self.set(k, v.trim())
                .map_err(|e| CliError::usage(format!("line {}: {}", no + 1, e.message)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::usage(format!("unknown config key `{key}`"))),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("undeclared config key {key}"))
    }

    /// Typed value of `key`.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.str(key);
        raw.parse()
            .map_err(|_| CliError::usage(format!("config `{key}`: cannot parse `{raw}`")))
    }

    /// Typed value, or `None` when the key still says `preset`.
    pub fn preset_override<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        if self.str(key) == "preset" {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.str(key);
        if raw.trim().is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::usage(format!("config `{key}`: cannot parse `{s}`")))
            })
            .collect()
    }

    /// Non-empty path value.
    pub fn path(&self, key: &str) -> Result<&str, CliError> {
        match self.str(key) {
            "" => Err(CliError::usage(format!("`{key}` is required (flag or config key)"))),
            p => Ok(p),
        }
    }

    /// Canonical text: one sorted `key = value` line per key.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }
}

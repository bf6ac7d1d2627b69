use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Precision;

/// How the similarity term enters the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistillSign {
    /// `beta * sum (1 - sim_i) q_i`: minimizing rewards agreement with the teacher.
    #[default]
    Agreement,
    /// `beta * sum sim_i q_i`, the formula taken at face value.
    Literal,
}

impl DistillSign {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "agreement" => Some(Self::Agreement),
            "literal" => Some(Self::Literal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcdnConfig {
    pub n_channels: usize,
    pub n_samples: usize,
    pub n_classes: usize,
    /// Output feature maps of the three temporal convolutions.
    pub conv_channels: [usize; 3],
    pub kernel_widths: [usize; 3],
    pub pool_widths: [usize; 2],
    pub dropout: f64,
    /// Side of the square map each band is resized to.
    pub resize: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub alpha: f64,
    pub beta: f64,
    pub distill_sign: DistillSign,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for FcdnConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl FcdnConfig {
    /// Full-size network: 64 channels, 1000 samples, 224x224 maps.
    pub fn reference() -> Self {
        Self {
            n_channels: 64,
            n_samples: 1000,
            n_classes: 4,
            conv_channels: [40, 80, 160],
            kernel_widths: [20, 20, 40],
            pool_widths: [32, 30],
            dropout: 0.5,
            resize: 224,
            patch: 16,
            embed_dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4,
            alpha: 1.0,
            beta: 0.0,
            distill_sign: DistillSign::Agreement,
            epochs: 200,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            precision: Precision::F32,
        }
    }

    /// Small network for gradient checks: 8 channels, 128 samples, 32x32 maps.
    pub fn tiny() -> Self {
        Self {
            n_channels: 8,
            n_samples: 128,
            conv_channels: [4, 8, 8],
            kernel_widths: [8, 8, 16],
            pool_widths: [8, 14],
            resize: 32,
            patch: 8,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            ..Self::reference()
        }
    }

    /// Desk-scale network for one-second epochs at 250 Hz.
    pub fn small_250() -> Self {
        Self {
            n_channels: 8,
            n_samples: 250,
            conv_channels: [4, 8, 8],
            kernel_widths: [8, 8, 16],
            pool_widths: [16, 14],
            resize: 32,
            patch: 8,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            ..Self::reference()
        }
    }

    /// Temporal lengths after conv1, conv2, conv3, pool1 and pool2.
    pub fn time_chain(&self) -> Result<[usize; 5]> {
        let [w1, w2, _] = self.kernel_widths;
        let [p1, p2] = self.pool_widths;
        let err = |m: String| Err(Error::Config(m));
        if w1 == 0 || w1 > self.n_samples {
            return err(format!("kernel width {w1} exceeds {} samples", self.n_samples));
        }
        let t1 = self.n_samples - w1 + 1;
        if w2 == 0 || w2 > t1 {
            return err(format!("kernel width {w2} exceeds length {t1}"));
        }
        let t2 = t1 - w2 + 1;
        let t3 = t2;
        if p1 == 0 || p1 > t3 {
            return err(format!("pool width {p1} exceeds length {t3}"));
        }
        let t4 = (t3 - p1) / p1 + 1;
        if p2 == 0 || p2 > t4 {
            return err(format!("pool width {p2} exceeds length {t4}"));
        }
        let t5 = (t4 - p2) / p2 + 1;
        Ok([t1, t2, t3, t4, t5])
    }

    pub fn n_patches(&self) -> usize {
        (self.resize / self.patch).pow(2)
    }

    /// Token count: patches plus the class and distillation tokens.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 2
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_channels < 2 {
            return err("n_channels must be >= 2".into());
        }
        if self.n_classes < 2 {
            return err("n_classes must be >= 2".into());
        }
        if self.conv_channels.contains(&0) {
            return err("conv channels must be positive".into());
        }
        if self.kernel_widths[2] == 0 {
            return err("kernel widths must be positive".into());
        }
        let chain = self.time_chain()?;
        if chain[4] != 1 {
            return err(format!("pooling must reduce time to 1, got {} (lengths {:?})", chain[4], chain));
        }
        if self.patch == 0 || !self.resize.is_multiple_of(self.patch) {
            return err(format!("resize {} not divisible by patch {}", self.resize, self.patch));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return err(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return err("depth and mlp_ratio must be positive".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return err("alpha and beta must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err("lr must be positive".into());
        }
        Ok(())
    }
}

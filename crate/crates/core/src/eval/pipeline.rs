use std::io::Write;

use crate::connectivity::{band_weights, ChannelWeights};
use crate::dsp::{extract_bands, DEFAULT_FIR_ORDER};
use crate::error::Result;
use crate::model::{evaluate, train, FcdnConfig, FcdnModel, TrainHistory, N_BANDS};
use crate::rng::derive_seed;
use crate::{BandSpec, EpochSet};

use super::{augment_gaussian, kfold};

/// Preprocessing and weighting choices shared by every protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub bands: Vec<BandSpec>,
    pub fir_order: usize,
    /// Training-set size multiplier; 1 disables augmentation.
    pub augment_factor: usize,
    pub sigma_rel: f64,
    /// Weight channels by phase locking; `false` uses unit weights.
    pub use_fc: bool,
}

impl Default for Pipeline {
    fn default() -> Self {
        Self {
            bands: BandSpec::standard(),
            fir_order: DEFAULT_FIR_ORDER,
            augment_factor: 1,
            sigma_rel: 0.05,
            use_fc: true,
        }
    }
}

/// A trained model with its training curve.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: FcdnModel,
    pub history: TrainHistory,
}

impl Pipeline {
    pub fn band_sets(&self, set: &EpochSet) -> Result<Vec<EpochSet>> {
        extract_bands(set, &self.bands, self.fir_order)
    }

    /// Channel weights from `train` alone, or unit weights without FC.
    pub fn weights(&self, train: &EpochSet) -> Result<Vec<ChannelWeights>> {
        if self.use_fc {
            band_weights(train, &self.bands, self.fir_order)
        } else {
            Ok((0..N_BANDS).map(|_| ChannelWeights::ones(train.n_channels())).collect())
        }
    }

    /// Augments `train`, derives the channel weights from it and trains a
    /// fresh model seeded by `config.seed`.
    pub fn fit(
        &self,
        config: &FcdnConfig,
        train_set: &EpochSet,
        val: &EpochSet,
        teacher: Option<&FcdnModel>,
        log: Option<&mut dyn Write>,
    ) -> Result<Fitted> {
        let train_set = augment_gaussian(train_set, self.augment_factor, self.sigma_rel, derive_seed(config.seed, 11))?;
        let weights = self.weights(&train_set)?;
        let mut model = FcdnModel::build(config, weights, config.seed)?;
        let history = train(&mut model, teacher, &self.band_sets(&train_set)?, &self.band_sets(val)?, log)?;
        Ok(Fitted { model, history })
    }

    /// Accuracy of `model` on `set`.
    pub fn accuracy(&self, model: &FcdnModel, set: &EpochSet) -> Result<f64> {
        Ok(evaluate(model, &self.band_sets(set)?)?.1)
    }
}

/// Splits a training set into a training part and a validation fifth,
/// stratified and grouped by origin.
pub fn carve_validation(set: &EpochSet, seed: u64) -> Result<(EpochSet, EpochSet)> {
    let fold = kfold(set, 5, seed)?.swap_remove(0);
    Ok((set.select(&fold.train)?, set.select(&fold.test)?))
}

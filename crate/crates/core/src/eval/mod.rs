//! Evaluation protocols: Gaussian augmentation, origin-grouped splits,
//! accuracy, the paired permutation test and the pseudo-online replay.

mod augment;
mod online;
mod pipeline;
mod split;
mod stats;

pub use augment::augment_gaussian;
pub use online::{pseudo_online, window_schedule, FcdnWindowClassifier, OnlineSpec, PseudoOnlineResult, TrialOutcome, WindowClassifier};
pub use pipeline::{carve_validation, Fitted, Pipeline};
pub use split::{kfold, loso, split_62_2, SplitPlan};
pub use stats::{accuracy, permutation_test_paired, EXACT_MAX_N};

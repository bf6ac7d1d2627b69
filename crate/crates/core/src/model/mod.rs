//! The FCDN network: per-band convolution blocks on connectivity-weighted
//! input, bicubic fusion into a three-plane map and a distillation-token
//! transformer, with its training loop.

mod config;
mod distill;
mod net;
mod train;

pub use config::{DistillSign, FcdnConfig};
pub use distill::{dist_token_attention, distill_loss, group_average, pool_tokens, StudentStates, N_PREFIX};
pub use net::{FcdnModel, ForwardOut, Mode, N_BANDS};
pub use train::{evaluate, train, train_teacher, EpochRecord, TrainHistory};

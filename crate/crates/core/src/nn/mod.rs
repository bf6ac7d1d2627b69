//! Shaped tensors, reverse-mode differentiation and the neural primitives
//! the model is built from.

mod bicubic;
mod checkpoint;
mod conv;
mod direct;
mod fftconv;
mod gemm;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod tensor;

pub use bicubic::{bicubic_resize, cubic_kernel, CUBIC_A};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_MAGIC};
pub use gemm::Precision;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{BnStats, Grads, Graph, Padding, Var, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use layers::{encoder_block, self_attention, BlockVars};
pub use optim::{param_grads, AdamState, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;

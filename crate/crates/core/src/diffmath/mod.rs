//! Minimal differentiable-computation core.
//!
//! Every network in the crate is a composition of [`Dense`] layers and ELU
//! activations with a hand-written backward pass. Correctness of those backward
//! passes is established by [`grad_check`] against central differences.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
mod ops;
mod params;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, Differentiable, GradCheckReport};
pub use mlp::{Dense, Mlp, MlpCache};
pub use ops::{dense_forward, elu, elu_grad, elu_scalar, log_softmax, softmax};
pub use params::{Param, ParamStore};

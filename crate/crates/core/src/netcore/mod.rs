//! Small dense networks with reverse-mode gradients, Adam, Polyak
//! averaging, a finite-difference oracle and a binary checkpoint container.

mod batch;
pub mod checkpoint;
mod gradcheck;
mod mlp;
mod optim;

pub use batch::Batch;
pub use checkpoint::{Checkpoint, Entry};
pub use gradcheck::{finite_diff_flat, finite_diff_grad, max_relative_error, Parameters};
pub use mlp::{clip_global_norm, Activation, Dense, LayerGrads, Mlp, MlpGrads, Tape};
pub use optim::{polyak_update, AdamConfig, AdamState};

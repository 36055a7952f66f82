//! Small dense neural-network toolkit: matrices, a reverse-mode tape,
//! transformer layers, Adam and binary checkpoints.

mod checkpoint;
mod layers;
mod matrix;
mod optim;
mod tape;

pub use checkpoint::{config_hash, Checkpoint};
pub use layers::{sinusoidal_embedding, uniform_init, Embedding, LayerNorm, Linear, TransformerLayer};
pub use matrix::{Matrix, SparseMatrix};
pub use optim::{Adam, AdamConfig};
pub use tape::{Grads, ParamKey, ParamStore, Tape, Var};

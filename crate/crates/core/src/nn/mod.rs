//! Minimal neural-network building blocks over `candle_core` tensors: seeded named
//! parameters, layers, Adam, and the checkpoint archive format.

mod adam;
mod archive;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig};
pub use archive::{peek_magic, Archive};
pub use layers::{
    attention, softmax_last, timestep_embedding, Conv2d, Embedding, GroupNorm, LayerNorm, Linear,
};
pub use params::{Grads, ParamBuilder, ParamStore};

//! Small trainable networks with hand-derived gradients.

pub mod adam;
pub mod layers;
pub mod checkpoint;
pub mod nets;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use layers::{rope_rotate, Activation, AttentionBlock, Dense, LayerNorm, Module, Param, RopeAttention};
pub use nets::{AnchorNet, Buffers, HeadKind, NetConfig, Standardizer, VelocityNet};

//! Differentiable layers and embedding-stack descriptions.

pub mod checkpoint;
pub mod config;
pub mod layers;

pub use checkpoint::{Checkpoint, CheckpointEntry};
pub use config::{EmbeddingConfig, LayerDesc, PresetOptions, ShapeRow};
pub use layers::{maxpool_forward, BatchNormLayer, BnVars, ConvLayer, ConvVars};

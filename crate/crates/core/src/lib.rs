//! Audio-visual voxel reconstruction at desk scale.
//!
//! The crate generates impact sounds for procedurally built voxel objects,
//! turns them into mel spectrograms, encodes image and spectrogram sequences
//! with convolutional-LSTM autoencoders, fuses the modalities, and decodes a
//! 30x30x30 occupancy grid plus an audio-derived material label. Everything
//! runs on the CPU with deterministic, seed-driven results.

pub mod audio;
pub mod datagen;
pub mod error;
pub mod voxel;
pub mod image;
pub mod material;
pub mod model;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
pub use voxel::VoxelGrid;
pub use material::Material;
pub use tensor::Tensor;

//! Desk-scale image classification pipeline: a windowed cosine-attention
//! classifier trained with strong augmentation and batch mixing, continuous
//! fine-tuning per data subset, test-time augmentation, and k-fold
//! prediction averaging ("data soups").

pub mod analysis;
pub mod augment;
pub mod data;
pub mod ensemble;
pub mod mix_loss;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

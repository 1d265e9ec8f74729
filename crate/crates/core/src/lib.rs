//! Prompt learning with dynamic anchor tokens on a synthetic world.
//!
//! A toy CLIP-like [`EncoderStack`] is pretrained contrastively on a
//! [`SynthWorld`], frozen, and then adapted to base classes through learnable
//! soft tokens. Anchor tokens distilled from class descriptions are placed by a
//! learned position matrix and also act as a teacher for novel classes.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod pretrain;
pub mod prompt;
pub mod rng;
pub mod train;
pub mod world;

pub use encoder::{classify, EncoderConfig, EncoderStack, Feature, PredictionDistribution};
pub use error::{Error, Result};
pub use pretrain::{pretrain_contrastive, PretrainConfig, PretrainReport};
pub use world::{
    base_novel_split, generate_descriptions, generate_world, sample_dataset, shift_world,
    LabeledSample, Preposition, Shift, Split, SynthWorld, WorldConfig,
};

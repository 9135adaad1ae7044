//! Adapting 2D-pretrained vision transformers to 3D volumes.
//!
//! A volume's slices are tokenized like ordinary images; the pretrained 2D
//! position-embedding grid is replicated per slice (and resized when the
//! slice grid differs), after which the standard encoder runs on the whole
//! 3D token sequence. Around the model sit the cohort tooling (case-control
//! matching, pair-atomic six-fold cross-validation, AdamW training), the
//! evaluation statistics, attention-rollout heatmaps and a portable tensor
//! archive format.

pub mod checkpoint;
pub mod cohort;
pub mod encoder;
pub mod error;
pub mod rng;
pub mod rollout;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};

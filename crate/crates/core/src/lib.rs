//! Multimedia event extraction: cross-modality augmentation, adapter-based
//! fusion of text and image encoders, staged training, coreference and scoring.

pub mod augmentation;
pub mod cli;
pub mod clients;
pub mod config;
pub mod coref_eval;
pub mod data_model;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod model;
pub mod objects;
pub mod pipeline;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

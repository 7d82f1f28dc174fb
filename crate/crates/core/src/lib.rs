//! Language-guided keypoint localization at desk scale.
//!
//! A patch transformer encodes a stick-figure image, a connector maps the patch
//! features into the decoder's embedding space, and a causal character-level
//! decoder answers `"... Where is the left wrist of this person? Answer:"` with
//! `" x=0.ddd,y=0.ddd"`.

pub mod checkpoint;
pub mod connector;
pub mod config;
pub mod error;
pub mod expressivity;
pub mod language_decoder;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod prompt_codec;
pub mod synth_data;
pub mod trainer;
pub mod tensor;
pub mod vision_encoder;

pub use error::{Error, Result};

//! Subject-aware conditioning and domain fine-tuning for text-to-image models
//! on abstractive news captions, together with the caption/image curation
//! pipeline that produces the training and evaluation data.

pub mod conditioning;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod generation;
pub mod grounding;
pub mod imaging;
pub mod pipeline;
pub mod subjects;
pub mod synthetic;
pub mod text;
pub mod trainer;
pub mod zoo;

pub use error::{Error, Result};

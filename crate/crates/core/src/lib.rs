//! Prototype-based image classification on a small vision transformer.
//!
//! The encoder records head-averaged attention, rolls it out to score each
//! image token's influence on the class token, and masks the final layer to
//! the top-K tokens. Global prototypes compare against the class token,
//! local prototypes against the preserved image tokens, and a concentration
//! loss fits a Gaussian to every local similarity map to keep prototypes
//! compact and apart.

pub mod autodiff;
pub mod checkpoint;
pub mod concentration;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod prototype;
pub mod rollout;
pub mod tensor;
pub mod train;
pub mod visualize;
pub mod vit;
mod wire;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

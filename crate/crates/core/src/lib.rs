//! Flow matching in representation-autoencoder token spaces, built small
//! enough to verify on a laptop CPU.

pub mod conditioning;
pub mod datagen;
pub mod denoiser;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod harness;
pub mod latent;
pub mod nn;
pub mod rae;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod tts;

pub use error::{Error, Result};

//! Face frontalization from a single profile image.
//!
//! A correspondence network predicts where every frontal pixel lives on the
//! face surface (a UV field), a texture autoencoder recovers the surface
//! appearance, and a renderer composes both into the frontal view. Training
//! combines reconstruction, correspondence, identity-perceptual and two
//! adversarial signals, one of which discriminates residual dictionary
//! encodings of the texture features.

pub mod ardl;
pub mod cli;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod losses;
pub mod models;
pub mod optim;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod warpcore;

pub use error::{Error, Result};

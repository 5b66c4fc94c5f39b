//! Diagnosis justification pipeline for 2-class chest images.
//!
//! The pipeline learns a continuous sentence embedding for "label: findings"
//! descriptions with an adversarially regularized autoencoder, generates
//! images from (embedding ++ noise) representations with a two-stage
//! conditional GAN, inverts images back to representations with a
//! convolutional mapper, and at inference time searches representation space
//! for the nearest counterfactual: an image of the same subject under the
//! alternative diagnosis.
//!
//! Modules follow the processing order: [`corpus`] and [`synthdata`] provide
//! data, [`arae`] the text embedding, [`t2igan`] the image generator,
//! [`invmap`] the image-to-representation projection, [`counterfactual`] the
//! inference-time search, and [`evalsuite`] all quantitative evaluation.

pub mod error;
pub mod corpus;
pub mod synthdata;
pub mod arae;
pub mod t2igan;
pub mod invmap;
pub mod counterfactual;
pub mod evalsuite;
pub mod config;
pub mod checkpoint;
pub mod manifest;
pub mod imgutil;

pub use error::{Error, Result};

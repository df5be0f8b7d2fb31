//! Neural-field cone-beam CT reconstruction.
//!
//! A hash-grid encoder feeds an optional layer normalization and a small MLP
//! that predicts attenuation at any point of the volume. The field is trained
//! from simulated cone-beam projections through the Beer–Lambert line
//! integral. The LN+MLP part of a field pre-trained on one volume can be
//! transferred to initialize new reconstructions.
//!
//! Module map:
//! - [`nn`]: dense layers, layer norm, MLP, Adam.
//! - [`encoding`]: multiresolution hash grid and spectral channel masking.
//! - [`field`]: the composed field, checkpoints, stability probe.
//! - [`geometry`], [`phantom`], [`projector`]: the scanner simulator.
//! - [`training`]: voxel-loss pre-training and pixel-loss reconstruction.
//! - [`metrics`]: PSNR, SSIM, PCA feature maps, stability curves.
//! - [`io`] and [`cli`]: file formats and the command-line workflow.

pub mod cli;
pub mod encoding;
pub mod error;
pub mod field;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod projector;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

/// 3-vector used for points and directions, in millimetres.
pub type Vec3 = nalgebra::Vector3<f64>;

//! Spectral reconstruction toolkit.
//!
//! Reconstructs hyperspectral cubes from RGB images with small trainable
//! networks and evaluates reconstruction fidelity with MAE, RMSE, PSNR, SAM,
//! SSIM and MRAE over the full, visible and extended wavelength ranges.
//! A synthetic paired-data generator makes the whole pipeline runnable
//! without any external dataset.

pub mod cube;
pub mod fsio;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod train;
pub mod verify;

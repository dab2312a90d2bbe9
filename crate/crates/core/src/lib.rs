//! Multi-task self-supervised training for histology patch classification.
//!
//! A shared convolutional encoder is trained jointly on a labelled main task
//! and pluggable pretext tasks (rotation, flipping, reconstruction,
//! magnification, magnification puzzle, hematoxylin regression, real-vs-fake,
//! adversarial domain prediction). The crate also ships a procedural slide
//! generator, stain deconvolution, AUC evaluation with annotation-budget
//! sweeps and a slide-level heat-map scoring pipeline.

pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod imageops;
pub mod model;
pub mod nn;
pub mod par;
pub mod pretext;
pub mod run;
pub mod stainsep;
pub mod trainer;
pub mod wsiheat;

pub use error::{Error, Result};

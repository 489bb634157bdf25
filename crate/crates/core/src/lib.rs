//! Dermatoscopic lesion classification pipeline.
//!
//! The crate is organised along the stages of the pipeline:
//!
//! * [`dataset`]: manifest ingestion, label encoding, age imputation and the
//!   train/validation split.
//! * [`image`]: raster loading, bilinear resizing and normalization.
//! * [`augment`]: class capping, class weights and seeded affine augmentation.
//! * [`model`]: the Inception-ResNet network, its execution engine and the
//!   checkpoint format.
//! * [`training`]: weighted cross-entropy, Nesterov SGD and the early-stopped
//!   two-phase training loop.
//! * [`metrics`]: accuracy, confusion matrices and per-class recall.
//! * [`synthetic`]: a generator for small imbalanced shape datasets that stand
//!   in for the real corpus at desk scale.

pub mod augment;
pub mod classes;
pub mod dataset;
pub mod image;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod synthetic;
pub mod training;

pub use classes::{LesionClass, CLASS_NAMES, NUM_CLASSES};

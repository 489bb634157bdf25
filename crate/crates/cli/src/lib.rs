//! Command-line orchestration of the lesion classification pipeline.

pub mod commands;
pub mod config;
pub mod context;
pub mod data;

use dermclass::augment::AugmentError;
use dermclass::dataset::DatasetError;
use dermclass::image::ImageError;
use dermclass::model::ModelError;
use dermclass::training::TrainError;

/// A short machine-readable tag for the deepest recognised cause of `err`.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return match e {
                ModelError::ShapeMismatch(_) => "shape_mismatch",
                ModelError::ShapeUnderflow { .. } => "shape_underflow",
                ModelError::VersionMismatch { .. } => "version_mismatch",
                ModelError::CorruptFile(_) => "corrupt_checkpoint",
                ModelError::OutOfRange { .. } | ModelError::InvalidConfig(_) => "invalid_config",
                ModelError::Io(_) => "io",
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::ShapeMismatch(_) => "shape_mismatch",
                TrainError::EmptyValidation => "empty_validation",
                TrainError::EmptyTraining => "empty_training",
                TrainError::InvalidConfig(_) => "invalid_config",
                TrainError::Io(_) => "io",
                TrainError::Model(m) => match m {
                    ModelError::ShapeMismatch(_) => "shape_mismatch",
                    _ => "model",
                },
                TrainError::Augment(_) => "augment",
            };
        }
        if cause.downcast_ref::<DatasetError>().is_some() {
            return "dataset";
        }
        if cause.downcast_ref::<ImageError>().is_some() {
            return "image";
        }
        if cause.downcast_ref::<AugmentError>().is_some() {
            return "augment";
        }
        if cause.downcast_ref::<context::Locked>().is_some() {
            return "locked";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "config";
        }
    }
    if err.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some()) {
        return "io";
    }
    "error"
}

/// The single JSON line printed on standard error when a command fails.
pub fn error_line(err: &anyhow::Error) -> String {
    serde_json::json!({
        "error": error_kind(err),
        "message": format!("{err:#}"),
    })
    .to_string()
}

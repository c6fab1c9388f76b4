//! Conformal sufficient explanations for image classifiers.
//!
//! Per-pixel attributions are turned into masks that keep the classifier's
//! prediction with a chosen confidence. A calibration set yields one
//! conformity score per instance; a split-conformal quantile of those scores
//! gives a global threshold that is applied to new instances.

pub mod conformal;
pub mod conformity;
pub mod dataset;
pub mod digest;
pub mod error;
pub mod evaluation;
mod json_float;
pub mod predictor;
pub mod segmentation;
pub mod tensor;

pub use conformal::{calibrate_threshold, explain, CalibrationArtifact, ExplanationMask};
pub use conformity::{ConformityKind, ConformityScore, TauGrid, TauGridMode};
pub use dataset::{DatasetManifest, Instance};
pub use error::{Error, Result};
pub use predictor::{Baseline, PredictionVector, Predictor, PredictorHandle};
pub use segmentation::SegmentationMap;
pub use tensor::{AttributionMap, ImageTensor, PixelMask};

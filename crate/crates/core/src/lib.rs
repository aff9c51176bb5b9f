//! Self-training toolkit for universal lesion detection and tagging.
//!
//! The pipeline: build patient-disjoint splits from a DeepLesion-style
//! index ([`dataset`]), train a detector on the labeled split, mine
//! confident predictions on unlabeled slices as pseudo-labels under a
//! per-round threshold schedule ([`policy`], [`mining`]), rebalance
//! classes by repeating slices, retrain, and evaluate each round with
//! FROC sensitivity at 4 false positives per image ([`eval`]). Detectors
//! sit behind [`detector::DetectorBackend`]; a synthetic backend makes the
//! whole loop runnable on a laptop.

pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod mining;
pub mod policy;
pub mod reports;
pub mod scenario;

pub use config::RunConfig;
pub use dataset::{Annotation, LesionTag, Provenance, SliceKey, SliceRecord, SplitSet};
pub use detector::{DetectorBackend, ModelHandle, Predictions};
pub use error::{BackendError, Error, Result};
pub use eval::{EvalConfig, SensitivityReport};
pub use fusion::{weighted_boxes_fusion, Detection, FusionConfig};
pub use geometry::{iou, BBox};
pub use mining::{run_self_training, MiningRoundState, RunDir, SelfTrainConfig};
pub use policy::ThresholdPolicy;

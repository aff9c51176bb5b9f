//! Detector backend contract.
//!
//! The orchestrator never trains or runs a network itself; it hands a
//! training manifest to a backend and asks it for predictions. Two
//! backends ship with the crate: [`SyntheticBackend`], a deterministic
//! simulator with hidden ground truth, and [`ExternalBackend`], which drives
//! a child process over a line-delimited JSON protocol.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{SliceKey, SliceRecord};
use crate::error::BackendError;
use crate::fusion::{weighted_boxes_fusion, Detection, FusionConfig};

pub mod external;
pub mod protocol;
pub mod stub;
pub mod synthetic;

pub use external::{ExternalBackend, ExternalConfig};
pub use synthetic::{SyntheticBackend, SyntheticConfig};

/// Opaque reference to a trained model (or one epoch of it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub id: String,
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u32>,
    /// Backend-owned location, typically a model directory.
    pub location: String,
    /// Backend-private state needed to reuse the handle after a restart.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub state: serde_json::Value,
}

pub struct TrainRequest<'a> {
    pub round: u32,
    pub records: &'a [SliceRecord],
    /// Manifest file holding `records`, for backends that read from disk.
    pub manifest: &'a Path,
    pub out_dir: &'a Path,
}

pub type Predictions = BTreeMap<SliceKey, Vec<Detection>>;

pub trait DetectorBackend {
    /// Trains a fresh model (never warm-started) on the request's manifest.
    fn train(&mut self, req: &TrainRequest<'_>) -> Result<ModelHandle, BackendError>;

    /// Predicts on `slices`. Must be deterministic for a fixed handle and
    /// must not return keys outside `slices`.
    fn predict(&mut self, model: &ModelHandle, slices: &[SliceKey]) -> Result<Predictions, BackendError>;

    /// Up to five epoch checkpoints ordered best first. The default treats
    /// the model as its own single-member ensemble.
    fn epoch_ensemble(&mut self, model: &ModelHandle) -> Result<Vec<ModelHandle>, BackendError> {
        Ok(vec![model.clone()])
    }
}

impl<B: DetectorBackend + ?Sized> DetectorBackend for Box<B> {
    fn train(&mut self, req: &TrainRequest<'_>) -> Result<ModelHandle, BackendError> {
        (**self).train(req)
    }

    fn predict(&mut self, model: &ModelHandle, slices: &[SliceKey]) -> Result<Predictions, BackendError> {
        (**self).predict(model, slices)
    }

    fn epoch_ensemble(&mut self, model: &ModelHandle) -> Result<Vec<ModelHandle>, BackendError> {
        (**self).epoch_ensemble(model)
    }
}

/// Rejects predictions for slices that were not asked for.
pub fn check_prediction_keys(slices: &[SliceKey], preds: &Predictions) -> Result<(), BackendError> {
    let asked: std::collections::BTreeSet<&SliceKey> = slices.iter().collect();
    match preds.keys().find(|k| !asked.contains(k)) {
        Some(k) => Err(BackendError::Other(format!(
            "backend returned predictions for unrequested slice {k}"
        ))),
        None => Ok(()),
    }
}

/// Fuses the predictions of several models slice by slice with WBF,
/// using `model_count = models.len()`.
pub fn predict_fused(
    backend: &mut dyn DetectorBackend,
    models: &[ModelHandle],
    slices: &[SliceKey],
    fusion: &FusionConfig,
) -> Result<Predictions, crate::error::Error> {
    let mut per_model = Vec::with_capacity(models.len());
    for m in models {
        let p = backend.predict(m, slices)?;
        check_prediction_keys(slices, &p)?;
        per_model.push(p);
    }
    let cfg = fusion.with_model_count(models.len().max(1));
    let mut out = Predictions::new();
    for key in slices {
        let lists: Vec<Vec<Detection>> = per_model
            .iter()
            .map(|p| p.get(key).cloned().unwrap_or_default())
            .collect();
        let fused = weighted_boxes_fusion(&lists, &cfg)?;
        if !fused.is_empty() {
            out.insert(key.clone(), fused);
        }
    }
    Ok(out)
}

/// Predicts with the epoch ensemble of `model`, fused by WBF.
pub fn predict_ensemble(
    backend: &mut dyn DetectorBackend,
    model: &ModelHandle,
    slices: &[SliceKey],
    fusion: &FusionConfig,
) -> Result<Predictions, crate::error::Error> {
    let members = backend.epoch_ensemble(model)?;
    if members.is_empty() {
        return Err(BackendError::Other(format!("model {} has an empty epoch ensemble", model.id)).into());
    }
    predict_fused(backend, &members, slices, fusion)
}

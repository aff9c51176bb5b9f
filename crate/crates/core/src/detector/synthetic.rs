//! Deterministic simulated detector for desk-scale runs.
//!
//! Training only counts lesions per class (with upsampling multiplicity)
//! and maps each count `n` to a per-class sensitivity
//! `p = p0 + (1 - p0) * (1 - exp(-n / kappa))`. Prediction replays hidden
//! ground truth: each true lesion is emitted with probability `p`, with a
//! jittered box and a confidence drawn around `p`, plus Poisson false
//! positives at low confidence. Every random draw is derived from the seed
//! and the slice key, so the same lesion sees the same uniform and normal
//! draws under every model; a model with higher sensitivity therefore
//! detects a superset of what a weaker model detects.

use std::collections::BTreeMap;
use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DetectorBackend, ModelHandle, Predictions, TrainRequest};
use crate::dataset::{class_counts, ClassCounts, LesionTag, SliceKey, SliceRecord, SplitSet};
use crate::error::{BackendError, Error, Result};
use crate::fusion::Detection;
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Sensitivity of an untrained model, per class.
    pub base_sensitivity: BTreeMap<LesionTag, f64>,
    /// Training-count scale of the sensitivity curve.
    pub kappa: f64,
    /// Standard deviation of the confidence around the class sensitivity.
    pub confidence_noise: f64,
    /// Expected false positives per slice.
    pub false_positive_rate: f64,
    /// Box jitter as a fraction of box width/height.
    pub box_jitter: f64,
    /// Members of the simulated epoch ensemble.
    pub epochs: u32,
    /// Standard deviation of the per-epoch sensitivity perturbation.
    pub epoch_spread: f64,
    /// Side of the square image, for false-positive placement.
    pub image_size: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            base_sensitivity: LesionTag::TAGGED.iter().map(|t| (*t, 0.5)).collect(),
            kappa: 100.0,
            confidence_noise: 0.1,
            false_positive_rate: 1.0,
            box_jitter: 0.05,
            epochs: 5,
            epoch_spread: 0.02,
            image_size: 512.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic backend: {m}")));
        if let Some((t, p)) = self.base_sensitivity.iter().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return bad(format!("base sensitivity {p} for {t} outside [0, 1]"));
        }
        if !(self.kappa > 0.0) {
            return bad("kappa must be positive".into());
        }
        if !(self.confidence_noise >= 0.0) || !(self.false_positive_rate >= 0.0) {
            return bad("noise and false-positive rate must be non-negative".into());
        }
        if !(0.0..0.5).contains(&self.box_jitter) {
            return bad("box_jitter must lie in [0, 0.5)".into());
        }
        if self.epochs == 0 || self.epochs > 5 {
            return bad("epochs must be 1..=5".into());
        }
        if !(self.epoch_spread >= 0.0) || !(self.image_size > 60.0) {
            return bad("epoch_spread must be >= 0 and image_size > 60".into());
        }
        Ok(())
    }

    pub fn base(&self, tag: LesionTag) -> f64 {
        self.base_sensitivity.get(&tag).copied().unwrap_or(0.5)
    }

    /// `p0 + (1 - p0) * (1 - exp(-n / kappa))`.
    pub fn sensitivity(&self, tag: LesionTag, n: usize) -> f64 {
        let p0 = self.base(tag);
        p0 + (1.0 - p0) * (1.0 - (-(n as f64) / self.kappa).exp())
    }
}

/// What a synthetic "training run" produces; stored in the handle state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModel {
    pub counts: ClassCounts,
    pub sensitivity: BTreeMap<LesionTag, f64>,
}

impl SyntheticModel {
    pub fn p(&self, tag: LesionTag) -> f64 {
        self.sensitivity.get(&tag).copied().unwrap_or(0.0)
    }
}

pub type Truth = BTreeMap<SliceKey, Vec<(BBox, LesionTag)>>;

pub struct SyntheticBackend {
    cfg: SyntheticConfig,
    truth: Truth,
}

/// FNV-1a over the parts, then seeded into ChaCha8; stable across
/// platforms and toolchains.
pub(crate) fn stream(seed: u64, key: &SliceKey, label: &str, index: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    eat(&seed.to_le_bytes());
    eat(key.patient_id.as_bytes());
    eat(key.study_id.as_bytes());
    eat(key.series_id.as_bytes());
    eat(&key.slice_index.to_le_bytes());
    eat(label.as_bytes());
    eat(&index.to_le_bytes());
    ChaCha8Rng::seed_from_u64(h)
}

impl SyntheticBackend {
    pub fn new(cfg: SyntheticConfig, truth: Truth) -> Result<Self> {
        cfg.validate()?;
        Ok(SyntheticBackend { cfg, truth })
    }

    /// Hidden truth from every split, including the boxes stripped from
    /// the unlabeled pool.
    pub fn from_splits(cfg: SyntheticConfig, splits: &SplitSet) -> Result<Self> {
        let mut truth = Truth::new();
        for r in splits
            .f_tr
            .iter()
            .chain(&splits.f_v)
            .chain(&splits.f_t)
            .chain(&splits.o_tr_stripped)
        {
            let v: Vec<(BBox, LesionTag)> = r
                .annotations
                .iter()
                .filter(|a| !a.provenance.is_mined())
                .map(|a| (a.bbox, a.tag))
                .collect();
            truth.insert(r.key.clone(), v);
        }
        SyntheticBackend::new(cfg, truth)
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn fit(&self, records: &[SliceRecord]) -> SyntheticModel {
        let counts = class_counts(records);
        let sensitivity = LesionTag::TAGGED
            .iter()
            .map(|t| (*t, self.cfg.sensitivity(*t, counts.get(*t))))
            .collect();
        SyntheticModel { counts, sensitivity }
    }

    fn model_of(handle: &ModelHandle) -> Result<SyntheticModel, BackendError> {
        serde_json::from_value(handle.state.clone())
            .map_err(|e| BackendError::Other(format!("handle {} is not a synthetic model: {e}", handle.id)))
    }

    fn epoch_model(&self, base: &SyntheticModel, epoch: u32) -> SyntheticModel {
        if epoch == 0 {
            return base.clone();
        }
        let sensitivity = LesionTag::TAGGED
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut rng = stream(self.cfg.seed, &SliceKey::new("", "", "", 0), "epoch", u64::from(epoch) * 16 + i as u64);
                let z: f64 = StandardNormal.sample(&mut rng);
                (*t, (base.p(*t) + self.cfg.epoch_spread * z).clamp(0.0, 1.0))
            })
            .collect();
        SyntheticModel {
            counts: base.counts,
            sensitivity,
        }
    }

    /// Deterministic predictions of `model` on one slice.
    pub fn predict_slice(&self, model: &SyntheticModel, key: &SliceKey) -> Vec<Detection> {
        let cfg = &self.cfg;
        let mut out = Vec::new();
        if let Some(lesions) = self.truth.get(key) {
            for (i, (bbox, tag)) in lesions.iter().enumerate() {
                if !tag.is_tagged() {
                    continue;
                }
                let mut rng = stream(cfg.seed, key, "lesion", i as u64);
                let u: f64 = rng.random();
                let z: f64 = StandardNormal.sample(&mut rng);
                let jit: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
                let p = model.p(*tag);
                if u >= p {
                    continue;
                }
                let (w, h) = (bbox.width(), bbox.height());
                let jb = BBox {
                    x_min: bbox.x_min + cfg.box_jitter * w * jit[0],
                    y_min: bbox.y_min + cfg.box_jitter * h * jit[1],
                    x_max: bbox.x_max + cfg.box_jitter * w * jit[2],
                    y_max: bbox.y_max + cfg.box_jitter * h * jit[3],
                };
                let score = (p + cfg.confidence_noise * z).clamp(0.0, 1.0);
                out.push(Detection::new(jb, *tag, score));
            }
        }
        if cfg.false_positive_rate > 0.0 {
            let mut rng = stream(cfg.seed, key, "fp", 0);
            let n = Poisson::new(cfg.false_positive_rate)
                .map(|d| d.sample(&mut rng) as usize)
                .unwrap_or(0);
            for _ in 0..n {
                let w = rng.random_range(10.0..60.0);
                let h = rng.random_range(10.0..60.0);
                let x = rng.random_range(0.0..cfg.image_size - w);
                let y = rng.random_range(0.0..cfg.image_size - h);
                let tag = LesionTag::TAGGED[rng.random_range(0..8)];
                let score = rng.random_range(0.0..0.6);
                out.push(Detection::new(
                    BBox {
                        x_min: x,
                        y_min: y,
                        x_max: x + w,
                        y_max: y + h,
                    },
                    tag,
                    score,
                ));
            }
        }
        out
    }
}

impl DetectorBackend for SyntheticBackend {
    fn train(&mut self, req: &TrainRequest<'_>) -> Result<ModelHandle, BackendError> {
        if req.records.is_empty() {
            return Err(BackendError::Other("cannot train on an empty manifest".into()));
        }
        let model = self.fit(req.records);
        let state = serde_json::to_value(&model).map_err(|e| BackendError::Other(e.to_string()))?;
        fs::create_dir_all(req.out_dir).map_err(BackendError::Pipe)?;
        let body = serde_json::to_string_pretty(&model).map_err(|e| BackendError::Other(e.to_string()))?;
        fs::write(req.out_dir.join("model.json"), body).map_err(BackendError::Pipe)?;
        Ok(ModelHandle {
            id: format!("synthetic-round{}", req.round),
            round: req.round,
            epoch: None,
            location: format!("round_{}/model", req.round),
            state,
        })
    }

    fn predict(&mut self, handle: &ModelHandle, slices: &[SliceKey]) -> Result<Predictions, BackendError> {
        let base = Self::model_of(handle)?;
        let model = self.epoch_model(&base, handle.epoch.unwrap_or(0));
        let mut out = Predictions::new();
        for key in slices {
            let dets: Vec<Detection> = self
                .predict_slice(&model, key)
                .into_iter()
                .map(|d| d.with_model(handle.id.clone()))
                .collect();
            if !dets.is_empty() {
                out.insert(key.clone(), dets);
            }
        }
        Ok(out)
    }

    fn epoch_ensemble(&mut self, handle: &ModelHandle) -> Result<Vec<ModelHandle>, BackendError> {
        Ok((0..self.cfg.epochs)
            .map(|e| ModelHandle {
                id: format!("{}-epoch{e}", handle.id),
                epoch: Some(e),
                ..handle.clone()
            })
            .collect())
    }
}

//! Self-training orchestration: predict on the unlabeled pool, keep
//! confident predictions as pseudo-labels, merge them into the training
//! set, optionally rebalance, and retrain from scratch.
//!
//! Run directory layout:
//!
//! ```text
//! run.json                    configuration echo
//! round_<k>/manifest.jsonl    training set of round k (with repeat counts)
//! round_<k>/mined.jsonl       annotations newly mined in round k
//! round_<k>/predictions.jsonl raw candidate predictions on the mining pool
//! round_<k>/metrics.json      evaluation on the test split
//! round_<k>/state.json        round header; written last, marks the round complete
//! round_<k>/model/            backend-owned
//! ensemble/metrics.json       round-ensemble evaluation
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    read_manifest, upsample_balance, write_manifest, Annotation, ClassCounts, LesionTag, SliceKey,
    SliceRecord, SplitSet, UpsampleReport,
};
use crate::detector::protocol::write_predictions;
use crate::detector::{predict_ensemble, predict_fused, DetectorBackend, ModelHandle, Predictions, TrainRequest};
use crate::error::{Error, Result};
use crate::eval::{evaluate, images_from, EvalConfig, Evaluation};
use crate::fusion::{Detection, FusionConfig};
use crate::geometry::iou;
use crate::policy::ThresholdPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfTrainConfig {
    pub policy: ThresholdPolicy,
    /// Mining rounds to run; at most the policy length.
    pub rounds: u32,
    pub upsample: bool,
    /// Also mine new lesions on the labeled training slices.
    pub intra_patient_mining: bool,
    /// Predictions overlapping an existing annotation at this IoU are dropped.
    pub dedup_iou: f64,
    /// Keep predicting on pool slices that already carry mined boxes.
    pub remine_mined_slices: bool,
    /// Mine with the fused epoch ensemble instead of the best epoch alone.
    pub mine_with_ensemble: bool,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            policy: ThresholdPolicy::variable(),
            rounds: 4,
            upsample: true,
            intra_patient_mining: true,
            dedup_iou: 0.5,
            remine_mined_slices: true,
            mine_with_ensemble: true,
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if self.rounds as usize > self.policy.rounds() {
            return Err(Error::Config(format!(
                "{} rounds requested but policy {:?} defines {}",
                self.rounds,
                self.policy.name,
                self.policy.rounds()
            )));
        }
        if !(self.dedup_iou > 0.0 && self.dedup_iou <= 1.0) {
            return Err(Error::Config(format!("dedup_iou {} outside (0, 1]", self.dedup_iou)));
        }
        self.fusion.validate()?;
        self.eval.validate()
    }
}

/// Evaluation of one round (or of the round ensemble); the body of
/// `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// `None` for the round ensemble.
    pub round: Option<u32>,
    pub policy: String,
    pub per_class: BTreeMap<LesionTag, Option<f64>>,
    pub mean: f64,
    pub operating_point: f64,
    pub iou_threshold: f64,
    pub lesion_counts: ClassCounts,
    pub confusion: Vec<Vec<usize>>,
    /// `(fp_per_image, sensitivity)` at the configured FROC points.
    pub froc: Vec<(f64, f64)>,
}

impl RoundMetrics {
    pub fn from_evaluation(round: Option<u32>, policy: &str, cfg: &EvalConfig, e: &Evaluation) -> Self {
        RoundMetrics {
            round,
            policy: policy.to_string(),
            per_class: e.report.per_class.clone(),
            mean: e.report.mean,
            operating_point: e.report.operating_point,
            iou_threshold: cfg.iou_threshold,
            lesion_counts: e.report.lesion_counts,
            confusion: e.confusion.counts.iter().map(|r| r.to_vec()).collect(),
            froc: e.froc_points.clone(),
        }
    }

    pub fn get(&self, tag: LesionTag) -> Option<f64> {
        self.per_class.get(&tag).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningRoundState {
    pub round: u32,
    /// Confidence threshold used to mine this round (`None` for round 0).
    pub threshold: Option<f64>,
    /// Training set of this round with upsampling multiplicity applied.
    pub training_set: Vec<SliceRecord>,
    /// Mined lesions held in the training set, per predicted tag.
    pub mined_counts: ClassCounts,
    /// Lesions newly mined in this round.
    pub new_mined: ClassCounts,
    pub model: ModelHandle,
    pub best_epoch: Option<ModelHandle>,
    pub upsample: Option<UpsampleReport>,
    pub metrics: Option<RoundMetrics>,
}

impl MiningRoundState {
    /// The training set without upsampling multiplicity.
    pub fn base_set(&self) -> Vec<SliceRecord> {
        self.training_set
            .iter()
            .cloned()
            .map(|mut r| {
                r.repeat_count = 1;
                r
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RoundCheckpoint {
    round: u32,
    threshold: Option<f64>,
    mined_counts: ClassCounts,
    new_mined: ClassCounts,
    model: ModelHandle,
    best_epoch: Option<ModelHandle>,
    upsample: Option<UpsampleReport>,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_json(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn round_dir(&self, k: u32) -> PathBuf {
        self.root.join(format!("round_{k}"))
    }

    pub fn manifest(&self, k: u32) -> PathBuf {
        self.round_dir(k).join("manifest.jsonl")
    }

    pub fn mined(&self, k: u32) -> PathBuf {
        self.round_dir(k).join("mined.jsonl")
    }

    pub fn predictions(&self, k: u32) -> PathBuf {
        self.round_dir(k).join("predictions.jsonl")
    }

    pub fn metrics(&self, k: u32) -> PathBuf {
        self.round_dir(k).join("metrics.json")
    }

    pub fn state(&self, k: u32) -> PathBuf {
        self.round_dir(k).join("state.json")
    }

    pub fn model_dir(&self, k: u32) -> PathBuf {
        self.round_dir(k).join("model")
    }

    pub fn ensemble_metrics(&self) -> PathBuf {
        self.root.join("ensemble").join("metrics.json")
    }

    /// Rounds with a complete checkpoint, in order, stopping at the first gap.
    pub fn completed_rounds(&self) -> Vec<u32> {
        (0..).take_while(|k| self.state(*k).is_file()).collect()
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub(crate) fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    let mut body = serde_json::to_string_pretty(v)?;
    body.push('\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Keeps detections scoring at least `threshold`; slices left with none
/// are dropped from the map.
pub fn filter_mined(predictions: &Predictions, threshold: f64) -> Predictions {
    predictions
        .iter()
        .filter_map(|(k, dets)| {
            let kept: Vec<Detection> = dets.iter().filter(|d| d.score >= threshold).cloned().collect();
            (!kept.is_empty()).then(|| (k.clone(), kept))
        })
        .collect()
}

/// Drops predictions that overlap any existing annotation of the slice at
/// IoU `>= iou_thr`.
pub fn dedup_against_annotations(preds: &[Detection], existing: &[Annotation], iou_thr: f64) -> Vec<Detection> {
    preds
        .iter()
        .filter(|p| existing.iter().all(|a| iou(&a.bbox, &p.bbox) < iou_thr))
        .cloned()
        .collect()
}

fn train_on(
    backend: &mut dyn DetectorBackend,
    run_dir: &RunDir,
    round: u32,
    records: &[SliceRecord],
) -> Result<(ModelHandle, Option<ModelHandle>)> {
    if records.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let manifest = run_dir.manifest(round);
    let model_dir = run_dir.model_dir(round);
    mkdir(&model_dir)?;
    write_manifest(&manifest, records)?;
    let model = backend.train(&TrainRequest {
        round,
        records,
        manifest: &manifest,
        out_dir: &model_dir,
    })?;
    let best = backend.epoch_ensemble(&model)?.into_iter().next();
    Ok((model, best))
}

fn mined_counts(records: &[SliceRecord]) -> ClassCounts {
    let mut c = ClassCounts::default();
    for a in records.iter().flat_map(|r| &r.annotations) {
        if a.provenance.is_mined() {
            c.add(a.tag, 1);
        }
    }
    c
}

fn maybe_upsample(records: Vec<SliceRecord>, upsample: bool) -> Result<(Vec<SliceRecord>, Option<UpsampleReport>)> {
    if !upsample {
        return Ok((records, None));
    }
    let up = upsample_balance(&records)?;
    Ok((up.records, Some(up.report)))
}

/// Round 0: train on the labeled training split (upsampled if configured).
pub fn train_baseline(
    cfg: &SelfTrainConfig,
    backend: &mut dyn DetectorBackend,
    splits: &SplitSet,
    run_dir: &RunDir,
) -> Result<MiningRoundState> {
    let mut base: Vec<SliceRecord> = splits
        .f_tr
        .iter()
        .filter(|r| !r.annotations.is_empty())
        .cloned()
        .map(|mut r| {
            r.repeat_count = 1;
            r
        })
        .collect();
    base.sort_by(|a, b| a.key.cmp(&b.key));
    let (training_set, upsample) = maybe_upsample(base, cfg.upsample)?;
    let (model, best_epoch) = train_on(backend, run_dir, 0, &training_set)?;
    Ok(MiningRoundState {
        round: 0,
        threshold: None,
        training_set,
        mined_counts: ClassCounts::default(),
        new_mined: ClassCounts::default(),
        model,
        best_epoch,
        upsample,
        metrics: None,
    })
}

/// One mining round on top of `state`.
pub fn run_round(
    state: &MiningRoundState,
    cfg: &SelfTrainConfig,
    backend: &mut dyn DetectorBackend,
    splits: &SplitSet,
    run_dir: &RunDir,
) -> Result<MiningRoundState> {
    let round = state.round + 1;
    let threshold = cfg.policy.threshold_for_round(round)?;
    let mut base: BTreeMap<SliceKey, SliceRecord> = state
        .base_set()
        .into_iter()
        .map(|r| (r.key.clone(), r))
        .collect();

    let pool: BTreeMap<&SliceKey, &SliceRecord> = splits.o_tr.iter().map(|r| (&r.key, r)).collect();
    let mut targets: BTreeSet<SliceKey> = pool
        .keys()
        .filter(|k| cfg.remine_mined_slices || !base.contains_key(**k))
        .map(|k| (*k).clone())
        .collect();
    if cfg.intra_patient_mining {
        targets.extend(splits.f_tr.iter().map(|r| r.key.clone()));
    }
    let targets: Vec<SliceKey> = targets.into_iter().collect();

    let predictions = if cfg.mine_with_ensemble {
        predict_ensemble(backend, &state.model, &targets, &cfg.fusion)?
    } else {
        let m = state.best_epoch.as_ref().unwrap_or(&state.model);
        predict_fused(backend, std::slice::from_ref(m), &targets, &cfg.fusion)?
    };
    mkdir(&run_dir.round_dir(round))?;
    write_predictions(run_dir.predictions(round), &predictions)?;

    let mut mined_records = Vec::new();
    let mut new_mined = ClassCounts::default();
    for (key, dets) in filter_mined(&predictions, threshold) {
        let existing: &[Annotation] = base.get(&key).map_or(&[], |r| &r.annotations);
        let kept = dedup_against_annotations(&dets, existing, cfg.dedup_iou);
        if kept.is_empty() {
            continue;
        }
        let anns: Vec<Annotation> = kept
            .iter()
            .map(|d| Annotation::mined(d.bbox, d.tag, round, d.score))
            .collect();
        for a in &anns {
            new_mined.add(a.tag, 1);
        }
        let record = base.entry(key.clone()).or_insert_with(|| {
            let src = pool.get(&key).expect("mined slice comes from the pool");
            SliceRecord {
                key: key.clone(),
                image_ref: src.image_ref.clone(),
                repeat_count: 1,
                annotations: Vec::new(),
            }
        });
        record.annotations.extend(anns.iter().cloned());
        mined_records.push(SliceRecord {
            key: key.clone(),
            image_ref: record.image_ref.clone(),
            repeat_count: 1,
            annotations: anns,
        });
    }
    write_manifest(run_dir.mined(round), &mined_records)?;

    let merged: Vec<SliceRecord> = base.into_values().collect();
    let mined_counts = mined_counts(&merged);
    let (training_set, upsample) = maybe_upsample(merged, cfg.upsample)?;
    let (model, best_epoch) = train_on(backend, run_dir, round, &training_set)?;
    log::info!(
        "round {round}: threshold {threshold}, {} newly mined, {} mined in total",
        new_mined.total(),
        mined_counts.total()
    );
    Ok(MiningRoundState {
        round,
        threshold: Some(threshold),
        training_set,
        mined_counts,
        new_mined,
        model,
        best_epoch,
        upsample,
        metrics: None,
    })
}

/// Evaluates a round's epoch ensemble on `eval_set`.
pub fn evaluate_state(
    state: &MiningRoundState,
    cfg: &SelfTrainConfig,
    backend: &mut dyn DetectorBackend,
    eval_set: &[SliceRecord],
) -> Result<RoundMetrics> {
    let keys: Vec<SliceKey> = eval_set.iter().map(|r| r.key.clone()).collect();
    let preds = predict_ensemble(backend, &state.model, &keys, &cfg.fusion)?;
    let e = evaluate(&images_from(eval_set, &preds), &cfg.eval)?;
    Ok(RoundMetrics::from_evaluation(Some(state.round), &cfg.policy.name, &cfg.eval, &e))
}

/// Fuses the best-epoch predictions of every round with WBF
/// (`model_count` = number of rounds).
pub fn ensemble_rounds(
    states: &[MiningRoundState],
    fusion: &FusionConfig,
    backend: &mut dyn DetectorBackend,
    eval_slices: &[SliceKey],
) -> Result<Predictions> {
    if states.len() < 2 {
        return Err(Error::Data(format!(
            "a round ensemble needs at least 2 rounds, got {}",
            states.len()
        )));
    }
    let models = states
        .iter()
        .map(|s| {
            s.best_epoch
                .clone()
                .ok_or_else(|| Error::Data(format!("round {} has no best epoch", s.round)))
        })
        .collect::<Result<Vec<_>>>()?;
    predict_fused(backend, &models, eval_slices, fusion)
}

pub fn persist_state(run_dir: &RunDir, state: &MiningRoundState) -> Result<()> {
    if let Some(m) = &state.metrics {
        write_json(&run_dir.metrics(state.round), m)?;
    }
    write_json(
        &run_dir.state(state.round),
        &RoundCheckpoint {
            round: state.round,
            threshold: state.threshold,
            mined_counts: state.mined_counts,
            new_mined: state.new_mined,
            model: state.model.clone(),
            best_epoch: state.best_epoch.clone(),
            upsample: state.upsample.clone(),
        },
    )
}

pub fn load_state(run_dir: &RunDir, round: u32) -> Result<MiningRoundState> {
    let cp: RoundCheckpoint = read_json(&run_dir.state(round))?;
    let training_set = read_manifest(run_dir.manifest(round))?;
    let metrics_path = run_dir.metrics(round);
    let metrics = if metrics_path.is_file() {
        Some(read_json(&metrics_path)?)
    } else {
        None
    };
    Ok(MiningRoundState {
        round: cp.round,
        threshold: cp.threshold,
        training_set,
        mined_counts: cp.mined_counts,
        new_mined: cp.new_mined,
        model: cp.model,
        best_epoch: cp.best_epoch,
        upsample: cp.upsample,
        metrics,
    })
}

/// Loads every completed round of a run directory.
pub fn load_states(run_dir: &RunDir) -> Result<Vec<MiningRoundState>> {
    run_dir
        .completed_rounds()
        .into_iter()
        .map(|k| load_state(run_dir, k))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: SelfTrainConfig,
    /// Caller-supplied context (backend settings, split seed, paths).
    #[serde(default)]
    pub context: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainOutcome {
    pub states: Vec<MiningRoundState>,
    pub ensemble: Option<RoundMetrics>,
    /// Last round found complete on disk when the run started.
    pub resumed_after: Option<u32>,
}

/// Trains, evaluates and checkpoints the next round after `states`.
pub fn advance(
    cfg: &SelfTrainConfig,
    backend: &mut dyn DetectorBackend,
    splits: &SplitSet,
    run_dir: &RunDir,
    states: &mut Vec<MiningRoundState>,
) -> Result<()> {
    let round = states.last().map_or(0, |s| s.round + 1);
    let mut step = || -> Result<MiningRoundState> {
        let mut next = match states.last() {
            None => train_baseline(cfg, backend, splits, run_dir)?,
            Some(prev) => run_round(prev, cfg, backend, splits, run_dir)?,
        };
        next.metrics = Some(evaluate_state(&next, cfg, backend, &splits.f_t)?);
        persist_state(run_dir, &next)?;
        Ok(next)
    };
    let next = step().map_err(|e| e.in_round(round))?;
    states.push(next);
    Ok(())
}

/// Runs (or resumes) the full loop: round 0, `cfg.rounds` mining rounds,
/// then the round ensemble. A round already checkpointed in `run_dir` is
/// loaded instead of recomputed.
pub fn run_self_training(
    cfg: &SelfTrainConfig,
    backend: &mut dyn DetectorBackend,
    splits: &SplitSet,
    run_dir: &RunDir,
    context: serde_json::Value,
) -> Result<SelfTrainOutcome> {
    cfg.validate()?;
    mkdir(run_dir.root())?;
    let record = RunRecord {
        config: cfg.clone(),
        context,
    };
    let run_json = run_dir.run_json();
    if run_json.is_file() {
        let prev: RunRecord = read_json(&run_json)?;
        if prev != record {
            return Err(Error::Config(format!(
                "{} belongs to a run with a different configuration",
                run_dir.root().display()
            )));
        }
    } else {
        write_json(&run_json, &record)?;
    }

    let mut states = load_states(run_dir)?;
    states.truncate(cfg.rounds as usize + 1);
    let resumed_after = states.last().map(|s| s.round);
    if let Some(r) = resumed_after {
        log::info!("resuming after round {r}");
    }
    while states.len() <= cfg.rounds as usize {
        advance(cfg, backend, splits, run_dir, &mut states)?;
    }

    let ensemble = if states.len() >= 2 {
        let keys: Vec<SliceKey> = splits.f_t.iter().map(|r| r.key.clone()).collect();
        let preds = ensemble_rounds(&states, &cfg.fusion, backend, &keys)?;
        let e = evaluate(&images_from(&splits.f_t, &preds), &cfg.eval)?;
        let m = RoundMetrics::from_evaluation(None, &cfg.policy.name, &cfg.eval, &e);
        write_json(&run_dir.ensemble_metrics(), &m)?;
        Some(m)
    } else {
        None
    };
    Ok(SelfTrainOutcome {
        states,
        ensemble,
        resumed_after,
    })
}

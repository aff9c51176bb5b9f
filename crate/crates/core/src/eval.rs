//! Detection matching, FROC curves, per-class sensitivity at a fixed
//! false-positive rate, tag confusion matrices and bootstrap intervals.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, ClassCounts, LesionTag, SliceKey, SliceRecord};
use crate::error::{Error, Result};
use crate::fusion::Detection;
use crate::geometry::iou;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub fp_per_image_points: Vec<f64>,
    pub primary_operating_point: f64,
    /// Require the predicted tag to equal the ground-truth tag for a match.
    pub tag_required: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            fp_per_image_points: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            primary_operating_point: 4.0,
            tag_required: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "eval iou_threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        let pts = &self.fp_per_image_points;
        if pts.iter().any(|p| !(*p > 0.0)) || pts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "fp_per_image_points must be positive and strictly ascending".into(),
            ));
        }
        if !(self.primary_operating_point > 0.0) {
            return Err(Error::Config("primary_operating_point must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpPair {
    pub gt: usize,
    pub pred: usize,
    pub gt_tag: LesionTag,
    pub pred_tag: LesionTag,
    pub iou: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub tp: Vec<TpPair>,
    /// Indices into the prediction list.
    pub fp: Vec<usize>,
    /// Indices into the ground-truth list.
    pub fn_: Vec<usize>,
}

/// Greedy one-to-one matching for a single image.
///
/// Predictions are visited by descending score (ties: best IoU with any
/// ground truth first, then box coordinates, then tag); each claims the
/// unmatched ground truth with the highest IoU at or above `iou_thr`.
/// Matching ignores tags unless `tag_required` is set.
pub fn match_greedy(
    gts: &[Annotation],
    preds: &[Detection],
    iou_thr: f64,
    tag_required: bool,
) -> MatchResult {
    let eligible = |g: &Annotation, p: &Detection| !tag_required || g.tag == p.tag;
    let best_iou: Vec<f64> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .filter(|g| eligible(g, p))
                .map(|g| iou(&g.bbox, &p.bbox))
                .fold(0.0, f64::max)
        })
        .collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .total_cmp(&preds[a].score)
            .then_with(|| best_iou[b].total_cmp(&best_iou[a]))
            .then_with(|| preds[a].bbox.lex_cmp(&preds[b].bbox))
            .then_with(|| preds[a].tag.cmp(&preds[b].tag))
    });

    let mut taken = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for pi in order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || !eligible(g, p) {
                continue;
            }
            let v = iou(&g.bbox, &p.bbox);
            if v < iou_thr {
                continue;
            }
            let better = match best {
                None => true,
                Some((bi, bv)) => match v.total_cmp(&bv) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => g.bbox.lex_cmp(&gts[bi].bbox).is_lt(),
                },
            };
            if better {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, v)) => {
                taken[gi] = true;
                out.tp.push(TpPair {
                    gt: gi,
                    pred: pi,
                    gt_tag: gts[gi].tag,
                    pred_tag: p.tag,
                    iou: v,
                    score: p.score,
                });
            }
            None => out.fp.push(pi),
        }
    }
    out.fn_ = (0..gts.len()).filter(|&g| !taken[g]).collect();
    out
}

/// Ground truth and predictions for one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageEval {
    pub gts: Vec<Annotation>,
    pub preds: Vec<Detection>,
}

/// Pairs each record's annotations with its predictions (missing
/// predictions count as none).
pub fn images_from(
    records: &[SliceRecord],
    preds: &BTreeMap<SliceKey, Vec<Detection>>,
) -> Vec<ImageEval> {
    records
        .iter()
        .map(|r| ImageEval {
            gts: r.annotations.clone(),
            preds: preds.get(&r.key).cloned().unwrap_or_default(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    /// Minimum score included; `+inf` for the empty-set origin.
    pub threshold: f64,
    pub fp_per_image: f64,
    pub sensitivity: f64,
    pub tp_per_class: ClassCounts,
}

/// Step curve of sensitivity against mean false positives per image,
/// one point per distinct score plus the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
    pub n_images: usize,
    pub total_gt: usize,
    pub gt_per_class: ClassCounts,
}

pub fn froc_curve(images: &[ImageEval], cfg: &EvalConfig) -> Result<FrocCurve> {
    let mut marks: Vec<(f64, Option<LesionTag>)> = Vec::new();
    let mut gt_per_class = ClassCounts::default();
    let mut total_gt = 0;
    for img in images {
        total_gt += img.gts.len();
        for g in &img.gts {
            gt_per_class.add(g.tag, 1);
        }
        let m = match_greedy(&img.gts, &img.preds, cfg.iou_threshold, cfg.tag_required);
        marks.extend(m.tp.iter().map(|t| (t.score, Some(t.gt_tag))));
        marks.extend(m.fp.iter().map(|&p| (img.preds[p].score, None)));
    }
    curve_from_marks(marks, images.len(), total_gt, gt_per_class)
}

fn curve_from_marks(
    mut marks: Vec<(f64, Option<LesionTag>)>,
    n_images: usize,
    total_gt: usize,
    gt_per_class: ClassCounts,
) -> Result<FrocCurve> {
    if n_images == 0 {
        return Err(Error::Data("FROC needs at least one image".into()));
    }
    if total_gt == 0 {
        return Err(Error::Data("FROC needs at least one ground-truth lesion".into()));
    }
    marks.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![FrocPoint {
        threshold: f64::INFINITY,
        fp_per_image: 0.0,
        sensitivity: 0.0,
        tp_per_class: ClassCounts::default(),
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut per_class = ClassCounts::default();
    let mut i = 0;
    while i < marks.len() {
        let s = marks[i].0;
        while i < marks.len() && marks[i].0 == s {
            match marks[i].1 {
                Some(tag) => {
                    tp += 1;
                    per_class.add(tag, 1);
                }
                None => fp += 1,
            }
            i += 1;
        }
        points.push(FrocPoint {
            threshold: s,
            fp_per_image: fp as f64 / n_images as f64,
            sensitivity: tp as f64 / total_gt as f64,
            tp_per_class: per_class,
        });
    }
    Ok(FrocCurve {
        points,
        n_images,
        total_gt,
        gt_per_class,
    })
}

impl FrocCurve {
    /// Index of the last point whose FP rate does not exceed `fp`.
    pub fn operating_index(&self, fp: f64) -> usize {
        self.points
            .iter()
            .rposition(|p| p.fp_per_image <= fp)
            .unwrap_or(0)
    }

    /// Score threshold in force at `fp` false positives per image.
    pub fn operating_threshold(&self, fp: f64) -> f64 {
        self.points[self.operating_index(fp)].threshold
    }

    fn interpolate(&self, fp: f64, value: impl Fn(&FrocPoint) -> f64) -> f64 {
        let j = self.operating_index(fp);
        let lo = &self.points[j];
        match self.points.get(j + 1) {
            None => value(lo),
            Some(hi) => {
                let (a, b) = (value(lo), value(hi));
                a + (b - a) * (fp - lo.fp_per_image) / (hi.fp_per_image - lo.fp_per_image)
            }
        }
    }

    /// Overall sensitivity at `fp` FP/image, linearly interpolated between
    /// the bracketing points and clamped at the curve's ends.
    pub fn sensitivity_at(&self, fp: f64) -> f64 {
        self.interpolate(fp, |p| p.sensitivity)
    }

    /// Recall of one class at the global `fp` operating point; `None` when
    /// the class has no ground truth.
    pub fn class_sensitivity_at(&self, tag: LesionTag, fp: f64) -> Option<f64> {
        let n = self.gt_per_class.get(tag);
        if n == 0 || !tag.is_tagged() {
            return None;
        }
        Some(self.interpolate(fp, |p| p.tp_per_class.get(tag) as f64 / n as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub per_class: BTreeMap<LesionTag, Option<f64>>,
    /// Unweighted mean over classes with ground truth.
    pub mean: f64,
    pub operating_point: f64,
    pub lesion_counts: ClassCounts,
    /// Classes absent from the ground truth, excluded from the mean.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_classes: Vec<LesionTag>,
}

impl SensitivityReport {
    /// Builds a report from per-class values in `LesionTag::TAGGED` order.
    pub fn from_per_class(
        values: [Option<f64>; 8],
        operating_point: f64,
        lesion_counts: ClassCounts,
    ) -> Self {
        let per_class: BTreeMap<LesionTag, Option<f64>> =
            LesionTag::TAGGED.iter().copied().zip(values).collect();
        let present: Vec<f64> = values.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let missing_classes = LesionTag::TAGGED
            .iter()
            .zip(values)
            .filter(|(_, v)| v.is_none())
            .map(|(t, _)| *t)
            .collect();
        SensitivityReport {
            per_class,
            mean,
            operating_point,
            lesion_counts,
            missing_classes,
        }
    }

    pub fn get(&self, tag: LesionTag) -> Option<f64> {
        self.per_class.get(&tag).copied().flatten()
    }
}

pub fn sensitivity_report(curve: &FrocCurve, cfg: &EvalConfig) -> SensitivityReport {
    let op = cfg.primary_operating_point;
    let values = LesionTag::TAGGED.map(|t| curve.class_sensitivity_at(t, op));
    SensitivityReport::from_per_class(values, op, curve.gt_per_class)
}

/// Rows are ground-truth tags, columns predicted tags, in
/// `LesionTag::TAGGED` order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 8]; 8],
}

impl ConfusionMatrix {
    pub fn get(&self, gt: LesionTag, pred: LesionTag) -> usize {
        match (gt.index(), pred.index()) {
            (Some(g), Some(p)) => self.counts[g][p],
            _ => 0,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, gt: LesionTag) -> usize {
        gt.index().map_or(0, |g| self.counts[g].iter().sum())
    }

    pub fn is_diagonal(&self) -> bool {
        (0..8).all(|i| (0..8).all(|j| i == j || self.counts[i][j] == 0))
    }
}

/// Counts tag agreement over matched pairs whose score is at least
/// `min_score`. Pairs involving untagged boxes are skipped.
pub fn confusion_matrix(results: &[MatchResult], min_score: f64) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for r in results {
        for t in r.tp.iter().filter(|t| t.score >= min_score) {
            if let (Some(g), Some(p)) = (t.gt_tag.index(), t.pred_tag.index()) {
                m.counts[g][p] += 1;
            }
        }
    }
    m
}

/// Everything computed for one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub curve: FrocCurve,
    pub report: SensitivityReport,
    pub confusion: ConfusionMatrix,
    /// Overall sensitivity at each configured FP/image point.
    pub froc_points: Vec<(f64, f64)>,
}

pub fn evaluate(images: &[ImageEval], cfg: &EvalConfig) -> Result<Evaluation> {
    cfg.validate()?;
    let curve = froc_curve(images, cfg)?;
    let report = sensitivity_report(&curve, cfg);
    let min_score = curve.operating_threshold(cfg.primary_operating_point);
    let matches: Vec<MatchResult> = images
        .iter()
        .map(|i| match_greedy(&i.gts, &i.preds, cfg.iou_threshold, cfg.tag_required))
        .collect();
    let confusion = confusion_matrix(&matches, min_score);
    let froc_points = cfg
        .fp_per_image_points
        .iter()
        .map(|&x| (x, curve.sensitivity_at(x)))
        .collect();
    Ok(Evaluation {
        curve,
        report,
        confusion,
        froc_points,
    })
}

/// Percentile bootstrap interval for the mean of per-lesion outcomes
/// (1 = detected, 0 = missed).
pub fn bootstrap_ci(outcomes: &[f64], level: f64, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if outcomes.is_empty() {
        return Err(Error::Data("bootstrap needs at least one outcome".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0, 1)")));
    }
    if resamples < 100 {
        return Err(Error::Config(format!("bootstrap needs at least 100 resamples, got {resamples}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = outcomes.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| outcomes[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let pick = |q: f64| {
        let idx = (q * (resamples - 1) as f64).round() as usize;
        means[idx.min(resamples - 1)]
    };
    Ok((pick(alpha), pick(1.0 - alpha)))
}

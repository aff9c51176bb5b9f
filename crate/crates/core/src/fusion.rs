//! Weighted Boxes Fusion over the outputs of several models, with greedy
//! NMS as the baseline comparator.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::LesionTag;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// A scored, tagged prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub tag: LesionTag,
    pub score: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub model_id: String,
}

impl Detection {
    pub fn new(bbox: BBox, tag: LesionTag, score: f64) -> Self {
        Detection {
            bbox,
            tag,
            score,
            model_id: String::new(),
        }
    }

    pub fn with_model(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Data(format!(
                "detection score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }
}

/// Descending score, then tag order, then lexicographic box coordinates.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tag.cmp(&b.tag))
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub iou_threshold: f64,
    pub skip_score_threshold: f64,
    pub model_count: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            iou_threshold: 0.5,
            skip_score_threshold: 0.0,
            model_count: 1,
        }
    }
}

impl FusionConfig {
    pub fn with_model_count(self, model_count: usize) -> Self {
        FusionConfig {
            model_count,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "fusion iou_threshold {} must lie in (0, 1]",
                self.iou_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.skip_score_threshold) {
            return Err(Error::Config(format!(
                "fusion skip_score_threshold {} must lie in [0, 1)",
                self.skip_score_threshold
            )));
        }
        if self.model_count == 0 {
            return Err(Error::Config("fusion model_count must be positive".into()));
        }
        Ok(())
    }
}

struct Cluster {
    tag: LesionTag,
    members: usize,
    score_sum: f64,
    weighted: [f64; 4],
    plain: [f64; 4],
    fused: BBox,
}

impl Cluster {
    fn new(d: &Detection) -> Self {
        let mut c = Cluster {
            tag: d.tag,
            members: 0,
            score_sum: 0.0,
            weighted: [0.0; 4],
            plain: [0.0; 4],
            fused: d.bbox,
        };
        c.push(d);
        c
    }

    fn push(&mut self, d: &Detection) {
        self.members += 1;
        self.score_sum += d.score;
        for (i, v) in d.bbox.coords().into_iter().enumerate() {
            self.weighted[i] += d.score * v;
            self.plain[i] += v;
        }
        let c = if self.score_sum > 0.0 {
            self.weighted.map(|v| v / self.score_sum)
        } else {
            // all-zero scores: fall back to the unweighted mean
            self.plain.map(|v| v / self.members as f64)
        };
        self.fused = BBox {
            x_min: c[0],
            y_min: c[1],
            x_max: c[2],
            y_max: c[3],
        };
    }
}

/// Fuses detections from `per_model_detections` (one list per model).
///
/// Boxes are visited in descending score order; each joins the same-tag
/// cluster whose current fused box overlaps it most (IoU at or above
/// `cfg.iou_threshold`) or starts a new cluster. A cluster's box is the
/// score-weighted mean of its members; its score is the mean member score
/// scaled by `min(members, model_count) / model_count`.
pub fn weighted_boxes_fusion(
    per_model_detections: &[Vec<Detection>],
    cfg: &FusionConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut all: Vec<&Detection> = per_model_detections
        .iter()
        .flatten()
        .filter(|d| d.score >= cfg.skip_score_threshold)
        .collect();
    all.sort_by(|a, b| detection_order(a, b));

    let mut clusters: Vec<Cluster> = Vec::new();
    for d in all {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in clusters.iter().enumerate() {
            if c.tag != d.tag {
                continue;
            }
            let v = iou(&c.fused, &d.bbox);
            if v >= cfg.iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        match best {
            Some((i, _)) => clusters[i].push(d),
            None => clusters.push(Cluster::new(d)),
        }
    }

    let m = cfg.model_count as f64;
    let mut out: Vec<Detection> = clusters
        .into_iter()
        .map(|c| {
            let mean = c.score_sum / c.members as f64;
            let score = mean * (c.members.min(cfg.model_count) as f64) / m;
            Detection {
                bbox: c.fused,
                tag: c.tag,
                score: score.clamp(0.0, 1.0),
                model_id: "wbf".into(),
            }
        })
        .collect();
    out.sort_by(detection_order);
    Ok(out)
}

/// Greedy per-tag non-maximum suppression.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| detection_order(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.tag == d.tag && iou(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

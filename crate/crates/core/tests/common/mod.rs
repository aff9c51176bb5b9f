//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use lesion_selftrain::dataset::Annotation;
use lesion_selftrain::eval::ImageEval;
use lesion_selftrain::{BBox, Detection, LesionTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bx(c: [f64; 4]) -> BBox {
    BBox::new(c[0], c[1], c[2], c[3]).unwrap()
}

/// Plain IoU on coordinate arrays.
pub fn oracle_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    inter / (area(a) + area(b) - inter)
}

fn coords(b: &BBox) -> [f64; 4] {
    [b.x_min, b.y_min, b.x_max, b.y_max]
}

/// Naive weighted boxes fusion: clusters keep their member lists and the
/// fused box is recomputed from scratch after every insertion.
pub fn oracle_wbf(lists: &[Vec<Detection>], iou_thr: f64, skip: f64, model_count: usize) -> Vec<([f64; 4], LesionTag, f64)> {
    let mut all: Vec<&Detection> = lists.iter().flatten().filter(|d| d.score >= skip).collect();
    all.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.tag.cmp(&b.tag))
            .then_with(|| {
                coords(&a.bbox)
                    .iter()
                    .zip(coords(&b.bbox))
                    .map(|(x, y)| x.partial_cmp(&y).unwrap())
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    let fused_of = |members: &[&Detection]| -> [f64; 4] {
        let mut s = 0.0;
        let mut w = [0.0; 4];
        let mut plain = [0.0; 4];
        for m in members {
            s += m.score;
            let c = coords(&m.bbox);
            for i in 0..4 {
                w[i] += m.score * c[i];
                plain[i] += c[i];
            }
        }
        if s > 0.0 {
            w.map(|v| v / s)
        } else {
            plain.map(|v| v / members.len() as f64)
        }
    };
    let mut clusters: Vec<Vec<&Detection>> = Vec::new();
    for d in all {
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for (i, c) in clusters.iter().enumerate() {
            if c[0].tag != d.tag {
                continue;
            }
            let v = oracle_iou(fused_of(c), coords(&d.bbox));
            if v >= iou_thr && v > best_iou {
                best = Some(i);
                best_iou = v;
            }
        }
        match best {
            Some(i) => clusters[i].push(d),
            None => clusters.push(vec![d]),
        }
    }
    let mut out: Vec<([f64; 4], LesionTag, f64)> = clusters
        .iter()
        .map(|c| {
            let mean = c.iter().map(|d| d.score).sum::<f64>() / c.len() as f64;
            let score = mean * c.len().min(model_count) as f64 / model_count as f64;
            (fused_of(c), c[0].tag, score)
        })
        .collect();
    out.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then_with(|| a.0.partial_cmp(&b.0).unwrap())
    });
    out
}

const TAGS: [LesionTag; 3] = [LesionTag::Liver, LesionTag::Lung, LesionTag::Kidney];

/// Up to `max_models` lists totalling at most `max_boxes` detections,
/// jittered around a few anchors so that clusters form.
pub fn random_wbf_instance(r: &mut ChaCha8Rng, max_boxes: usize, max_models: usize) -> Vec<Vec<Detection>> {
    let models = r.random_range(1..=max_models);
    let n = r.random_range(0..=max_boxes);
    let anchors: Vec<[f64; 4]> = (0..r.random_range(1..=4))
        .map(|_| {
            let x = r.random_range(0.0..200.0);
            let y = r.random_range(0.0..200.0);
            [x, y, x + r.random_range(10.0..60.0), y + r.random_range(10.0..60.0)]
        })
        .collect();
    let mut lists = vec![Vec::new(); models];
    for _ in 0..n {
        let a = anchors[r.random_range(0..anchors.len())];
        let j = |r: &mut ChaCha8Rng| r.random_range(-6.0..6.0);
        let x1 = a[0] + j(r);
        let y1 = a[1] + j(r);
        let x2 = (a[2] + j(r)).max(x1 + 1.0);
        let y2 = (a[3] + j(r)).max(y1 + 1.0);
        let tag = TAGS[r.random_range(0..TAGS.len())];
        // mostly continuous scores, occasionally an exact tie
        let score = if r.random_bool(0.1) { 0.5 } else { r.random_range(0.0..=1.0) };
        let m = r.random_range(0..models);
        lists[m].push(Detection::new(bx([x1, y1, x2, y2]), tag, score));
    }
    lists
}

/// Greedy matching re-derived from its definition: predictions by
/// descending score (ties: best IoU, then box, then tag), each claiming the
/// free ground truth of highest IoU at or above `thr`. Returns the matched
/// ground-truth indices and the number of false positives.
pub fn oracle_match(gts: &[Annotation], preds: &[&Detection], thr: f64) -> (Vec<usize>, usize) {
    let best = |p: &Detection| gts.iter().map(|g| oracle_iou(coords(&g.bbox), coords(&p.bbox))).fold(0.0, f64::max);
    let mut order: Vec<&Detection> = preds.to_vec();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(best(b).partial_cmp(&best(a)).unwrap())
            .then(coords(&a.bbox).partial_cmp(&coords(&b.bbox)).unwrap())
            .then(a.tag.cmp(&b.tag))
    });
    let mut taken = vec![false; gts.len()];
    let mut fp = 0;
    for p in order {
        let mut pick: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            let v = oracle_iou(coords(&g.bbox), coords(&p.bbox));
            if taken[gi] || v < thr {
                continue;
            }
            let better = match pick {
                None => true,
                Some((bi, bv)) => v > bv || (v == bv && coords(&g.bbox) < coords(&gts[bi].bbox)),
            };
            if better {
                pick = Some((gi, v));
            }
        }
        match pick {
            Some((gi, _)) => taken[gi] = true,
            None => fp += 1,
        }
    }
    ((0..gts.len()).filter(|&i| taken[i]).collect(), fp)
}

/// `(fp_per_image, recall)` for every candidate threshold, by matching
/// from scratch at each one. The first entry is the empty prediction set.
/// `class` restricts recall to one ground-truth tag.
pub fn oracle_froc(images: &[ImageEval], thr: f64, class: Option<LesionTag>) -> Vec<(f64, f64)> {
    let mut scores: Vec<f64> = images.iter().flat_map(|i| i.preds.iter().map(|p| p.score)).collect();
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    scores.dedup();
    let n_gt = images
        .iter()
        .flat_map(|i| &i.gts)
        .filter(|g| class.is_none_or(|c| g.tag == c))
        .count();
    let mut pts = vec![(0.0, 0.0)];
    for t in scores {
        let (mut tp, mut fp) = (0usize, 0usize);
        for img in images {
            let kept: Vec<&Detection> = img.preds.iter().filter(|p| p.score >= t).collect();
            let (m, f) = oracle_match(&img.gts, &kept, thr);
            tp += m.iter().filter(|&&g| class.is_none_or(|c| img.gts[g].tag == c)).count();
            fp += f;
        }
        pts.push((fp as f64 / images.len() as f64, tp as f64 / n_gt as f64));
    }
    pts
}

/// Linear interpolation between the last point at or below `x` and the
/// next one; clamped at the ends.
pub fn oracle_sensitivity_at(pts: &[(f64, f64)], x: f64) -> f64 {
    let mut j = 0;
    for (i, p) in pts.iter().enumerate() {
        if p.0 <= x {
            j = i;
        }
    }
    match pts.get(j + 1) {
        None => pts[j].1,
        Some(hi) => {
            let lo = pts[j];
            lo.1 + (hi.1 - lo.1) * (x - lo.0) / (hi.0 - lo.0)
        }
    }
}

/// At most `max_images` images and `max_preds` predictions in total, on a
/// coarse grid so that exact IoU and score ties occur.
pub fn random_froc_instance(r: &mut ChaCha8Rng, max_images: usize, max_preds: usize) -> Vec<ImageEval> {
    let n_images = r.random_range(1..=max_images);
    let mut images: Vec<ImageEval> = (0..n_images)
        .map(|_| {
            let n = r.random_range(0..=3);
            ImageEval {
                gts: (0..n)
                    .map(|_| {
                        let x = r.random_range(0..8) as f64 * 10.0;
                        let y = r.random_range(0..8) as f64 * 10.0;
                        Annotation::ground_truth(bx([x, y, x + 20.0, y + 20.0]), TAGS[r.random_range(0..3)])
                    })
                    .collect(),
                preds: Vec::new(),
            }
        })
        .collect();
    if images.iter().all(|i| i.gts.is_empty()) {
        images[0].gts.push(Annotation::ground_truth(bx([0.0, 0.0, 20.0, 20.0]), LesionTag::Liver));
    }
    for _ in 0..r.random_range(0..=max_preds) {
        let i = r.random_range(0..n_images);
        let (x, y) = match images[i].gts.get(r.random_range(0..4)) {
            Some(g) if r.random_bool(0.7) => (
                g.bbox.x_min + r.random_range(-1..=1) as f64 * 5.0,
                g.bbox.y_min + r.random_range(-1..=1) as f64 * 5.0,
            ),
            _ => (r.random_range(0..8) as f64 * 10.0, r.random_range(0..8) as f64 * 10.0),
        };
        let score = r.random_range(1..=6) as f64 / 6.0;
        images[i]
            .preds
            .push(Detection::new(bx([x, y, x + 20.0, y + 20.0]), TAGS[r.random_range(0..3)], score));
    }
    images
}

/// Operating points probed by the FROC checks.
pub fn probe_points(images: &[ImageEval]) -> Vec<f64> {
    let mut v = vec![0.0, 0.125, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 8.0];
    // exact curve abscissae as well
    let n = images.len() as f64;
    let total: usize = images.iter().map(|i| i.preds.len()).sum();
    v.extend((0..=total).map(|k| k as f64 / n));
    v
}

/// One line of the acceptance report.
pub fn report(id: u32, name: &str, ok: bool, detail: &str) {
    println!("[{}] criterion {id:>2}: {name} -- {detail}", if ok { "PASS" } else { "FAIL" });
}

pub mod stub {
    //! Conformance checks for the external-process backend, driven against
    //! the stub served by the `selftrain` binary.

    use std::path::Path;

    use lesion_selftrain::detector::{ExternalBackend, ExternalConfig, TrainRequest};
    use lesion_selftrain::{BackendError, DetectorBackend, LesionTag, ModelHandle, SliceKey};

    pub fn backend(mode: &str, timeout_secs: f64, handshake: bool) -> ExternalBackend {
        ExternalBackend::new(ExternalConfig {
            command: vec![
                env!("CARGO_BIN_EXE_selftrain").into(),
                "stub-backend".into(),
                "--mode".into(),
                mode.into(),
            ],
            timeout_secs,
            handshake,
            ..ExternalConfig::default()
        })
        .unwrap()
    }

    fn keys() -> Vec<SliceKey> {
        (1..=3).map(|i| SliceKey::new("000301", "01", "01", i)).collect()
    }

    fn train(b: &mut ExternalBackend, dir: &Path) -> Result<ModelHandle, BackendError> {
        let manifest = dir.join("manifest.jsonl");
        std::fs::write(&manifest, "").unwrap();
        b.train(&TrainRequest {
            round: 0,
            records: &[],
            manifest: &manifest,
            out_dir: &dir.join("model"),
        })
    }

    type Check = Result<(), String>;

    fn expect(cond: bool, msg: impl Into<String>) -> Check {
        if cond {
            Ok(())
        } else {
            Err(msg.into())
        }
    }

    pub fn handshake_train_predict(dir: &Path) -> Check {
        let mut b = backend("fixed:0.95", 10.0, true);
        b.handshake().map_err(|e| format!("handshake: {e}"))?;
        let m = train(&mut b, dir).map_err(|e| format!("train: {e}"))?;
        expect(Path::new(&m.location).join("stub-model.txt").is_file(), "train left no model file")?;
        let ks = keys();
        let p = b.predict(&m, &ks).map_err(|e| format!("predict: {e}"))?;
        expect(p.keys().cloned().collect::<Vec<_>>() == ks, "predicted key set differs from request")?;
        for dets in p.values() {
            expect(
                dets.len() == 1 && dets[0].score == 0.95 && dets[0].tag == LesionTag::Lung,
                "fixed stub detection mismatch",
            )?;
        }
        // the same session keeps serving
        let again = b.predict(&m, &ks[..1]).map_err(|e| format!("second predict: {e}"))?;
        expect(again.len() == 1, "second predict returned wrong slices")
    }

    pub fn empty_predictions(dir: &Path) -> Check {
        let mut b = backend("empty", 10.0, false);
        let m = train(&mut b, dir).map_err(|e| e.to_string())?;
        let p = b.predict(&m, &keys()).map_err(|e| e.to_string())?;
        expect(p.values().all(Vec::is_empty), "empty stub produced detections")
    }

    pub fn malformed_line(dir: &Path) -> Check {
        let mut b = backend("malformed", 10.0, false);
        let m = train(&mut b, dir).map_err(|e| e.to_string())?;
        match b.predict(&m, &keys()) {
            Err(BackendError::Protocol { line, text, .. }) => {
                expect(line == 2 && text == "this is not json", format!("wrong location: line {line} {text:?}"))
            }
            other => Err(format!("expected a protocol error, got {other:?}")),
        }
    }

    pub fn oversized_line(dir: &Path) -> Check {
        let mut b = ExternalBackend::new(ExternalConfig {
            command: vec![env!("CARGO_BIN_EXE_selftrain").into(), "stub-backend".into(), "--mode".into(), "fixed".into()],
            max_line_bytes: 64,
            ..ExternalConfig::default()
        })
        .unwrap();
        let err = train(&mut b, dir);
        match err {
            Err(BackendError::Protocol { message, .. }) if message.contains("longer") => Ok(()),
            Ok(m) => match b.predict(&m, &keys()) {
                Err(BackendError::Protocol { message, .. }) if message.contains("longer") => Ok(()),
                other => Err(format!("expected an oversized-line error, got {other:?}")),
            },
            Err(e) => Err(format!("expected an oversized-line error, got {e}")),
        }
    }

    pub fn timeout(dir: &Path) -> Check {
        let mut b = backend("slow:3000", 0.3, false);
        let start = std::time::Instant::now();
        match train(&mut b, dir) {
            Err(BackendError::Timeout(_)) => expect(start.elapsed().as_secs_f64() < 2.5, "timeout fired late"),
            other => Err(format!("expected a timeout, got {other:?}")),
        }
    }

    pub fn crash_then_respawn(dir: &Path) -> Check {
        let mut b = backend("crash", 10.0, false);
        let m = train(&mut b, dir).map_err(|e| e.to_string())?;
        match b.predict(&m, &keys()) {
            Err(BackendError::Exited { .. }) => {}
            other => return Err(format!("expected the child to have exited, got {other:?}")),
        }
        // the next request starts a fresh child
        train(&mut b, dir).map(|_| ()).map_err(|e| format!("respawn: {e}"))
    }

    pub fn remote_failure(dir: &Path) -> Check {
        let mut b = backend("fail", 10.0, false);
        match train(&mut b, dir) {
            Err(BackendError::Remote(msg)) => expect(msg.contains("refusing"), msg),
            other => Err(format!("expected a remote failure, got {other:?}")),
        }
    }

    pub fn missing_program() -> Check {
        let mut b = ExternalBackend::new(ExternalConfig {
            command: vec!["/definitely/not/a/detector".into()],
            ..ExternalConfig::default()
        })
        .unwrap();
        match b.handshake() {
            Err(BackendError::Spawn { .. }) => Ok(()),
            other => Err(format!("expected a spawn error, got {other:?}")),
        }
    }

    /// Every check, by name.
    pub fn suite(dir: &Path) -> Vec<(&'static str, Check)> {
        let sub = |n: &str| {
            let d = dir.join(n);
            std::fs::create_dir_all(&d).unwrap();
            d
        };
        vec![
            ("handshake/train/predict", handshake_train_predict(&sub("a"))),
            ("empty", empty_predictions(&sub("b"))),
            ("malformed line", malformed_line(&sub("c"))),
            ("oversized line", oversized_line(&sub("d"))),
            ("timeout", timeout(&sub("e"))),
            ("crash and respawn", crash_then_respawn(&sub("f"))),
            ("remote failure", remote_failure(&sub("g"))),
            ("missing program", missing_program()),
        ]
    }
}

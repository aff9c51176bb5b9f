//! Acceptance report: one PASS/FAIL line per criterion.
//!
//!     cargo test --test acceptance

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{
    fixture, oracle_froc, oracle_sensitivity_at, oracle_wbf, probe_points, random_froc_instance,
    random_wbf_instance, rng, stub,
};
use lesion_selftrain::dataset::{
    build_splits, class_counts, load_deeplesion_index, manifest_to_string, parse_manifest,
    read_slice_list, upsample_balance, DatasetIndex,
};
use lesion_selftrain::detector::{Predictions, SyntheticBackend, TrainRequest};
use lesion_selftrain::eval::froc_curve;
use lesion_selftrain::mining::{filter_mined, run_self_training, RunDir, SelfTrainConfig, SelfTrainOutcome};
use lesion_selftrain::policy::builtin_policies;
use lesion_selftrain::scenario::{reference_backend, ScenarioConfig};
use lesion_selftrain::{
    weighted_boxes_fusion, Annotation, BBox, BackendError, Detection, DetectorBackend, EvalConfig,
    FusionConfig, LesionTag, ModelHandle, SensitivityReport, SliceKey, SliceRecord, SplitSet,
    ThresholdPolicy,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mean_of(percents: [f64; 8]) -> f64 {
    let mut v = [None; 8];
    for (t, p) in LesionTag::TABLE_ORDER.iter().zip(percents) {
        let i = LesionTag::TAGGED.iter().position(|x| x == t).unwrap();
        v[i] = Some(p / 100.0);
    }
    SensitivityReport::from_per_class(v, 4.0, Default::default()).mean
}

fn c1_mean_aggregation() -> Outcome {
    let round0 = mean_of([61.3, 62.6, 77.1, 69.8, 77.1, 73.9, 71.2, 82.8]);
    let ens = mean_of([77.4, 76.5, 83.8, 76.0, 81.8, 78.3, 72.0, 82.4]);
    let (a, b) = (format!("{:.1}", round0 * 100.0), format!("{:.1}", ens * 100.0));
    ensure(a == "72.0" && b == "78.5", format!("got {a}% and {b}%"))?;
    Ok(format!("round 0 mean {a}%, variable ensemble mean {b}%"))
}

fn c2_wbf_oracle() -> Outcome {
    let mut r = rng(2);
    let (mut coord_err, mut score_err) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let lists = random_wbf_instance(&mut r, 20, 4);
        let m = lists.len();
        let got = weighted_boxes_fusion(&lists, &FusionConfig::default().with_model_count(m)).map_err(|e| e.to_string())?;
        let want = oracle_wbf(&lists, 0.5, 0.0, m);
        ensure(got.len() == want.len(), format!("case {case}: {} vs {} clusters", got.len(), want.len()))?;
        for (g, w) in got.iter().zip(&want) {
            ensure(g.tag == w.1, format!("case {case}: tag mismatch"))?;
            score_err = score_err.max((g.score - w.2).abs());
            for (a, b) in g.bbox.coords().iter().zip(w.0) {
                coord_err = coord_err.max((a - b).abs());
            }
        }
    }
    ensure(coord_err <= 1e-9 && score_err <= 1e-12, format!("max errors {coord_err:e} / {score_err:e}"))?;
    Ok(format!("1000 instances, max coord err {coord_err:e}, max score err {score_err:e}"))
}

fn c3_froc_oracle() -> Outcome {
    let cfg = EvalConfig::default();
    let mut r = rng(3);
    let mut probes = 0;
    for case in 0..500 {
        let images = random_froc_instance(&mut r, 5, 10);
        let curve = froc_curve(&images, &cfg).map_err(|e| e.to_string())?;
        let pts = oracle_froc(&images, cfg.iou_threshold, None);
        for x in probe_points(&images) {
            let (a, b) = (curve.sensitivity_at(x), oracle_sensitivity_at(&pts, x));
            ensure(a == b, format!("case {case} at {x}: {a} vs {b}"))?;
            probes += 1;
        }
    }
    Ok(format!("500 instances, {probes} operating points, all exact"))
}

fn mini_index() -> (DatasetIndex, BTreeSet<SliceKey>) {
    (
        load_deeplesion_index(fixture("DL_info_mini.csv")).unwrap(),
        read_slice_list(fixture("test_slices.txt")).unwrap(),
    )
}

fn lesion_slice(patient: &str, slice: u32, tag: LesionTag) -> SliceRecord {
    SliceRecord::new(
        SliceKey::new(patient, "01", "01", slice),
        vec![Annotation::ground_truth(BBox::new(10.0, 10.0, 30.0, 30.0).unwrap(), tag)],
    )
}

fn c4_upsampler() -> Outcome {
    let (index, _) = mini_index();
    let tagged: Vec<SliceRecord> = index
        .records()
        .filter(|r| r.annotations.iter().all(|a| a.tag.is_tagged()))
        .cloned()
        .collect();
    let single: Vec<SliceRecord> = tagged.iter().filter(|r| r.annotations.len() == 1).cloned().collect();
    let up = upsample_balance(&single).map_err(|e| e.to_string())?;
    let target = class_counts(&single).max();
    let after = class_counts(&up.records);
    ensure(
        after.iter().all(|(t, n)| class_counts(&single).get(t) == 0 || n == target),
        format!("single-lesion classes not balanced to {target}: {after:?}"),
    )?;

    let mut worked: Vec<SliceRecord> = (0..1000).map(|i| lesion_slice("000001", i, LesionTag::Lung)).collect();
    worked.extend((0..200).map(|i| lesion_slice("000002", i, LesionTag::Bone)));
    let up5 = upsample_balance(&worked).map_err(|e| e.to_string())?;
    let mult: BTreeSet<u32> = up5.records.iter().filter(|r| r.has_tag(LesionTag::Bone)).map(|r| r.repeat_count).collect();
    ensure(mult == BTreeSet::from([5]), format!("minority multiplicities {mult:?}"))?;

    let multi = upsample_balance(&tagged).map_err(|e| e.to_string())?;
    let rep = &multi.report;
    ensure(rep.disparity <= rep.slice_bound, format!("disparity {} > bound {}", rep.disparity, rep.slice_bound))?;
    Ok(format!(
        "single-lesion classes all {target}; 1000 vs 200 repeats ×5; multi-lesion disparity {} ≤ {}",
        rep.disparity, rep.slice_bound
    ))
}

fn c5_splits() -> Outcome {
    let (index, test) = mini_index();
    for seed in 0..100 {
        let s = build_splits(&index, &test, 0.7, seed).map_err(|e| e.to_string())?;
        let sets: Vec<BTreeSet<&str>> = [&s.o_tr, &s.f_tr, &s.f_v, &s.f_t]
            .iter()
            .map(|r| r.iter().map(|r| r.key.patient_id.as_str()).collect())
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                ensure(sets[i].is_disjoint(&sets[j]), format!("seed {seed}: overlap"))?;
            }
        }
        let pool = (sets[1].len() + sets[2].len()) as f64;
        ensure((sets[1].len() as f64 - 0.7 * pool).abs() <= 1.0, format!("seed {seed}: {} of {pool}", sets[1].len()))?;
        ensure(s == build_splits(&index, &test, 0.7, seed).unwrap(), format!("seed {seed}: not deterministic"))?;
    }
    Ok("100 seeds disjoint, within ±1 of 70/30, deterministic".into())
}

fn random_map(seed: u64) -> Predictions {
    let mut r = rng(seed);
    let mut p = Predictions::new();
    for s in 0..r.random_range(1..15u32) {
        let dets = (0..r.random_range(0..6))
            .map(|i| {
                let x = 25.0 * i as f64;
                let score = if r.random_bool(0.2) { [0.75, 0.8, 0.85, 0.9][r.random_range(0..4)] } else { r.random() };
                Detection::new(BBox::new(x, x, x + 20.0, x + 20.0).unwrap(), LesionTag::TAGGED[r.random_range(0..8)], score)
            })
            .collect();
        p.insert(SliceKey::new("000001", "01", "01", s), dets);
    }
    p
}

fn c6_threshold_monotonicity() -> Outcome {
    let pols = builtin_policies();
    let kept = |p: &Predictions, t: f64| -> BTreeSet<(SliceKey, String)> {
        filter_mined(p, t)
            .into_iter()
            .flat_map(|(k, v)| v.into_iter().map(move |d| (k.clone(), serde_json::to_string(&d).unwrap())))
            .collect()
    };
    let mut checks = 0;
    for seed in 0..200 {
        let map = random_map(seed);
        for k in 2..=4u32 {
            let s = kept(&map, ThresholdPolicy::static_policy().threshold_for_round(k).unwrap());
            for p in &pols {
                let other = kept(&map, p.threshold_for_round(k).unwrap());
                ensure(s.is_subset(&other), format!("map {seed}, round {k}: static ⊄ {}", p.name))?;
                checks += 1;
            }
        }
    }
    Ok(format!("200 maps, {checks} subset checks"))
}

fn reference_splits() -> SplitSet {
    let s = ScenarioConfig::default().generate().unwrap();
    build_splits(&s.index, &s.test_list, 0.7, 0).unwrap()
}

fn synthetic_run(splits: &SplitSet, policy: ThresholdPolicy, upsample: bool, dir: &Path) -> SelfTrainOutcome {
    let cfg = SelfTrainConfig {
        policy,
        upsample,
        ..SelfTrainConfig::default()
    };
    let mut b = SyntheticBackend::from_splits(reference_backend(0), splits).unwrap();
    run_self_training(&cfg, &mut b, splits, &RunDir::new(dir), serde_json::Value::Null).unwrap()
}

fn c7_dynamics() -> Outcome {
    let splits = reference_splits();
    let tmp = tempfile::tempdir().unwrap();
    let counts = class_counts(&splits.f_tr);
    let rare = *LesionTag::TAGGED
        .iter()
        .filter(|t| counts.get(**t) > 0)
        .min_by_key(|t| (counts.get(**t), **t))
        .unwrap();

    let plain_static = synthetic_run(&splits, ThresholdPolicy::static_policy(), false, &tmp.path().join("s"));
    let share = |o: &SelfTrainOutcome, k: usize| o.states[k].mined_counts.share(rare);
    let (s1, s4) = (share(&plain_static, 1), share(&plain_static, 4));
    let a = s4 < s1;

    let up = synthetic_run(&splits, ThresholdPolicy::variable(), true, &tmp.path().join("vu"));
    let plain = synthetic_run(&splits, ThresholdPolicy::variable(), false, &tmp.path().join("v"));
    let m = |o: &SelfTrainOutcome, k: usize| o.states[k].metrics.clone().unwrap();
    let (r0, r4) = (m(&up, 0), m(&up, 4));
    let mut worst = (LesionTag::Untagged, f64::INFINITY);
    for t in LesionTag::TAGGED {
        if let (Some(x0), Some(x4)) = (r0.get(t), r4.get(t)) {
            if x4 - x0 < worst.1 {
                worst = (t, x4 - x0);
            }
        }
    }
    let b = worst.1 >= -0.01;
    let (mu, mp) = (r4.mean, m(&plain, 4).mean);
    let c = mu > mp;

    let detail = format!(
        "(a) {} share {:.1}% → {:.1}% [{}]; (b) worst class change {} {:+.1} pp [{}]; (c) mean {:.1}% vs {:.1}% [{}]",
        rare.as_str(),
        s1 * 100.0,
        s4 * 100.0,
        if a { "ok" } else { "FAIL" },
        worst.0.as_str(),
        worst.1 * 100.0,
        if b { "ok" } else { "FAIL" },
        mu * 100.0,
        mp * 100.0,
        if c { "ok" } else { "FAIL" },
    );
    if a && b && c {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Fails every call from round `fail_at` on, simulating a killed process.
struct Killed<B> {
    inner: B,
    fail_at: u32,
}

impl<B: DetectorBackend> DetectorBackend for Killed<B> {
    fn train(&mut self, req: &TrainRequest<'_>) -> Result<ModelHandle, BackendError> {
        if req.round >= self.fail_at {
            return Err(BackendError::Other("killed".into()));
        }
        self.inner.train(req)
    }

    fn predict(&mut self, m: &ModelHandle, s: &[SliceKey]) -> Result<Predictions, BackendError> {
        self.inner.predict(m, s)
    }

    fn epoch_ensemble(&mut self, m: &ModelHandle) -> Result<Vec<ModelHandle>, BackendError> {
        self.inner.epoch_ensemble(m)
    }
}

fn same_files(a: &Path, b: &Path, files: &[String]) -> Result<(), String> {
    for f in files {
        let (x, y) = (std::fs::read(a.join(f)), std::fs::read(b.join(f)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            (Ok(_), Ok(_)) => return Err(format!("{f} differs")),
            _ => return Err(format!("{f} missing")),
        }
    }
    Ok(())
}

fn c8_resume() -> Outcome {
    let splits = reference_splits();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SelfTrainConfig::default();
    let fresh = || SyntheticBackend::from_splits(reference_backend(0), &splits).unwrap();
    let (full, resumed) = (tmp.path().join("full"), tmp.path().join("resumed"));

    run_self_training(&cfg, &mut fresh(), &splits, &RunDir::new(&full), serde_json::Value::Null).map_err(|e| e.to_string())?;
    let mut killed = Killed { inner: fresh(), fail_at: 3 };
    let err = run_self_training(&cfg, &mut killed, &splits, &RunDir::new(&resumed), serde_json::Value::Null);
    ensure(err.is_err(), "the killed run did not stop")?;
    ensure(RunDir::new(&resumed).completed_rounds() == vec![0, 1, 2], "unexpected checkpoints after the kill")?;
    let out = run_self_training(&cfg, &mut fresh(), &splits, &RunDir::new(&resumed), serde_json::Value::Null)
        .map_err(|e| e.to_string())?;
    ensure(out.resumed_after == Some(2), format!("resumed after {:?}", out.resumed_after))?;

    let mut files: Vec<String> = (0..=4)
        .flat_map(|k| ["manifest.jsonl", "mined.jsonl", "metrics.json", "state.json"].map(|f| format!("round_{k}/{f}")))
        .filter(|f| !f.starts_with("round_0/mined"))
        .collect();
    files.push("ensemble/metrics.json".into());
    files.push("run.json".into());
    same_files(&full, &resumed, &files)?;

    // the same through the binary: three single rounds, then the rest
    let cli = tmp.path().join("cli");
    let bin = env!("CARGO_BIN_EXE_selftrain");
    for sub in ["mine", "mine", "mine", "run"] {
        let o = Command::new(bin)
            .args([sub, "--run-dir"])
            .arg(&cli)
            .env_remove("SELFTRAIN_INDEX")
            .env_remove("SELFTRAIN_TEST_LIST")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), format!("selftrain {sub}: {}", String::from_utf8_lossy(&o.stderr)))?;
    }
    let cli_full = tmp.path().join("cli_full");
    let o = Command::new(bin).args(["run", "--run-dir"]).arg(&cli_full).output().map_err(|e| e.to_string())?;
    ensure(o.status.success(), "uninterrupted CLI run failed")?;
    same_files(&cli, &cli_full, &files)?;
    Ok(format!("{} files byte-identical in-process and through the CLI", files.len()))
}

fn c9_external_protocol() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let results = stub::suite(tmp.path());
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    ensure(failed.is_empty(), failed.join("; "))?;
    Ok(format!("{} conformance checks", results.len()))
}

fn c10_ingestion() -> Outcome {
    let (index, _) = mini_index();
    let want: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("DL_info_mini.expected.json")).unwrap()).unwrap();
    let s = index.summary("all");
    let got = [index.len(), s.patients, s.studies, s.series, s.lesions];
    let exp = ["records", "patients", "studies", "series", "lesions"].map(|k| want[k].as_u64().unwrap() as usize);
    ensure(got == exp, format!("counts {got:?} vs {exp:?}"))?;
    let records: Vec<SliceRecord> = index.records().cloned().collect();
    let counts = class_counts(&records);
    for t in LesionTag::TAGGED {
        ensure(counts.get(t) as u64 == want["per_class"][t.as_str()].as_u64().unwrap(), format!("{t:?} count"))?;
    }
    let text = manifest_to_string(&records).map_err(|e| e.to_string())?;
    let back = parse_manifest(text.as_bytes(), "mem").map_err(|e| e.to_string())?;
    ensure(back == records, "records changed in the round trip")?;
    ensure(manifest_to_string(&back).unwrap() == text, "manifest text changed in the round trip")?;
    Ok(format!("{} records, {} lesions, round trip identical ({} bytes)", index.len(), s.lesions, text.len()))
}

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 10] = [
        (1, "mean aggregation", Duration::from_secs(1), c1_mean_aggregation),
        (2, "WBF oracle equivalence", Duration::from_secs(10), c2_wbf_oracle),
        (3, "FROC oracle equivalence", Duration::from_secs(10), c3_froc_oracle),
        (4, "upsampler contract", Duration::from_secs(1), c4_upsampler),
        (5, "split invariants", Duration::from_secs(5), c5_splits),
        (6, "threshold monotonicity", Duration::from_secs(5), c6_threshold_monotonicity),
        (7, "qualitative dynamics", Duration::from_secs(60), c7_dynamics),
        (8, "determinism and resume", Duration::from_secs(90), c8_resume),
        (9, "external protocol", Duration::from_secs(10), c9_external_protocol),
        (10, "DeepLesion ingestion", Duration::from_secs(1), c10_ingestion),
    ];
    let mut failures = 0;
    for (id, name, budget, f) in criteria {
        let start = Instant::now();
        let res = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let (ok, detail) = match res {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(e) => (false, e),
        };
        common::report(id, name, ok, &format!("{detail} ({:.2}s / {}s)", took.as_secs_f64(), budget.as_secs()));
        failures += usize::from(!ok);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}

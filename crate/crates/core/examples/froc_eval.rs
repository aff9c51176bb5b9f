//! FROC evaluation of a synthetic detector on the test split: the curve,
//! sensitivity at the standard operating points and the tag confusion.
//!
//!     cargo run --example froc_eval

use lesion_selftrain::dataset::build_splits;
use lesion_selftrain::detector::{predict_ensemble, SyntheticBackend, TrainRequest};
use lesion_selftrain::eval::{evaluate, images_from};
use lesion_selftrain::reports::confusion_csv;
use lesion_selftrain::scenario::{reference_backend, ScenarioConfig};
use lesion_selftrain::{DetectorBackend, EvalConfig, FusionConfig, LesionTag, SliceKey};

fn main() -> lesion_selftrain::Result<()> {
    let s = ScenarioConfig::default().generate()?;
    let splits = build_splits(&s.index, &s.test_list, 0.7, 0)?;
    let mut backend = SyntheticBackend::from_splits(reference_backend(0), &splits)?;
    let tmp = tempfile::tempdir().expect("temp dir");
    let model = backend.train(&TrainRequest {
        round: 0,
        records: &splits.f_tr,
        manifest: &tmp.path().join("m.jsonl"),
        out_dir: tmp.path(),
    })?;
    let keys: Vec<SliceKey> = splits.f_t.iter().map(|r| r.key.clone()).collect();
    let preds = predict_ensemble(&mut backend, &model, &keys, &FusionConfig::default())?;

    let cfg = EvalConfig::default();
    let e = evaluate(&images_from(&splits.f_t, &preds), &cfg)?;
    println!("{} images, {} lesions, {} curve points", e.curve.n_images, e.curve.total_gt, e.curve.points.len());
    for fp in &cfg.fp_per_image_points {
        println!(
            "  {fp:>4} FP/image: {:5.1}%  (threshold {:.3})",
            e.curve.sensitivity_at(*fp) * 100.0,
            e.curve.operating_threshold(*fp)
        );
    }
    println!("\nper class at {} FP/image:", cfg.primary_operating_point);
    for t in LesionTag::TABLE_ORDER {
        match e.report.get(t) {
            Some(v) => println!("  {:12} {:5.1}%", t.as_str(), v * 100.0),
            None => println!("  {:12}   n/a", t.as_str()),
        }
    }
    println!("mean {:.1}%\n\nconfusion (rows: truth):\n{}", e.report.mean * 100.0, confusion_csv(&e.confusion));
    Ok(())
}

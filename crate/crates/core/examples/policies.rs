//! Threshold schedules and how many baseline predictions each keeps.
//!
//!     cargo run --example policies

use lesion_selftrain::dataset::build_splits;
use lesion_selftrain::detector::{predict_ensemble, SyntheticBackend, TrainRequest};
use lesion_selftrain::mining::filter_mined;
use lesion_selftrain::policy::builtin_policies;
use lesion_selftrain::reports::thresholds_csv;
use lesion_selftrain::scenario::{reference_backend, ScenarioConfig};
use lesion_selftrain::{DetectorBackend, FusionConfig, SliceKey};

fn main() -> lesion_selftrain::Result<()> {
    let policies = builtin_policies();
    print!("{}", thresholds_csv(&policies));

    let s = ScenarioConfig::default().generate()?;
    let splits = build_splits(&s.index, &s.test_list, 0.7, 0)?;
    let mut backend = SyntheticBackend::from_splits(reference_backend(0), &splits)?;
    let tmp = tempfile::tempdir().expect("temp dir");
    let manifest = tmp.path().join("m.jsonl");
    let model = backend.train(&TrainRequest {
        round: 0,
        records: &splits.f_tr,
        manifest: &manifest,
        out_dir: tmp.path(),
    })?;
    let pool: Vec<SliceKey> = splits.o_tr.iter().map(|r| r.key.clone()).collect();
    let preds = predict_ensemble(&mut backend, &model, &pool, &FusionConfig::default())?;

    println!("\nbaseline predictions kept on {} pool slices:", pool.len());
    for p in &policies {
        let kept: Vec<usize> = (1..=p.rounds() as u32)
            .map(|k| filter_mined(&preds, p.threshold_for_round(k).unwrap()).values().map(Vec::len).sum())
            .collect();
        println!("  {:14} {:?}", p.name, kept);
    }
    Ok(())
}

//! Four rounds of self-training on the generated reference scenario with
//! the synthetic detector, with and without class-balancing upsampling.
//!
//!     cargo run --release --example self_training [policy]

use lesion_selftrain::dataset::build_splits;
use lesion_selftrain::detector::SyntheticBackend;
use lesion_selftrain::mining::{run_self_training, RunDir, SelfTrainConfig};
use lesion_selftrain::policy::{PolicySpec, ThresholdPolicy};
use lesion_selftrain::reports::run_report;
use lesion_selftrain::scenario::{reference_backend, ScenarioConfig};
use lesion_selftrain::LesionTag;

fn main() -> lesion_selftrain::Result<()> {
    let policy = match std::env::args().nth(1) {
        Some(p) => PolicySpec::parse_arg(&p)?.resolve()?,
        None => ThresholdPolicy::variable(),
    };
    let scenario = ScenarioConfig::default().generate()?;
    let splits = build_splits(&scenario.index, &scenario.test_list, 0.7, 0)?;
    for row in splits.summary() {
        println!("{:5} {:3} patients {:4} slices {:4} lesions", row.name, row.patients, row.slices, row.lesions);
    }

    let tmp = tempfile::tempdir().expect("temp dir");
    for upsample in [false, true] {
        let cfg = SelfTrainConfig {
            policy: policy.clone(),
            upsample,
            ..SelfTrainConfig::default()
        };
        let mut backend = SyntheticBackend::from_splits(reference_backend(0), &splits)?;
        let dir = RunDir::new(tmp.path().join(if upsample { "upsampled" } else { "plain" }));
        let out = run_self_training(&cfg, &mut backend, &splits, &dir, serde_json::Value::Null)?;
        let report = run_report(&out.states, out.ensemble.as_ref(), &policy.name);
        println!("\n== upsampling {} ==", if upsample { "on" } else { "off" });
        print!("{}\n{}", report.sensitivity.to_text(), report.mined.to_text());
        let bone = |k: usize| out.states[k].mined_counts.share(LesionTag::Bone) * 100.0;
        println!("bone share of mined lesions: round 1 {:.1}%, round 4 {:.1}%", bone(1), bone(4));
    }
    Ok(())
}

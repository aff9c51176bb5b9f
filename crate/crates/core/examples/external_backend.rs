//! Drives a detector living in another process over the line-delimited
//! JSON protocol. Without arguments the example re-executes itself as a
//! scripted child (`--serve`); pass a real command to use your own.
//!
//!     cargo run --example external_backend
//!     cargo run --example external_backend -- python my_detector.py

use std::io::{self, BufReader};

use lesion_selftrain::dataset::{build_splits, load_deeplesion_index, read_slice_list};
use lesion_selftrain::detector::stub::{run_stub, StubMode};
use lesion_selftrain::detector::{ExternalBackend, ExternalConfig};
use lesion_selftrain::mining::{run_self_training, RunDir, SelfTrainConfig};
use lesion_selftrain::reports::run_report;

fn main() -> lesion_selftrain::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.first().map(String::as_str) == Some("--serve") {
        let stdin = io::stdin();
        run_stub(StubMode::Fixed(0.93), BufReader::new(stdin.lock()), io::stdout().lock())
            .map_err(|e| lesion_selftrain::Error::io("<stdio>", e))?;
        return Ok(());
    }
    let command = if args.is_empty() {
        vec![std::env::current_exe().unwrap().display().to_string(), "--serve".into()]
    } else {
        args
    };

    let fixtures = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    let index = load_deeplesion_index(format!("{fixtures}/DL_info_mini.csv"))?;
    let test = read_slice_list(format!("{fixtures}/test_slices.txt"))?;
    let splits = build_splits(&index, &test, 0.7, 0)?;

    let mut backend = ExternalBackend::new(ExternalConfig {
        command,
        timeout_secs: 60.0,
        handshake: true,
        ..ExternalConfig::default()
    })?;
    let cfg = SelfTrainConfig {
        rounds: 2,
        upsample: false,
        ..SelfTrainConfig::default()
    };
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = run_self_training(&cfg, &mut backend, &splits, &RunDir::new(tmp.path()), serde_json::Value::Null)?;
    let report = run_report(&out.states, out.ensemble.as_ref(), &cfg.policy.name);
    print!("{}\n{}", report.sensitivity.to_text(), report.mined.to_text());
    Ok(())
}

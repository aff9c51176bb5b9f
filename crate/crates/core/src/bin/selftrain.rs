use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lesion_selftrain::config::{BackendKind, RunConfig};
use lesion_selftrain::dataset::{write_manifest, SliceKey, SliceRecord, SplitSet};
use lesion_selftrain::detector::protocol::{read_predictions, write_predictions};
use lesion_selftrain::detector::stub::{run_stub, StubMode};
use lesion_selftrain::detector::Predictions;
use lesion_selftrain::eval::{evaluate, images_from};
use lesion_selftrain::fusion::weighted_boxes_fusion;
use lesion_selftrain::mining::{advance, load_states, run_self_training, RoundMetrics, RunDir};
use lesion_selftrain::policy::PolicySpec;
use lesion_selftrain::reports::{
    collect_plotdata, confusion_csv, froc_csv, load_run_report, run_report, split_csv, split_table,
    write_plotdata, write_run_report, write_text,
};
use lesion_selftrain::{Error, Result};

#[derive(Parser)]
#[command(name = "selftrain", version, about = "Self-training for lesion detection and tagging")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// static | semi_variable | variable | comma-separated percents.
    #[arg(long, global = true)]
    policy: Option<String>,
    #[arg(long, global = true)]
    rounds: Option<u32>,
    #[arg(long, global = true)]
    no_upsample: bool,
    /// synthetic | external
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Seed for splitting and self-training.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the patient-disjoint splits and print their summary.
    Split {
        /// Output directory (default: <run-dir>/splits).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run (or resume) the full self-training loop.
    Run,
    /// Run the next single round of an existing run directory.
    Mine,
    /// Evaluate a predictions file against a split.
    Eval {
        predictions: PathBuf,
        /// f_t | f_v | f_tr
        #[arg(long, default_value = "f_t")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse prediction files with weighted boxes fusion.
    Fuse {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit box-overlay and threshold data for plotting.
    Plotdata {
        /// Output directory (default: <run-dir>/plotdata).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render the result tables of a run directory.
    Report,
    #[command(hide = true)]
    StubBackend {
        #[arg(long, default_value = "empty")]
        mode: String,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    if let Some(d) = &g.run_dir {
        cfg.paths.run_dir = Some(d.clone());
    }
    if let Some(p) = &g.policy {
        cfg.selftrain.policy = PolicySpec::parse_arg(p)?;
    }
    if let Some(r) = g.rounds {
        cfg.selftrain.rounds = Some(r);
    }
    if g.no_upsample {
        cfg.selftrain.upsample = false;
    }
    if let Some(b) = &g.backend {
        cfg.backend.kind = b.parse::<BackendKind>()?;
    }
    if let Some(s) = g.seed {
        cfg.split.seed = s;
        cfg.selftrain.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig) -> Result<RunDir> {
    cfg.paths
        .run_dir
        .clone()
        .map(RunDir::new)
        .ok_or_else(|| Error::Config("no run directory: pass --run-dir or set paths.run_dir".into()))
}

fn write_splits(splits: &SplitSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, records) in [
        ("o_tr", &splits.o_tr),
        ("f_tr", &splits.f_tr),
        ("f_v", &splits.f_v),
        ("f_t", &splits.f_t),
        ("o_tr_stripped", &splits.o_tr_stripped),
    ] {
        write_manifest(dir.join(format!("{name}.jsonl")), records)?;
    }
    let summary = splits.summary();
    write_text(&dir.join("summary.csv"), &split_csv(&summary)?)?;
    write_text(&dir.join("summary.txt"), &split_table(&summary))
}

fn print_report(states: &[lesion_selftrain::MiningRoundState], ensemble: Option<&RoundMetrics>, policy: &str, dir: &Path) -> Result<()> {
    let report = run_report(states, ensemble, policy);
    write_run_report(&report, dir)?;
    print!("{}\n{}", report.sensitivity.to_text(), report.mined.to_text());
    Ok(())
}

fn split_records<'a>(splits: &'a SplitSet, name: &str) -> Result<&'a [SliceRecord]> {
    match name {
        "f_t" => Ok(&splits.f_t),
        "f_v" => Ok(&splits.f_v),
        "f_tr" => Ok(&splits.f_tr),
        _ => Err(Error::Config(format!("unknown split {name:?}; expected f_t, f_v or f_tr"))),
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Cmd::StubBackend { mode } = &cli.cmd {
        let mode: StubMode = mode.parse().map_err(Error::Config)?;
        let stdin = io::stdin();
        return run_stub(mode, BufReader::new(stdin.lock()), io::stdout().lock())
            .map_err(|e| Error::io("<stdio>", e));
    }
    let cfg = load_config(&cli.global)?;
    match cli.cmd {
        Cmd::Split { out } => {
            let splits = cfg.build_splits()?;
            let dir = match out {
                Some(d) => d,
                None => run_dir(&cfg)?.root().join("splits"),
            };
            write_splits(&splits, &dir)?;
            print!("{}", split_table(&splits.summary()));
        }
        Cmd::Run => {
            let rd = run_dir(&cfg)?;
            let splits = cfg.build_splits()?;
            write_splits(&splits, &rd.root().join("splits"))?;
            let st = cfg.selftrain_config()?;
            let mut backend = cfg.build_backend(&splits)?;
            let out = run_self_training(&st, &mut backend, &splits, &rd, cfg.run_context())?;
            print_report(&out.states, out.ensemble.as_ref(), &st.policy.name, &rd.root().join("report"))?;
        }
        Cmd::Mine => {
            let rd = run_dir(&cfg)?;
            let splits = cfg.build_splits()?;
            let st = cfg.selftrain_config()?;
            st.validate()?;
            let mut states = load_states(&rd)?;
            if states.len() > st.rounds as usize {
                return Err(Error::Config(format!("all {} rounds are already complete", st.rounds)));
            }
            if states.is_empty() {
                write_splits(&splits, &rd.root().join("splits"))?;
            }
            let mut backend = cfg.build_backend(&splits)?;
            advance(&st, &mut backend, &splits, &rd, &mut states)?;
            let last = states.last().expect("a round was just added");
            eprintln!("round {} complete, {} lesions mined so far", last.round, last.mined_counts.total());
            print_report(&states, None, &st.policy.name, &rd.root().join("report"))?;
        }
        Cmd::Eval { predictions, split, out } => {
            let splits = cfg.build_splits()?;
            let records = split_records(&splits, &split)?;
            let preds = read_predictions(&predictions)?;
            if preds.values().all(Vec::is_empty) {
                log::warn!("{} holds no detections", predictions.display());
            }
            let e = evaluate(&images_from(records, &preds), &cfg.eval)?;
            let policy = cfg.selftrain_config()?.policy.name;
            let m = RoundMetrics::from_evaluation(None, &policy, &cfg.eval, &e);
            let mut body = serde_json::to_string_pretty(&m)?;
            body.push('\n');
            write_text(&out.join("metrics.json"), &body)?;
            write_text(&out.join("froc.csv"), &froc_csv(&e.curve))?;
            write_text(&out.join("confusion.csv"), &confusion_csv(&e.confusion))?;
            println!("mean sensitivity at {} FP/image: {:.1}%", m.operating_point, m.mean * 100.0);
        }
        Cmd::Fuse { inputs, out } => {
            let maps = inputs.iter().map(read_predictions).collect::<Result<Vec<_>>>()?;
            let keys: std::collections::BTreeSet<&SliceKey> = maps.iter().flat_map(|m| m.keys()).collect();
            let fcfg = cfg.fusion.with_model_count(maps.len());
            let mut fused = Predictions::new();
            for k in keys {
                let lists: Vec<_> = maps.iter().map(|m| m.get(k).cloned().unwrap_or_default()).collect();
                let f = weighted_boxes_fusion(&lists, &fcfg)?;
                if !f.is_empty() {
                    fused.insert(k.clone(), f);
                }
            }
            write_predictions(&out, &fused)?;
        }
        Cmd::Plotdata { out } => {
            let rd = run_dir(&cfg)?;
            let data = collect_plotdata(&rd)?;
            let dir = out.unwrap_or_else(|| rd.root().join("plotdata"));
            write_plotdata(&data, &dir)?;
            println!("{} overlay records", data.overlays.len());
        }
        Cmd::Report => {
            let rd = run_dir(&cfg)?;
            let report = load_run_report(&rd)?;
            write_run_report(&report, &rd.root().join("report"))?;
            print!("{}\n{}", report.sensitivity.to_text(), report.mined.to_text());
        }
        Cmd::StubBackend { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

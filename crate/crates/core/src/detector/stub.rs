//! A scripted external backend used for protocol conformance tests and
//! for dry runs of the external-process path. The `selftrain` binary
//! exposes it as the hidden `stub-backend` subcommand.

use std::fs;
use std::io::{self, BufRead, Write};
use std::thread;
use std::time::Duration;

use super::protocol::{Done, Reply, Request, SlicePredictions, PROTOCOL_VERSION};
use crate::dataset::LesionTag;
use crate::fusion::Detection;
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StubMode {
    /// Zero detections for every slice.
    Empty,
    /// One lung detection at `[10, 10, 50, 50]` per slice with this score.
    Fixed(f64),
    /// Answers predict requests with a line that is not JSON.
    Malformed,
    /// Sleeps this long before every reply.
    Slow(u64),
    /// Exits after emitting the first predict line.
    Crash,
    /// Refuses to train.
    Fail,
}

impl std::str::FromStr for StubMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        match name {
            "empty" => Ok(StubMode::Empty),
            "fixed" => Ok(StubMode::Fixed(if arg.is_empty() { 0.95 } else {
                arg.parse().map_err(|_| format!("bad score {arg:?}"))?
            })),
            "malformed" => Ok(StubMode::Malformed),
            "slow" => Ok(StubMode::Slow(if arg.is_empty() { 5000 } else {
                arg.parse().map_err(|_| format!("bad delay {arg:?}"))?
            })),
            "crash" => Ok(StubMode::Crash),
            "fail" => Ok(StubMode::Fail),
            _ => Err(format!("unknown stub mode {s:?}")),
        }
    }
}

fn reply<W: Write>(out: &mut W, v: &impl serde::Serialize) -> io::Result<()> {
    serde_json::to_writer(&mut *out, v)?;
    out.write_all(b"\n")?;
    out.flush()
}

/// Serves requests from `input` until EOF.
pub fn run_stub<R: BufRead, W: Write>(mode: StubMode, input: R, mut out: W) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let StubMode::Slow(ms) = mode {
            thread::sleep(Duration::from_millis(ms));
        }
        let req: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                reply(&mut out, &Reply::failure(format!("bad request: {e}")))?;
                continue;
            }
        };
        match req {
            Request::Hello => reply(
                &mut out,
                &Reply {
                    protocol: Some(PROTOCOL_VERSION),
                    ..Reply::ok()
                },
            )?,
            Request::Train { out_dir, round, .. } => {
                if mode == StubMode::Fail {
                    reply(&mut out, &Reply::failure(format!("refusing to train round {round}")))?;
                    continue;
                }
                fs::create_dir_all(&out_dir)?;
                fs::write(format!("{out_dir}/stub-model.txt"), format!("round {round}\n"))?;
                reply(
                    &mut out,
                    &Reply {
                        model: Some(out_dir),
                        ..Reply::ok()
                    },
                )?;
            }
            Request::Predict { slices, .. } => {
                if mode == StubMode::Malformed {
                    out.write_all(b"this is not json\n")?;
                    out.flush()?;
                    continue;
                }
                for (i, key) in slices.into_iter().enumerate() {
                    let detections = match mode {
                        StubMode::Fixed(score) => vec![Detection::new(
                            BBox::new(10.0, 10.0, 50.0, 50.0).expect("valid box"),
                            LesionTag::Lung,
                            score,
                        )],
                        _ => Vec::new(),
                    };
                    reply(&mut out, &SlicePredictions { key, detections })?;
                    if mode == StubMode::Crash && i == 0 {
                        std::process::exit(17);
                    }
                }
                reply(&mut out, &Done { done: true })?;
            }
        }
    }
    Ok(())
}

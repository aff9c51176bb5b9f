//! Detector backend that drives a child process over stdin/stdout.
//!
//! Requests and responses are strictly serialized: one request is written,
//! then its response lines are read before anything else is sent. A
//! reader thread forwards stdout lines over a channel so every read can be
//! bounded by the configured timeout.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::protocol::{Reply, Request, SlicePredictions, PROTOCOL_VERSION};
use super::{DetectorBackend, ModelHandle, Predictions, TrainRequest};
use crate::dataset::SliceKey;
use crate::error::BackendError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalConfig {
    /// Program and arguments.
    pub command: Vec<String>,
    pub timeout_secs: f64,
    pub max_line_bytes: usize,
    /// Send `{"cmd":"hello"}` after spawning and require `{"ok":true}`.
    pub handshake: bool,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        ExternalConfig {
            command: Vec::new(),
            timeout_secs: 3600.0,
            max_line_bytes: 16 * 1024 * 1024,
            handshake: false,
        }
    }
}

enum LineEvent {
    Line(String),
    TooLong(usize),
    Eof,
    Failed(std::io::Error),
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<LineEvent>,
    line_no: usize,
}

pub struct ExternalBackend {
    cfg: ExternalConfig,
    session: Option<Session>,
}

fn reader_loop<R: Read>(out: R, max: usize, tx: mpsc::Sender<LineEvent>) {
    let mut reader = BufReader::new(out);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let res = (&mut reader).take(max as u64 + 1).read_until(b'\n', &mut buf);
        let ev = match res {
            Ok(0) => LineEvent::Eof,
            Ok(_) => {
                if buf.last() == Some(&b'\n') {
                    buf.pop();
                    if buf.last() == Some(&b'\r') {
                        buf.pop();
                    }
                }
                if buf.len() > max {
                    LineEvent::TooLong(buf.len())
                } else {
                    LineEvent::Line(String::from_utf8_lossy(&buf).into_owned())
                }
            }
            Err(e) => LineEvent::Failed(e),
        };
        let stop = !matches!(ev, LineEvent::Line(_));
        if tx.send(ev).is_err() || stop {
            return;
        }
    }
}

impl ExternalBackend {
    pub fn new(cfg: ExternalConfig) -> Result<Self, BackendError> {
        if cfg.command.is_empty() {
            return Err(BackendError::Other("external backend needs a command".into()));
        }
        if !(cfg.timeout_secs > 0.0) || cfg.max_line_bytes == 0 {
            return Err(BackendError::Other("timeout and max line length must be positive".into()));
        }
        Ok(ExternalBackend { cfg, session: None })
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.cfg.timeout_secs)
    }

    fn spawn(&mut self) -> Result<(), BackendError> {
        let mut child = Command::new(&self.cfg.command[0])
            .args(&self.cfg.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| BackendError::Spawn {
                command: self.cfg.command.join(" "),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        let max = self.cfg.max_line_bytes;
        thread::spawn(move || reader_loop(stdout, max, tx));
        self.session = Some(Session {
            child,
            stdin,
            lines: rx,
            line_no: 0,
        });
        if self.cfg.handshake {
            let reply: Reply = self.exchange(&Request::Hello)?;
            if !reply.ok {
                return Err(self.fail(BackendError::Remote(
                    reply.error.unwrap_or_else(|| "handshake refused".into()),
                )));
            }
            if let Some(v) = reply.protocol {
                if v != PROTOCOL_VERSION {
                    return Err(self.fail(BackendError::Other(format!(
                        "child speaks protocol {v}, expected {PROTOCOL_VERSION}"
                    ))));
                }
            }
        }
        Ok(())
    }

    /// Kills the child and drops the session; the next call respawns.
    fn fail(&mut self, err: BackendError) -> BackendError {
        if let Some(mut s) = self.session.take() {
            let _ = s.child.kill();
            let _ = s.child.wait();
        }
        err
    }

    fn session(&mut self) -> Result<&mut Session, BackendError> {
        if self.session.is_none() {
            self.spawn()?;
        }
        Ok(self.session.as_mut().expect("session just spawned"))
    }

    fn send(&mut self, req: &Request) -> Result<(), BackendError> {
        let line = serde_json::to_string(req).map_err(|e| BackendError::Other(e.to_string()))?;
        let s = self.session()?;
        let res = s
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| s.stdin.write_all(b"\n"))
            .and_then(|_| s.stdin.flush());
        if let Err(e) = res {
            let err = match s.child.try_wait() {
                Ok(Some(status)) => BackendError::Exited {
                    status: status.to_string(),
                },
                _ => BackendError::Pipe(e),
            };
            return Err(self.fail(err));
        }
        Ok(())
    }

    fn next_line(&mut self, deadline: Instant) -> Result<(usize, String), BackendError> {
        let timeout = self.timeout();
        let s = self.session.as_mut().ok_or_else(|| BackendError::Other("no session".into()))?;
        let wait = deadline.saturating_duration_since(Instant::now());
        let ev = s.lines.recv_timeout(wait);
        let err = match ev {
            Ok(LineEvent::Line(l)) => {
                s.line_no += 1;
                return Ok((s.line_no, l));
            }
            Ok(LineEvent::TooLong(n)) => {
                s.line_no += 1;
                BackendError::Protocol {
                    line: s.line_no,
                    message: format!("line longer than {} bytes ({n} read)", self.cfg.max_line_bytes),
                    text: String::new(),
                }
            }
            Ok(LineEvent::Failed(e)) => BackendError::Pipe(e),
            Ok(LineEvent::Eof) | Err(RecvTimeoutError::Disconnected) => {
                let status = s
                    .child
                    .wait()
                    .map(|st| st.to_string())
                    .unwrap_or_else(|e| e.to_string());
                BackendError::Exited { status }
            }
            Err(RecvTimeoutError::Timeout) => BackendError::Timeout(timeout),
        };
        Err(self.fail(err))
    }

    fn protocol_error(&mut self, line: usize, message: impl Into<String>, text: &str) -> BackendError {
        let mut text = text.to_string();
        if text.len() > 200 {
            let mut cut = 200;
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            text.truncate(cut);
        }
        self.fail(BackendError::Protocol {
            line,
            message: message.into(),
            text,
        })
    }

    fn exchange<T: for<'de> Deserialize<'de>>(&mut self, req: &Request) -> Result<T, BackendError> {
        self.send(req)?;
        let deadline = Instant::now() + self.timeout();
        let (n, line) = self.next_line(deadline)?;
        serde_json::from_str(&line).map_err(|e| self.protocol_error(n, e.to_string(), &line))
    }

    /// Sends the optional hello message and waits for the acknowledgement.
    pub fn handshake(&mut self) -> Result<(), BackendError> {
        if self.session.is_none() {
            self.spawn()?;
            if self.cfg.handshake {
                return Ok(());
            }
        }
        let reply: Reply = self.exchange(&Request::Hello)?;
        if reply.ok {
            Ok(())
        } else {
            Err(BackendError::Remote(reply.error.unwrap_or_default()))
        }
    }

    /// Closes stdin and waits for the child to exit.
    pub fn shutdown(&mut self) {
        if let Some(mut s) = self.session.take() {
            drop(s.stdin);
            let deadline = Instant::now() + Duration::from_secs(2);
            loop {
                match s.child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(10)),
                    _ => {
                        let _ = s.child.kill();
                        let _ = s.child.wait();
                        break;
                    }
                }
            }
        }
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

impl DetectorBackend for ExternalBackend {
    fn train(&mut self, req: &TrainRequest<'_>) -> Result<ModelHandle, BackendError> {
        let reply: Reply = self.exchange(&Request::Train {
            manifest: path_str(req.manifest),
            round: req.round,
            out_dir: path_str(req.out_dir),
        })?;
        if !reply.ok {
            return Err(BackendError::Remote(
                reply.error.unwrap_or_else(|| "training failed".into()),
            ));
        }
        let model = reply.model.ok_or_else(|| {
            let n = self.session.as_ref().map_or(0, |s| s.line_no);
            self.protocol_error(n, "train reply without a model path", "")
        })?;
        let state = match reply.epochs {
            Some(e) => serde_json::json!({ "epochs": e }),
            None => serde_json::Value::Null,
        };
        Ok(ModelHandle {
            id: format!("external-round{}", req.round),
            round: req.round,
            epoch: None,
            location: model,
            state,
        })
    }

    fn predict(&mut self, model: &ModelHandle, slices: &[SliceKey]) -> Result<Predictions, BackendError> {
        self.send(&Request::Predict {
            model: model.location.clone(),
            slices: slices.to_vec(),
        })?;
        let asked: BTreeSet<&SliceKey> = slices.iter().collect();
        let mut out = Predictions::new();
        let mut seen: BTreeSet<SliceKey> = BTreeSet::new();
        let deadline_step = self.timeout();
        loop {
            let (n, line) = self.next_line(Instant::now() + deadline_step)?;
            let value: serde_json::Value = match serde_json::from_str(&line) {
                Ok(v) => v,
                Err(e) => return Err(self.protocol_error(n, format!("not JSON: {e}"), &line)),
            };
            if value.get("done").is_some() {
                if value.get("done") != Some(&serde_json::Value::Bool(true)) {
                    return Err(self.protocol_error(n, "done must be true", &line));
                }
                break;
            }
            if value.get("ok") == Some(&serde_json::Value::Bool(false)) {
                let msg = value
                    .get("error")
                    .and_then(|e| e.as_str())
                    .unwrap_or("prediction failed")
                    .to_string();
                return Err(BackendError::Remote(msg));
            }
            let sp: SlicePredictions = match serde_json::from_value(value) {
                Ok(sp) => sp,
                Err(e) => return Err(self.protocol_error(n, e.to_string(), &line)),
            };
            if !asked.contains(&sp.key) {
                return Err(self.protocol_error(n, format!("unrequested slice {}", sp.key), &line));
            }
            if !seen.insert(sp.key.clone()) {
                return Err(self.protocol_error(n, format!("duplicate slice {}", sp.key), &line));
            }
            if let Some(bad) = sp.detections.iter().find(|d| d.validate().is_err()) {
                let msg = bad.validate().unwrap_err().to_string();
                return Err(self.protocol_error(n, msg, &line));
            }
            let mut dets = sp.detections;
            for d in &mut dets {
                d.model_id = model.id.clone();
            }
            if !dets.is_empty() {
                out.insert(sp.key, dets);
            }
        }
        if seen.len() != asked.len() {
            let n = self.session.as_ref().map_or(0, |s| s.line_no);
            return Err(self.protocol_error(
                n,
                format!("done after {} of {} slices", seen.len(), asked.len()),
                "",
            ));
        }
        Ok(out)
    }

    fn epoch_ensemble(&mut self, model: &ModelHandle) -> Result<Vec<ModelHandle>, BackendError> {
        let epochs: Vec<String> = model
            .state
            .get("epochs")
            .and_then(|e| serde_json::from_value(e.clone()).ok())
            .unwrap_or_default();
        if epochs.is_empty() {
            return Ok(vec![model.clone()]);
        }
        Ok(epochs
            .into_iter()
            .take(5)
            .enumerate()
            .map(|(i, loc)| ModelHandle {
                id: format!("{}-epoch{i}", model.id),
                epoch: Some(i as u32),
                location: loc,
                state: serde_json::Value::Null,
                ..model.clone()
            })
            .collect())
    }
}

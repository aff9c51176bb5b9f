//! Line-delimited JSON messages exchanged with external detector
//! processes, plus the per-slice prediction file format that shares the
//! same line shape.
//!
//! ```text
//! -> {"cmd":"train","manifest":PATH,"round":K,"out_dir":PATH}
//! <- {"ok":true,"model":PATH}            | {"ok":false,"error":MSG}
//! -> {"cmd":"predict","model":PATH,"slices":[KEY,...]}
//! <- {"key":KEY,"detections":[{"box":[x1,y1,x2,y2],"tag":T,"score":S}]}   (one per slice)
//! <- {"done":true}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Predictions;
use crate::dataset::SliceKey;
use crate::error::{Error, Result};
use crate::fusion::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Request {
    Hello,
    Train {
        manifest: String,
        round: u32,
        out_dir: String,
    },
    Predict {
        model: String,
        slices: Vec<SliceKey>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Optional epoch checkpoints, best first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<u32>,
}

impl Reply {
    pub fn ok() -> Self {
        Reply {
            ok: true,
            model: None,
            epochs: None,
            error: None,
            protocol: None,
        }
    }

    pub fn failure(msg: impl Into<String>) -> Self {
        Reply {
            ok: false,
            error: Some(msg.into()),
            ..Reply::ok()
        }
    }
}

/// Predictions for one slice; also one line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicePredictions {
    pub key: SliceKey,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Done {
    pub done: bool,
}

pub const PROTOCOL_VERSION: u32 = 1;

/// Writes predictions as one JSON line per slice, in key order.
pub fn write_predictions(path: impl AsRef<Path>, preds: &Predictions) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (key, dets) in preds {
        let line = SlicePredictions {
            key: key.clone(),
            detections: dets.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Predictions> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Predictions::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            row: i + 1,
            message,
        };
        let sp: SlicePredictions = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        for d in &sp.detections {
            d.validate().map_err(|e| parse_err(e.to_string()))?;
        }
        out.entry(sp.key).or_default().extend(sp.detections);
    }
    Ok(out)
}

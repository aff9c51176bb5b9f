//! Paper-style result tables and plot data.
//!
//! Tables have one row per round, an "Ensemble of Rounds" row and a
//! "# Lesions mined" row, with the eight classes in table order plus a
//! Mean column. CSV keeps full precision; the text rendering uses one
//! decimal place.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_manifest, ClassCounts, LesionTag, SliceKey, SplitSummary};
use crate::detector::protocol::read_predictions;
use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, FrocCurve, SensitivityReport};
use crate::geometry::BBox;
use crate::mining::{read_json, MiningRoundState, RoundMetrics, RunDir};
use crate::policy::ThresholdPolicy;

pub const ENSEMBLE_ROW: &str = "Ensemble of Rounds";
pub const MINED_ROW: &str = "# Lesions mined";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// Fractions in [0, 1]; Mean is the unweighted class mean.
    Sensitivity,
    /// Lesion counts; Mean holds the total.
    Count,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub kind: RowKind,
    /// In `LesionTag::TABLE_ORDER`.
    pub values: [Option<f64>; 8],
    pub mean: Option<f64>,
}

impl TableRow {
    pub fn sensitivity(label: impl Into<String>, per_class: &BTreeMap<LesionTag, Option<f64>>, mean: f64) -> Self {
        TableRow {
            label: label.into(),
            kind: RowKind::Sensitivity,
            values: LesionTag::TABLE_ORDER.map(|t| per_class.get(&t).copied().flatten()),
            mean: Some(mean),
        }
    }

    pub fn from_report(label: impl Into<String>, r: &SensitivityReport) -> Self {
        Self::sensitivity(label, &r.per_class, r.mean)
    }

    pub fn counts(label: impl Into<String>, c: &ClassCounts) -> Self {
        TableRow {
            label: label.into(),
            kind: RowKind::Count,
            values: LesionTag::TABLE_ORDER.map(|t| Some(c.get(t) as f64)),
            mean: Some(c.total() as f64),
        }
    }

    pub fn get(&self, tag: LesionTag) -> Option<f64> {
        LesionTag::TABLE_ORDER
            .iter()
            .position(|t| *t == tag)
            .and_then(|i| self.values[i])
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsTable {
    pub title: String,
    pub rows: Vec<TableRow>,
}

fn header() -> Vec<String> {
    let mut h = vec!["row".to_string(), "kind".to_string()];
    h.extend(LesionTag::TABLE_ORDER.iter().map(|t| t.title().to_string()));
    h.push("Mean".into());
    h
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ResultsTable {
    pub fn new(title: impl Into<String>) -> Self {
        ResultsTable {
            title: title.into(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(header()).map_err(csv_err)?;
        for r in &self.rows {
            let kind = match r.kind {
                RowKind::Sensitivity => "sensitivity",
                RowKind::Count => "count",
            };
            let mut rec = vec![r.label.clone(), kind.to_string()];
            rec.extend(r.values.iter().map(|v| num(*v)));
            rec.push(num(r.mean));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv<R: Read>(reader: R, title: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(reader);
        let parse_err = |row: usize, message: String| Error::Parse {
            path: title.to_string(),
            row,
            message,
        };
        let h: Vec<String> = rd
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if h != header() {
            return Err(parse_err(1, format!("unexpected header {h:?}")));
        }
        let mut t = ResultsTable::new(title);
        for (i, rec) in rd.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| parse_err(row, e.to_string()))?;
            let cell = |j: usize| -> Result<Option<f64>> {
                let s = rec.get(j).unwrap_or("").trim();
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse()
                    .map(Some)
                    .map_err(|_| parse_err(row, format!("bad number {s:?} in column {}", j + 1)))
            };
            let kind = match rec.get(1) {
                Some("sensitivity") => RowKind::Sensitivity,
                Some("count") => RowKind::Count,
                other => return Err(parse_err(row, format!("bad row kind {other:?}"))),
            };
            let mut values = [None; 8];
            for (j, v) in values.iter_mut().enumerate() {
                *v = cell(j + 2)?;
            }
            t.rows.push(TableRow {
                label: rec.get(0).unwrap_or("").to_string(),
                kind,
                values,
                mean: cell(10)?,
            });
        }
        Ok(t)
    }

    /// Aligned text with percentages to one decimal place. Count rows
    /// show each class's share of the row total.
    pub fn to_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = Vec::new();
        let mut h = vec![String::new()];
        h.extend(LesionTag::TABLE_ORDER.iter().map(|t| t.title().to_string()));
        h.push("Mean".into());
        cells.push(h);
        for r in &self.rows {
            let mut line = vec![r.label.clone()];
            match r.kind {
                RowKind::Sensitivity => {
                    line.extend(r.values.iter().map(|v| v.map_or("-".into(), |x| format!("{:.1}%", x * 100.0))));
                    line.push(r.mean.map_or("-".into(), |x| format!("{:.1}%", x * 100.0)));
                }
                RowKind::Count => {
                    let total = r.mean.unwrap_or(0.0);
                    line.extend(r.values.iter().map(|v| match v {
                        Some(n) if total > 0.0 => format!("{n:.0} ({:.1}%)", n / total * 100.0),
                        Some(n) => format!("{n:.0}"),
                        None => "-".into(),
                    }));
                    line.push(r.mean.map_or("-".into(), |x| format!("{x:.0}")));
                }
            }
            cells.push(line);
        }
        render_aligned(&self.title, &cells)
    }
}

fn render_aligned(title: &str, cells: &[Vec<String>]) -> String {
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|j| cells.iter().filter_map(|r| r.get(j)).map(|c| c.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    if !title.is_empty() {
        let _ = writeln!(out, "{title}");
    }
    for row in cells {
        let mut line = String::new();
        for (j, c) in row.iter().enumerate() {
            if j == 0 {
                let _ = write!(line, "{c:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {c:>w$}", w = widths[j]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Sensitivity per round, the round ensemble, and the final cumulative
/// mined-lesion counts.
pub fn sensitivity_table(states: &[MiningRoundState], ensemble: Option<&RoundMetrics>, title: &str) -> ResultsTable {
    let mut t = ResultsTable::new(title);
    for s in states {
        if let Some(m) = &s.metrics {
            t.rows.push(TableRow::sensitivity(format!("Round {}", s.round), &m.per_class, m.mean));
        }
    }
    if let Some(m) = ensemble {
        t.rows.push(TableRow::sensitivity(ENSEMBLE_ROW, &m.per_class, m.mean));
    }
    if let Some(last) = states.last() {
        t.rows.push(TableRow::counts(MINED_ROW, &last.mined_counts));
    }
    t
}

/// Cumulative mined-lesion distribution after each mining round.
pub fn mined_table(states: &[MiningRoundState], title: &str) -> ResultsTable {
    let mut t = ResultsTable::new(title);
    for s in states.iter().filter(|s| s.round > 0) {
        t.rows.push(TableRow::counts(format!("Round {}", s.round), &s.mined_counts));
    }
    t
}

pub fn split_table(rows: &[SplitSummary]) -> String {
    let mut cells = vec![["Split", "Patients", "Studies", "Series", "Slices", "Lesions"]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    for r in rows {
        cells.push(vec![
            r.name.clone(),
            r.patients.to_string(),
            r.studies.to_string(),
            r.series.to_string(),
            r.slices.to_string(),
            r.lesions.to_string(),
        ]);
    }
    render_aligned("", &cells)
}

pub fn split_csv(rows: &[SplitSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

/// `threshold,fp_per_image,sensitivity`, one line per curve point.
pub fn froc_csv(curve: &FrocCurve) -> String {
    let mut s = String::from("threshold,fp_per_image,sensitivity\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.fp_per_image, p.sensitivity);
    }
    s
}

/// Rows are ground-truth tags, columns predicted tags.
pub fn confusion_csv(m: &ConfusionMatrix) -> String {
    let mut s = String::from("gt\\pred");
    for t in LesionTag::TAGGED {
        let _ = write!(s, ",{}", t.as_str());
    }
    s.push('\n');
    for (i, t) in LesionTag::TAGGED.iter().enumerate() {
        s.push_str(t.as_str());
        for c in m.counts[i] {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
    }
    s
}

/// Colour class of a box in an overlay plot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlayClass {
    /// Prediction at or above the round threshold that became a pseudo-label.
    Mined,
    /// Prediction below the round threshold.
    LowConfidence,
    /// Original annotation (ground truth, or a pool box stripped at split time).
    Original,
    /// Confident prediction dropped because it overlapped an existing annotation.
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayRecord {
    pub round: u32,
    pub key: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub tag: LesionTag,
    pub score: Option<f64>,
    pub class: OverlayClass,
}

impl OverlayRecord {
    fn new(round: u32, key: &SliceKey, b: &BBox, tag: LesionTag, score: Option<f64>, class: OverlayClass) -> Self {
        OverlayRecord {
            round,
            key: key.to_string(),
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
            tag,
            score,
            class,
        }
    }
}

/// Classifies one round's candidate predictions against the threshold and
/// the boxes actually mined. `originals` are drawn for every slice that
/// had candidates.
pub fn overlay_records(
    round: u32,
    threshold: f64,
    candidates: &BTreeMap<SliceKey, Vec<crate::fusion::Detection>>,
    mined: &BTreeMap<SliceKey, Vec<BBox>>,
    originals: &BTreeMap<SliceKey, Vec<(BBox, LesionTag)>>,
) -> Vec<OverlayRecord> {
    let mut out = Vec::new();
    for (key, dets) in candidates {
        for (b, tag) in originals.get(key).into_iter().flatten() {
            out.push(OverlayRecord::new(round, key, b, *tag, None, OverlayClass::Original));
        }
        let mined_here = mined.get(key);
        for d in dets {
            let class = if d.score < threshold {
                OverlayClass::LowConfidence
            } else if mined_here.is_some_and(|m| m.contains(&d.bbox)) {
                OverlayClass::Mined
            } else {
                OverlayClass::Duplicate
            };
            out.push(OverlayRecord::new(round, key, &d.bbox, d.tag, Some(d.score), class));
        }
    }
    out
}

/// `(round, threshold)` pairs of a policy.
pub fn threshold_series(p: &ThresholdPolicy) -> Vec<(u32, f64)> {
    p.thresholds.iter().enumerate().map(|(i, t)| (i as u32 + 1, *t)).collect()
}

pub fn thresholds_csv(policies: &[ThresholdPolicy]) -> String {
    let mut s = String::from("policy,round,threshold\n");
    for p in policies {
        for (r, t) in threshold_series(p) {
            let _ = writeln!(s, "{},{r},{t}", p.name);
        }
    }
    s
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotData {
    pub overlays: Vec<OverlayRecord>,
    pub thresholds: String,
}

/// File holding the pool boxes stripped at split time, inside a run dir.
pub const STRIPPED_FILE: &str = "splits/o_tr_stripped.jsonl";

/// Gathers overlay and threshold data from a run directory. Missing files
/// yield empty outputs.
pub fn collect_plotdata(run_dir: &RunDir) -> Result<PlotData> {
    let mut data = PlotData::default();
    let mut policies = Vec::new();
    let run_json = run_dir.run_json();
    if run_json.is_file() {
        let rec: crate::mining::RunRecord = read_json(&run_json)?;
        policies.push(rec.config.policy);
    }
    let mut seen = BTreeSet::new();
    for p in crate::policy::builtin_policies() {
        if !policies.iter().any(|q| q.name == p.name) {
            policies.push(p);
        }
    }
    policies.retain(|p| seen.insert(p.name.clone()));
    data.thresholds = if run_dir.root().is_dir() { thresholds_csv(&policies) } else { String::new() };

    let mut originals: BTreeMap<SliceKey, Vec<(BBox, LesionTag)>> = BTreeMap::new();
    let stripped = run_dir.root().join(STRIPPED_FILE);
    if stripped.is_file() {
        for r in read_manifest(&stripped)? {
            originals.insert(r.key, r.annotations.iter().map(|a| (a.bbox, a.tag)).collect());
        }
    }
    for k in run_dir.completed_rounds().into_iter().filter(|k| *k > 0) {
        let state = crate::mining::load_state(run_dir, k)?;
        let Some(threshold) = state.threshold else { continue };
        let cands = if run_dir.predictions(k).is_file() {
            read_predictions(run_dir.predictions(k))?
        } else {
            BTreeMap::new()
        };
        let mut mined: BTreeMap<SliceKey, Vec<BBox>> = BTreeMap::new();
        if run_dir.mined(k).is_file() {
            for r in read_manifest(run_dir.mined(k))? {
                mined.entry(r.key).or_default().extend(r.annotations.iter().map(|a| a.bbox));
            }
        }
        // originals on labeled slices come from the round's training set
        let mut orig = originals.clone();
        for r in &state.training_set {
            let gt: Vec<(BBox, LesionTag)> = r
                .annotations
                .iter()
                .filter(|a| !a.provenance.is_mined())
                .map(|a| (a.bbox, a.tag))
                .collect();
            if !gt.is_empty() {
                orig.insert(r.key.clone(), gt);
            }
        }
        data.overlays.extend(overlay_records(k, threshold, &cands, &mined, &orig));
    }
    Ok(data)
}

pub fn overlays_csv(records: &[OverlayRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "key", "x_min", "y_min", "x_max", "y_max", "tag", "score", "class"])
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    for r in records {
        let class = serde_json::to_value(r.class)?;
        w.write_record([
            r.round.to_string(),
            r.key.clone(),
            r.x_min.to_string(),
            r.y_min.to_string(),
            r.x_max.to_string(),
            r.y_max.to_string(),
            r.tag.as_str().to_string(),
            num(r.score),
            class.as_str().unwrap_or_default().to_string(),
        ])
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

/// Writes `overlays.csv` and `thresholds.csv` into `out_dir`.
pub fn write_plotdata(data: &PlotData, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("overlays.csv"), &overlays_csv(&data.overlays)?)?;
    write_text(&out_dir.join("thresholds.csv"), &data.thresholds)
}

pub fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Both tables of a run, as read back from its directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub sensitivity: ResultsTable,
    pub mined: ResultsTable,
}

pub fn run_report(states: &[MiningRoundState], ensemble: Option<&RoundMetrics>, policy: &str) -> RunReport {
    RunReport {
        sensitivity: sensitivity_table(states, ensemble, &format!("Sensitivity at 4 FP ({policy})")),
        mined: mined_table(states, &format!("Mined lesions ({policy})")),
    }
}

/// Re-renders the tables of an existing run directory.
pub fn load_run_report(run_dir: &RunDir) -> Result<RunReport> {
    let states = crate::mining::load_states(run_dir)?;
    let ens_path = run_dir.ensemble_metrics();
    let ensemble: Option<RoundMetrics> = if ens_path.is_file() { Some(read_json(&ens_path)?) } else { None };
    let policy = if run_dir.run_json().is_file() {
        read_json::<crate::mining::RunRecord>(&run_dir.run_json())?.config.policy.name
    } else {
        "unknown".into()
    };
    Ok(run_report(&states, ensemble.as_ref(), &policy))
}

/// Writes `sensitivity.{csv,txt}` and `mined.{csv,txt}` into `dir`.
pub fn write_run_report(report: &RunReport, dir: &Path) -> Result<()> {
    write_text(&dir.join("sensitivity.csv"), &report.sensitivity.to_csv()?)?;
    write_text(&dir.join("sensitivity.txt"), &report.sensitivity.to_text())?;
    write_text(&dir.join("mined.csv"), &report.mined.to_csv()?)?;
    write_text(&dir.join("mined.txt"), &report.mined.to_text())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Detection;

    fn row(values: [f64; 8]) -> TableRow {
        let r = SensitivityReport::from_per_class(
            {
                // values arrive in table order; the report wants code order
                let mut v = [None; 8];
                for (t, x) in LesionTag::TABLE_ORDER.iter().zip(values) {
                    v[t.index().unwrap()] = Some(x / 100.0);
                }
                v
            },
            4.0,
            ClassCounts::default(),
        );
        TableRow::from_report(ENSEMBLE_ROW, &r)
    }

    #[test]
    fn renders_one_decimal() {
        let mut t = ResultsTable::new("t");
        t.rows.push(row([77.4, 76.5, 83.8, 76.0, 81.8, 78.3, 72.0, 82.4]));
        let text = t.to_text();
        let line = text.lines().find(|l| l.starts_with(ENSEMBLE_ROW)).unwrap();
        assert!(line.contains("77.4%"), "{line}");
        assert!(line.trim_end().ends_with("78.5%"), "{line}");
    }

    #[test]
    fn csv_round_trip() {
        let mut t = ResultsTable::new("t");
        t.rows.push(row([61.3, 62.6, 77.1, 69.8, 77.1, 73.9, 71.2, 82.8]));
        let mut c = ClassCounts::default();
        c.add(LesionTag::Bone, 481);
        c.add(LesionTag::Lung, 4006);
        t.rows.push(TableRow::counts(MINED_ROW, &c));
        t.rows[0].values[3] = None;
        let s = t.to_csv().unwrap();
        let back = ResultsTable::from_csv(s.as_bytes(), "t").unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_csv().unwrap(), s);
    }

    #[test]
    fn overlay_classes() {
        let k = SliceKey::new("1", "1", "1", 1);
        let hi = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let lo = BBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        let cands = [(
            k.clone(),
            vec![
                Detection::new(hi, LesionTag::Liver, 0.95),
                Detection::new(lo, LesionTag::Liver, 0.5),
            ],
        )]
        .into();
        let mined = [(k.clone(), vec![hi])].into();
        let recs = overlay_records(1, 0.9, &cands, &mined, &BTreeMap::new());
        let classes: Vec<OverlayClass> = recs.iter().map(|r| r.class).collect();
        assert_eq!(classes, vec![OverlayClass::Mined, OverlayClass::LowConfidence]);
    }

    #[test]
    fn variable_series() {
        assert_eq!(
            threshold_series(&ThresholdPolicy::variable()),
            vec![(1, 0.90), (2, 0.85), (3, 0.80), (4, 0.75)]
        );
    }
}

//! Slice-level annotation database, DeepLesion index ingestion, the
//! patient-disjoint split construction and class-balancing upsampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::{Index, IndexMut};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Body-part lesion class. Declaration order follows the DeepLesion
/// `Coarse_lesion_type` codes 1..=8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionTag {
    Bone,
    Abdomen,
    Mediastinum,
    Liver,
    Lung,
    Kidney,
    SoftTissue,
    Pelvis,
    /// Box whose class label is unknown or was discarded.
    Untagged,
}

impl LesionTag {
    /// The 8 tagged classes in code order.
    pub const TAGGED: [LesionTag; 8] = [
        LesionTag::Bone,
        LesionTag::Abdomen,
        LesionTag::Mediastinum,
        LesionTag::Liver,
        LesionTag::Lung,
        LesionTag::Kidney,
        LesionTag::SoftTissue,
        LesionTag::Pelvis,
    ];

    /// Column order used by result tables (ascending training prevalence).
    pub const TABLE_ORDER: [LesionTag; 8] = [
        LesionTag::Bone,
        LesionTag::Kidney,
        LesionTag::SoftTissue,
        LesionTag::Pelvis,
        LesionTag::Liver,
        LesionTag::Mediastinum,
        LesionTag::Abdomen,
        LesionTag::Lung,
    ];

    pub fn from_code(code: i64) -> Option<LesionTag> {
        match code {
            -1 => Some(LesionTag::Untagged),
            1..=8 => Some(LesionTag::TAGGED[(code - 1) as usize]),
            _ => None,
        }
    }

    pub fn code(self) -> i64 {
        match self.index() {
            Some(i) => i as i64 + 1,
            None => -1,
        }
    }

    /// Position among the tagged classes; `None` for `Untagged`.
    pub fn index(self) -> Option<usize> {
        LesionTag::TAGGED.iter().position(|t| *t == self)
    }

    pub fn is_tagged(self) -> bool {
        self != LesionTag::Untagged
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LesionTag::Bone => "bone",
            LesionTag::Abdomen => "abdomen",
            LesionTag::Mediastinum => "mediastinum",
            LesionTag::Liver => "liver",
            LesionTag::Lung => "lung",
            LesionTag::Kidney => "kidney",
            LesionTag::SoftTissue => "soft_tissue",
            LesionTag::Pelvis => "pelvis",
            LesionTag::Untagged => "untagged",
        }
    }

    /// Human-readable column title, e.g. "Soft Tissue".
    pub fn title(self) -> &'static str {
        match self {
            LesionTag::Bone => "Bone",
            LesionTag::Abdomen => "Abdomen",
            LesionTag::Mediastinum => "Mediastinum",
            LesionTag::Liver => "Liver",
            LesionTag::Lung => "Lung",
            LesionTag::Kidney => "Kidney",
            LesionTag::SoftTissue => "Soft Tissue",
            LesionTag::Pelvis => "Pelvis",
            LesionTag::Untagged => "Untagged",
        }
    }
}

impl fmt::Display for LesionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LesionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        LesionTag::TAGGED
            .iter()
            .chain(std::iter::once(&LesionTag::Untagged))
            .find(|tag| tag.as_str() == t)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown lesion tag {s:?}")))
    }
}

/// Per-class lesion counts over the 8 tagged classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts(pub [usize; 8]);

impl ClassCounts {
    pub fn add(&mut self, tag: LesionTag, n: usize) {
        if let Some(i) = tag.index() {
            self.0[i] += n;
        }
    }

    pub fn get(&self, tag: LesionTag) -> usize {
        tag.index().map_or(0, |i| self.0[i])
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (LesionTag, usize)> + '_ {
        LesionTag::TAGGED.iter().map(|t| (*t, self.get(*t)))
    }

    /// Fraction of the total held by `tag`; 0 when empty.
    pub fn share(&self, tag: LesionTag) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.get(tag) as f64 / total as f64
        }
    }

    pub fn to_map(&self) -> BTreeMap<LesionTag, usize> {
        self.iter().collect()
    }
}

impl Index<LesionTag> for ClassCounts {
    type Output = usize;

    fn index(&self, tag: LesionTag) -> &usize {
        &self.0[tag.index().expect("untagged has no count slot")]
    }
}

impl IndexMut<LesionTag> for ClassCounts {
    fn index_mut(&mut self, tag: LesionTag) -> &mut usize {
        &mut self.0[tag.index().expect("untagged has no count slot")]
    }
}

impl Serialize for ClassCounts {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClassCounts {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = BTreeMap::<LesionTag, usize>::deserialize(d)?;
        let mut c = ClassCounts::default();
        for (t, n) in m {
            c.add(t, n);
        }
        Ok(c)
    }
}

/// Identifies one CT slice.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SliceKey {
    pub patient_id: String,
    pub study_id: String,
    pub series_id: String,
    pub slice_index: u32,
}

impl SliceKey {
    pub fn new(patient: &str, study: &str, series: &str, slice_index: u32) -> Self {
        SliceKey {
            patient_id: patient.into(),
            study_id: study.into(),
            series_id: series.into(),
            slice_index,
        }
    }

    /// Parses a DeepLesion file name such as `000001_01_01_109.png`.
    pub fn from_file_name(name: &str) -> Result<Self> {
        let stem = name.trim().trim_end_matches(".png");
        let parts: Vec<&str> = stem.split('_').collect();
        if parts.len() != 4 || parts[..3].iter().any(|p| p.is_empty()) {
            return Err(Error::Data(format!(
                "file name {name:?} is not of the form patient_study_series_slice.png"
            )));
        }
        let slice_index = parts[3]
            .parse::<u32>()
            .map_err(|_| Error::Data(format!("file name {name:?} has a non-integer slice index")))?;
        Ok(SliceKey::new(parts[0], parts[1], parts[2], slice_index))
    }

    pub fn file_name(&self) -> String {
        format!(
            "{}_{}_{}_{:03}.png",
            self.patient_id, self.study_id, self.series_id, self.slice_index
        )
    }

    /// Relative image path in the DeepLesion `Images_png` layout.
    pub fn image_ref(&self) -> String {
        format!(
            "Images_png/{}_{}_{}/{:03}.png",
            self.patient_id, self.study_id, self.series_id, self.slice_index
        )
    }
}

impl fmt::Display for SliceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}_{}_{}_{:03}",
            self.patient_id, self.study_id, self.series_id, self.slice_index
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "provenance", rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Mined { round: u32, score: f64 },
}

impl Provenance {
    pub fn is_mined(&self) -> bool {
        matches!(self, Provenance::Mined { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub tag: LesionTag,
    #[serde(flatten)]
    pub provenance: Provenance,
}

impl Annotation {
    pub fn ground_truth(bbox: BBox, tag: LesionTag) -> Self {
        Annotation {
            bbox,
            tag,
            provenance: Provenance::GroundTruth,
        }
    }

    pub fn mined(bbox: BBox, tag: LesionTag, round: u32, score: f64) -> Self {
        Annotation {
            bbox,
            tag,
            provenance: Provenance::Mined { round, score },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub key: SliceKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub repeat_count: u32,
    pub annotations: Vec<Annotation>,
}

impl SliceRecord {
    pub fn new(key: SliceKey, annotations: Vec<Annotation>) -> Self {
        SliceRecord {
            image_ref: Some(key.image_ref()),
            key,
            repeat_count: 1,
            annotations,
        }
    }

    pub fn tag_counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for a in &self.annotations {
            c.add(a.tag, 1);
        }
        c
    }

    pub fn has_tag(&self, tag: LesionTag) -> bool {
        self.annotations.iter().any(|a| a.tag == tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfficialSplit {
    Train,
    Val,
    Test,
}

impl OfficialSplit {
    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            1 => Some(OfficialSplit::Train),
            2 => Some(OfficialSplit::Val),
            3 => Some(OfficialSplit::Test),
            _ => None,
        }
    }

    pub fn code(self) -> i64 {
        match self {
            OfficialSplit::Train => 1,
            OfficialSplit::Val => 2,
            OfficialSplit::Test => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub record: SliceRecord,
    pub split: OfficialSplit,
}

/// Slice records of a DeepLesion-format index, sorted by key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn from_entries(mut entries: Vec<IndexEntry>) -> Self {
        entries.sort_by(|a, b| a.record.key.cmp(&b.record.key));
        DatasetIndex { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &SliceRecord> {
        self.entries.iter().map(|e| &e.record)
    }

    pub fn records_in(&self, split: OfficialSplit) -> impl Iterator<Item = &SliceRecord> {
        self.entries
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| &e.record)
    }

    pub fn summary(&self, name: &str) -> SplitSummary {
        SplitSummary::of(name, self.records(), |r| r.annotations.len())
    }
}

const COL_FILE: &str = "File_name";
const COL_BOXES: &str = "Bounding_boxes";
const COL_TYPE: &str = "Coarse_lesion_type";
const COL_SPLIT: &str = "Train_Val_Test";

/// Reads a DeepLesion `DL_info.csv`-style index.
pub fn load_deeplesion_index(path: impl AsRef<Path>) -> Result<DatasetIndex> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_deeplesion_index(f, &path.display().to_string())
}

/// Parses the coordinate field: groups of four comma-separated decimals.
pub fn parse_box_field(field: &str) -> std::result::Result<Vec<[f64; 4]>, String> {
    let trimmed = field.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    let values = trimmed
        .split(',')
        .map(|v| {
            let v = v.trim();
            v.parse::<f64>()
                .map_err(|_| format!("bad coordinate {v:?} in {field:?}"))
        })
        .collect::<std::result::Result<Vec<f64>, String>>()?;
    if values.len() % 4 != 0 {
        return Err(format!(
            "{} coordinates in {field:?}; expected a multiple of 4",
            values.len()
        ));
    }
    Ok(values
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect())
}

pub fn parse_deeplesion_index<R: Read>(reader: R, source: &str) -> Result<DatasetIndex> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(source, 1, e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_err(source, 1, format!("missing column {name}")))
    };
    let (c_file, c_boxes, c_type, c_split) =
        (col(COL_FILE)?, col(COL_BOXES)?, col(COL_TYPE)?, col(COL_SPLIT)?);

    let mut by_key: BTreeMap<SliceKey, IndexEntry> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| parse_err(source, line, e.to_string()))?;
        let field = |c: usize| -> Result<&str> {
            row.get(c)
                .ok_or_else(|| parse_err(source, line, format!("row has only {} fields", row.len())))
        };
        let key = SliceKey::from_file_name(field(c_file)?)
            .map_err(|e| parse_err(source, line, e.to_string()))?;
        let code: i64 = field(c_type)?
            .trim()
            .parse()
            .map_err(|_| parse_err(source, line, format!("bad {COL_TYPE} {:?}", field(c_type).unwrap_or(""))))?;
        let tag = LesionTag::from_code(code)
            .ok_or_else(|| parse_err(source, line, format!("{COL_TYPE} {code} not in 1..=8 or -1")))?;
        let split_code: i64 = field(c_split)?
            .trim()
            .parse()
            .map_err(|_| parse_err(source, line, format!("bad {COL_SPLIT} {:?}", field(c_split).unwrap_or(""))))?;
        let split = OfficialSplit::from_code(split_code)
            .ok_or_else(|| parse_err(source, line, format!("{COL_SPLIT} {split_code} not in 1..=3")))?;
        let boxes = parse_box_field(field(c_boxes)?).map_err(|m| parse_err(source, line, m))?;
        if boxes.is_empty() {
            return Err(parse_err(source, line, "no bounding box".into()));
        }
        let mut anns = Vec::with_capacity(boxes.len());
        for c in boxes {
            let b = BBox::new(c[0], c[1], c[2], c[3])
                .map_err(|e| Error::Data(format!("{source}: row {line}: {e}")))?;
            anns.push(Annotation::ground_truth(b, tag));
        }
        match by_key.get_mut(&key) {
            Some(entry) => {
                if entry.split != split {
                    return Err(parse_err(
                        source,
                        line,
                        format!("slice {key} listed under two official splits"),
                    ));
                }
                entry.record.annotations.extend(anns);
            }
            None => {
                by_key.insert(
                    key.clone(),
                    IndexEntry {
                        record: SliceRecord::new(key, anns),
                        split,
                    },
                );
            }
        }
    }
    Ok(DatasetIndex {
        entries: by_key.into_values().collect(),
    })
}

fn parse_err(source: &str, row: usize, message: String) -> Error {
    Error::Parse {
        path: source.to_string(),
        row,
        message,
    }
}

/// Writes an index in the `DL_info.csv` column layout (one row per
/// slice and tag; extra DeepLesion columns are left out).
pub fn write_deeplesion_index<W: Write>(index: &DatasetIndex, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Data(format!("csv write: {e}"));
    wtr.write_record([
        COL_FILE,
        "Patient_index",
        "Study_index",
        "Series_ID",
        "Key_slice_index",
        COL_BOXES,
        COL_TYPE,
        COL_SPLIT,
    ])
    .map_err(csv_err)?;
    for e in &index.entries {
        let key = &e.record.key;
        let mut groups: Vec<(LesionTag, Vec<&Annotation>)> = Vec::new();
        for a in &e.record.annotations {
            match groups.iter_mut().find(|(t, _)| *t == a.tag) {
                Some((_, v)) => v.push(a),
                None => groups.push((a.tag, vec![a])),
            }
        }
        for (tag, anns) in groups {
            let coords: Vec<String> = anns
                .iter()
                .flat_map(|a| a.bbox.coords())
                .map(|v| format!("{v}"))
                .collect();
            wtr.write_record([
                key.file_name(),
                key.patient_id.clone(),
                key.study_id.clone(),
                key.series_id.clone(),
                key.slice_index.to_string(),
                coords.join(", "),
                tag.code().to_string(),
                e.split.code().to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    wtr.flush().map_err(|e| Error::Data(format!("csv flush: {e}")))?;
    Ok(())
}

/// Reads a list of slice keys, one DeepLesion file name per line. Blank
/// lines and `#` comments are ignored.
pub fn read_slice_list(path: impl AsRef<Path>) -> Result<BTreeSet<SliceKey>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let key = SliceKey::from_file_name(t).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            row: i + 1,
            message: e.to_string(),
        })?;
        out.insert(key);
    }
    Ok(out)
}

pub fn write_slice_list<W: Write>(keys: impl IntoIterator<Item = SliceKey>, mut w: W) -> Result<()> {
    for k in keys {
        writeln!(w, "{}", k.file_name()).map_err(|e| Error::io("<slice list>", e))?;
    }
    Ok(())
}

/// Serializes records as line-delimited JSON manifest text.
pub fn manifest_to_string(records: &[SliceRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[SliceRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_manifest<R: BufRead>(reader: R, source: &str) -> Result<Vec<SliceRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SliceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: source.to_string(),
            row: i + 1,
            message: e.to_string(),
        })?;
        if r.repeat_count == 0 {
            return Err(Error::Parse {
                path: source.to_string(),
                row: i + 1,
                message: "repeat_count must be at least 1".into(),
            });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SliceRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(f), &path.display().to_string())
}

/// The four patient-disjoint subsets used for self-training.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    /// Official training slices with annotations removed (image pool).
    pub o_tr: Vec<SliceRecord>,
    pub f_tr: Vec<SliceRecord>,
    pub f_v: Vec<SliceRecord>,
    pub f_t: Vec<SliceRecord>,
    /// The boxes removed from `o_tr`, kept only for visualization.
    pub o_tr_stripped: Vec<SliceRecord>,
    pub seed: u64,
}

pub fn patients(records: &[SliceRecord]) -> BTreeSet<&str> {
    records.iter().map(|r| r.key.patient_id.as_str()).collect()
}

impl SplitSet {
    pub fn members(&self) -> [(&'static str, &[SliceRecord]); 4] {
        [
            ("O_Tr", &self.o_tr),
            ("F_T", &self.f_t),
            ("F_Tr", &self.f_tr),
            ("F_V", &self.f_v),
        ]
    }

    /// Checks that no patient appears in two members.
    pub fn check_disjoint(&self) -> Result<()> {
        let m = self.members();
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                let a = patients(m[i].1);
                let b = patients(m[j].1);
                if let Some(p) = a.intersection(&b).next() {
                    return Err(Error::Data(format!(
                        "patient {p} appears in both {} and {}",
                        m[i].0, m[j].0
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-member counts in the layout of a dataset summary table. The
    /// `O_Tr` lesion column counts the stripped boxes.
    pub fn summary(&self) -> Vec<SplitSummary> {
        let stripped: BTreeMap<&SliceKey, usize> = self
            .o_tr_stripped
            .iter()
            .map(|r| (&r.key, r.annotations.len()))
            .collect();
        vec![
            SplitSummary::of("O_Tr", &self.o_tr, |r| {
                stripped.get(&r.key).copied().unwrap_or(0)
            }),
            SplitSummary::of("F_T", &self.f_t, |r| r.annotations.len()),
            SplitSummary::of("F_Tr", &self.f_tr, |r| r.annotations.len()),
            SplitSummary::of("F_V", &self.f_v, |r| r.annotations.len()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub name: String,
    pub patients: usize,
    pub studies: usize,
    pub series: usize,
    pub slices: usize,
    pub lesions: usize,
}

impl SplitSummary {
    pub fn of<'a>(
        name: &str,
        records: impl IntoIterator<Item = &'a SliceRecord>,
        lesions: impl Fn(&SliceRecord) -> usize,
    ) -> Self {
        let mut p = BTreeSet::new();
        let mut st = BTreeSet::new();
        let mut se = BTreeSet::new();
        let mut slices = 0;
        let mut les = 0;
        for r in records {
            let k = &r.key;
            p.insert(&k.patient_id);
            st.insert((&k.patient_id, &k.study_id));
            se.insert((&k.patient_id, &k.study_id, &k.series_id));
            slices += 1;
            les += lesions(r);
        }
        SplitSummary {
            name: name.to_string(),
            patients: p.len(),
            studies: st.len(),
            series: se.len(),
            slices,
            lesions: les,
        }
    }
}

/// Builds the `O_Tr` / `F_Tr` / `F_V` / `F_T` partition.
///
/// `F_T` is the overlap of `fully_annotated_test_slices` with the official
/// test split. Patients of `F_T` are removed from the official
/// validation+test pool, and the remaining patients are shuffled with
/// `seed` and cut at `train_fraction` into `F_Tr` and `F_V`. `O_Tr` is the
/// official training split with every box removed.
pub fn build_splits(
    index: &DatasetIndex,
    fully_annotated_test_slices: &BTreeSet<SliceKey>,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitSet> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let f_t: Vec<SliceRecord> = index
        .entries
        .iter()
        .filter(|e| e.split == OfficialSplit::Test && fully_annotated_test_slices.contains(&e.record.key))
        .map(|e| e.record.clone())
        .collect();
    if f_t.is_empty() {
        return Err(Error::Data(
            "no fully annotated slice falls in the official test split; evaluation set would be empty".into(),
        ));
    }
    let test_patients: BTreeSet<String> = patients(&f_t).into_iter().map(String::from).collect();

    let pool: Vec<&IndexEntry> = index
        .entries
        .iter()
        .filter(|e| e.split != OfficialSplit::Train && !test_patients.contains(&e.record.key.patient_id))
        .collect();
    let mut pool_patients: Vec<&str> = pool
        .iter()
        .map(|e| e.record.key.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if pool_patients.is_empty() {
        return Err(Error::Data(
            "no validation/test patients remain after removing the test-set patients".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool_patients.shuffle(&mut rng);
    let n_train = ((train_fraction * pool_patients.len() as f64).round() as usize).min(pool_patients.len());
    let train_patients: BTreeSet<&str> = pool_patients[..n_train].iter().copied().collect();

    let mut f_tr = Vec::new();
    let mut f_v = Vec::new();
    for e in pool {
        if train_patients.contains(e.record.key.patient_id.as_str()) {
            f_tr.push(e.record.clone());
        } else {
            f_v.push(e.record.clone());
        }
    }

    let mut o_tr = Vec::new();
    let mut o_tr_stripped = Vec::new();
    for r in index.records_in(OfficialSplit::Train) {
        let mut pooled = r.clone();
        pooled.annotations.clear();
        o_tr.push(pooled);
        o_tr_stripped.push(r.clone());
    }

    let s = SplitSet {
        o_tr,
        f_tr,
        f_v,
        f_t,
        o_tr_stripped,
        seed,
    };
    s.check_disjoint()?;
    Ok(s)
}

/// Per-class lesion counts, counting each slice `repeat_count` times.
/// Untagged boxes are not counted.
pub fn class_counts(records: &[SliceRecord]) -> ClassCounts {
    let mut c = ClassCounts::default();
    for r in records {
        for a in &r.annotations {
            c.add(a.tag, r.repeat_count as usize);
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsampleReport {
    /// Count of the most prevalent class before upsampling.
    pub target: usize,
    pub before: ClassCounts,
    pub after: ClassCounts,
    /// Sum over present classes of `|after - target|`.
    pub disparity: usize,
    /// Sum, over classes that started below target, of the largest
    /// lesion count on any single slice carrying that class.
    pub slice_bound: usize,
    /// Slices added in total (sum of repeat_count increments).
    pub added_slices: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Upsampled {
    pub records: Vec<SliceRecord>,
    pub report: UpsampleReport,
}

/// Repeats whole slices of under-represented classes until every present
/// class reaches the count of the most prevalent one.
///
/// Deficient classes are handled rarest first. Each class cycles through
/// its slices in ascending key order, adding one copy of the slice at a
/// time; every lesion on an added slice counts toward its own class, so
/// the last copy may overshoot the target.
pub fn upsample_balance(records: &[SliceRecord]) -> Result<Upsampled> {
    let before = class_counts(records);
    if before.total() == 0 {
        return Err(Error::Data("cannot upsample: no tagged lesions".into()));
    }
    let target = before.max();
    let mut out = records.to_vec();
    let mut counts = before;

    let mut order: Vec<LesionTag> = LesionTag::TAGGED
        .iter()
        .copied()
        .filter(|t| before.get(*t) > 0 && before.get(*t) < target)
        .collect();
    order.sort_by_key(|t| (before.get(*t), *t));

    let mut slice_bound = 0;
    let mut added_slices = 0;
    for tag in order {
        let mut carriers: Vec<usize> = (0..out.len()).filter(|&i| out[i].has_tag(tag)).collect();
        carriers.sort_by(|&a, &b| out[a].key.cmp(&out[b].key));
        slice_bound += carriers
            .iter()
            .map(|&i| out[i].tag_counts().total())
            .max()
            .unwrap_or(0);
        let mut next = 0;
        while counts.get(tag) < target {
            let i = carriers[next % carriers.len()];
            out[i].repeat_count += 1;
            for a in &out[i].annotations {
                counts.add(a.tag, 1);
            }
            next += 1;
            added_slices += 1;
        }
    }

    let disparity = counts
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|(_, n)| n.abs_diff(target))
        .sum();
    debug_assert_eq!(counts, class_counts(&out));
    Ok(Upsampled {
        records: out,
        report: UpsampleReport {
            target,
            before,
            after: counts,
            disparity,
            slice_bound,
            added_slices,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64) -> BBox {
        BBox::new(x, x, x + 10.0, x + 10.0).unwrap()
    }

    fn rec(patient: &str, slice: u32, tags: &[LesionTag]) -> SliceRecord {
        let anns = tags
            .iter()
            .enumerate()
            .map(|(i, t)| Annotation::ground_truth(bx(20.0 * i as f64), *t))
            .collect();
        SliceRecord::new(SliceKey::new(patient, "01", "01", slice), anns)
    }

    #[test]
    fn tag_codes() {
        assert_eq!(LesionTag::from_code(-1), Some(LesionTag::Untagged));
        assert_eq!(LesionTag::from_code(1), Some(LesionTag::Bone));
        assert_eq!(LesionTag::from_code(8), Some(LesionTag::Pelvis));
        assert_eq!(LesionTag::from_code(0), None);
        for t in LesionTag::TAGGED {
            assert_eq!(LesionTag::from_code(t.code()), Some(t));
            assert_eq!(t.as_str().parse::<LesionTag>().unwrap(), t);
        }
        assert_eq!("Soft Tissue".parse::<LesionTag>().unwrap(), LesionTag::SoftTissue);
    }

    #[test]
    fn file_name_round_trip() {
        let k = SliceKey::from_file_name("000001_01_01_109.png").unwrap();
        assert_eq!(k, SliceKey::new("000001", "01", "01", 109));
        assert_eq!(k.file_name(), "000001_01_01_109.png");
        assert_eq!(k.image_ref(), "Images_png/000001_01_01/109.png");
        assert!(SliceKey::from_file_name("000001_01_109.png").is_err());
        assert!(SliceKey::from_file_name("000001_01_01_x.png").is_err());
    }

    #[test]
    fn box_field_parsing() {
        assert_eq!(
            parse_box_field(" 1.5,2, 3.25 ,  4 ").unwrap(),
            vec![[1.5, 2.0, 3.25, 4.0]]
        );
        assert_eq!(parse_box_field("0,0,1,1,2,2,3,3").unwrap().len(), 2);
        assert!(parse_box_field("0,0,1").is_err());
        assert!(parse_box_field("0,0,1,a").is_err());
    }

    const HEADER: &str = "File_name,Patient_index,Study_index,Series_ID,Key_slice_index,Bounding_boxes,Coarse_lesion_type,Train_Val_Test\n";

    #[test]
    fn parses_rows_and_untagged() {
        let csv = format!(
            "{HEADER}000001_01_01_109.png,1,1,1,109,\"10, 20, 30, 40\",-1,1\n\
             000002_01_01_050.png,2,1,1,50,\"1,1,5,5, 7,7,9,9\",4,3\n\
             000002_01_01_050.png,2,1,1,50,\"20,20,30,30\",6,3\n"
        );
        let idx = parse_deeplesion_index(csv.as_bytes(), "mem").unwrap();
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.entries[0].record.annotations[0].tag, LesionTag::Untagged);
        assert_eq!(idx.entries[0].split, OfficialSplit::Train);
        let r = &idx.entries[1].record;
        assert_eq!(r.annotations.len(), 3);
        assert_eq!(r.tag_counts().get(LesionTag::Liver), 2);
        assert_eq!(r.tag_counts().get(LesionTag::Kidney), 1);
    }

    #[test]
    fn header_only_is_empty() {
        let idx = parse_deeplesion_index(HEADER.as_bytes(), "mem").unwrap();
        assert!(idx.is_empty());
    }

    #[test]
    fn malformed_row_names_row() {
        let csv = format!("{HEADER}000001_01_01_109.png,1,1,1,109,\"10, 20, 30\",2,1\n");
        match parse_deeplesion_index(csv.as_bytes(), "mem") {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        let csv = format!("{HEADER}a,1,1,1,1,\"1,1,2,2\",2,1\n000001_01_01_109.png,1,1,1,109,\"1,1,2,2\",9,1\n");
        match parse_deeplesion_index(csv.as_bytes(), "mem") {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn degenerate_box_is_validation_error() {
        let csv = format!("{HEADER}000001_01_01_109.png,1,1,1,109,\"10, 20, 10, 40\",2,1\n");
        let err = parse_deeplesion_index(csv.as_bytes(), "mem").unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
        assert!(err.to_string().contains("row 2"));
    }

    #[test]
    fn counts_with_multiplicity() {
        assert_eq!(class_counts(&[]), ClassCounts::default());
        let mut r = rec("p", 1, &[LesionTag::Liver]);
        r.repeat_count = 3;
        let c = class_counts(&[r, rec("q", 1, &[LesionTag::Untagged])]);
        assert_eq!(c.get(LesionTag::Liver), 3);
        assert_eq!(c.total(), 3);
    }

    #[test]
    fn upsample_hand_example() {
        let recs = vec![
            rec("a", 1, &[LesionTag::Liver, LesionTag::Liver]),
            rec("a", 2, &[LesionTag::Liver, LesionTag::Liver]),
            rec("b", 1, &[LesionTag::Bone]),
        ];
        let up = upsample_balance(&recs).unwrap();
        assert_eq!(up.records[2].repeat_count, 4);
        assert_eq!(up.report.after.get(LesionTag::Liver), 4);
        assert_eq!(up.report.after.get(LesionTag::Bone), 4);
        assert_eq!(up.report.disparity, 0);
    }

    #[test]
    fn upsample_single_class_unchanged() {
        let recs = vec![rec("a", 1, &[LesionTag::Lung]), rec("a", 2, &[LesionTag::Lung])];
        let up = upsample_balance(&recs).unwrap();
        assert_eq!(up.records, recs);
        assert_eq!(up.report.added_slices, 0);
    }

    #[test]
    fn upsample_requires_tagged() {
        assert!(upsample_balance(&[]).is_err());
        assert!(upsample_balance(&[rec("a", 1, &[LesionTag::Untagged])]).is_err());
    }

    #[test]
    fn upsample_overshoot_from_multi_lesion_slice() {
        // kidney needs 2 more; its only slice carries 3 kidney lesions
        let recs = vec![
            rec("a", 1, &[LesionTag::Lung; 5]),
            rec("b", 1, &[LesionTag::Kidney, LesionTag::Kidney, LesionTag::Kidney]),
        ];
        let up = upsample_balance(&recs).unwrap();
        assert_eq!(up.records[1].repeat_count, 2);
        assert_eq!(up.report.after.get(LesionTag::Kidney), 6);
        assert_eq!(up.report.disparity, 1);
        assert!(up.report.disparity <= up.report.slice_bound);
    }

    #[test]
    fn split_errors() {
        let idx = DatasetIndex::default();
        assert!(matches!(
            build_splits(&idx, &BTreeSet::new(), 1.0, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_splits(&idx, &BTreeSet::new(), 0.7, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn manifest_rejects_zero_repeat() {
        let line = r#"{"key":{"patient_id":"1","study_id":"1","series_id":"1","slice_index":1},"repeat_count":0,"annotations":[]}"#;
        assert!(parse_manifest(line.as_bytes(), "mem").is_err());
    }

    #[test]
    fn annotation_json_shape() {
        let a = Annotation::mined(bx(0.0), LesionTag::Lung, 2, 0.93);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(
            s,
            r#"{"box":[0.0,0.0,10.0,10.0],"tag":"lung","provenance":"mined","round":2,"score":0.93}"#
        );
        assert_eq!(serde_json::from_str::<Annotation>(&s).unwrap(), a);
        let g = Annotation::ground_truth(bx(0.0), LesionTag::SoftTissue);
        assert_eq!(
            serde_json::to_string(&g).unwrap(),
            r#"{"box":[0.0,0.0,10.0,10.0],"tag":"soft_tissue","provenance":"ground_truth"}"#
        );
    }
}

//! On-disk formats and validated in-memory records for clip features, query
//! features and moment/highlight annotations.
//!
//! Features live in `MSDF` files: the 4-byte magic `MSDF`, a little-endian
//! `u32` version, `u32` rows, `u32` cols, then `rows * cols` little-endian
//! floats in row-major order. Version 1 carries 32-bit floats and is the
//! format for all feature files. Version 2 carries 64-bit floats and is only
//! written for double-precision parameter checkpoints.
//!
//! Annotations come from a JSON-lines manifest whose windows are given in
//! seconds; they are normalized to `(center, span)` on `[0, 1]` at load time
//! and stay normalized everywhere else.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MSDF_MAGIC: &[u8; 4] = b"MSDF";
pub const MSDF_VERSION_F32: u32 = 1;
pub const MSDF_VERSION_F64: u32 = 2;
const HEADER_LEN: usize = 16;

/// Tolerance allowed on span bounds before a value is rejected.
pub const SPAN_TOLERANCE: f64 = 1e-6;

/// Dense row-major matrix of clip- or word-level embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let m = Self { rows, cols, data };
        m.validate()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid(format!(
                "feature matrix must be non-empty, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Shape(format!(
                "{}x{} matrix with {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite entry at row {}, col {}",
                pos / self.cols,
                pos % self.cols
            )));
        }
        Ok(())
    }
}

/// A temporal segment as normalized `(center, span)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSpan {
    pub center: f64,
    pub span: f64,
}

impl MomentSpan {
    /// Builds a span, clamping bound overshoots up to [`SPAN_TOLERANCE`].
    pub fn new(center: f64, span: f64) -> Result<Self> {
        if !center.is_finite() || !span.is_finite() {
            return Err(Error::invalid(format!("non-finite span ({center}, {span})")));
        }
        if span <= 0.0 {
            return Err(Error::invalid(format!("span must be positive, got {span}")));
        }
        Self::from_start_end(center - span / 2.0, center + span / 2.0)
    }

    pub fn from_start_end(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) {
            return Err(Error::invalid(format!("non-finite bounds [{start}, {end}]")));
        }
        if start < -SPAN_TOLERANCE || end > 1.0 + SPAN_TOLERANCE {
            return Err(Error::invalid(format!(
                "bounds [{start}, {end}] fall outside [0, 1]"
            )));
        }
        let (start, end) = (start.max(0.0), end.min(1.0));
        if end <= start {
            return Err(Error::invalid(format!("empty interval [{start}, {end}]")));
        }
        Ok(Self {
            center: (start + end) / 2.0,
            span: end - start,
        })
    }

    /// Converts a window in seconds to a normalized span.
    pub fn from_seconds(start_s: f64, end_s: f64, duration_s: f64) -> Result<Self> {
        if duration_s <= 0.0 {
            return Err(Error::invalid(format!("duration must be positive, got {duration_s}")));
        }
        if end_s > duration_s * (1.0 + SPAN_TOLERANCE) {
            return Err(Error::invalid(format!(
                "window end {end_s}s exceeds duration {duration_s}s"
            )));
        }
        Self::from_start_end(start_s / duration_s, end_s / duration_s)
    }

    pub fn start(&self) -> f64 {
        self.center - self.span / 2.0
    }

    pub fn end(&self) -> f64 {
        self.center + self.span / 2.0
    }

    pub fn to_seconds(&self, duration_s: f64) -> (f64, f64) {
        (self.start() * duration_s, self.end() * duration_s)
    }

    /// True when clip `i` of `len` clips has its midpoint inside this span.
    pub fn contains_clip(&self, i: usize, len: usize) -> bool {
        let mid = (i as f64 + 0.5) / len as f64;
        mid >= self.start() && mid <= self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Polarity {
    #[default]
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    HardNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub vid: String,
    pub motion: FeatureMatrix,
    pub semantic: FeatureMatrix,
    pub duration_s: f64,
    pub clip_len_s: f64,
}

impl VideoRecord {
    pub fn num_clips(&self) -> usize {
        self.motion.rows()
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        if self.motion.rows() != self.semantic.rows() {
            return Err(format!(
                "video {}: motion has {} clips, semantic has {}",
                self.vid,
                self.motion.rows(),
                self.semantic.rows()
            ));
        }
        let covered = self.num_clips() as f64 * self.clip_len_s;
        if (covered - self.duration_s).abs() > self.clip_len_s + 1e-9 {
            return Err(format!(
                "video {}: {} clips of {}s do not cover duration {}s",
                self.vid,
                self.num_clips(),
                self.clip_len_s,
                self.duration_s
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub qid: String,
    pub vid: String,
    pub text: FeatureMatrix,
    pub windows: Vec<MomentSpan>,
    /// One entry per clip: 0..=4 inside a ground-truth window, -1 elsewhere.
    pub saliency_labels: Vec<i8>,
    pub polarity: Polarity,
    /// Marks records produced by corpus augmentation rather than original annotation.
    pub aux: bool,
}

impl AnnotationRecord {
    /// Binary foreground flag per clip (inside any window).
    pub fn clip_foreground(&self) -> Vec<bool> {
        let len = self.saliency_labels.len();
        (0..len)
            .map(|i| self.windows.iter().any(|w| w.contains_clip(i, len)))
            .collect()
    }

    fn check(&self, num_clips: Option<usize>) -> Vec<String> {
        let mut errs = Vec::new();
        if self.polarity == Polarity::Positive && self.windows.is_empty() {
            errs.push(format!("query {}: positive pair without windows", self.qid));
        }
        if let Some(l) = num_clips {
            if self.saliency_labels.len() != l {
                errs.push(format!(
                    "query {}: {} saliency labels for {} clips",
                    self.qid,
                    self.saliency_labels.len(),
                    l
                ));
            }
        }
        if let Some(bad) = self.saliency_labels.iter().find(|v| !(-1..=4).contains(*v)) {
            errs.push(format!("query {}: saliency label {bad} outside -1..=4", self.qid));
        }
        if let Err(e) = self.text.validate() {
            errs.push(format!("query {}: text features: {e}", self.qid));
        }
        errs
    }
}

/// Videos keyed by id plus the annotations referring to them.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub videos: BTreeMap<String, VideoRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

impl Dataset {
    pub fn video(&self, vid: &str) -> Option<&VideoRecord> {
        self.videos.get(vid)
    }

    /// Original (non-auxiliary) positive annotations.
    pub fn positives(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.annotations
            .iter()
            .filter(|a| a.polarity == Polarity::Positive && !a.aux)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub videos: usize,
    pub queries: usize,
    pub positives: usize,
    pub negatives: usize,
    pub errors: usize,
}

/// Checks every record invariant and the uniqueness of query ids.
pub fn validate_dataset(dataset: &Dataset) -> Result<DatasetReport> {
    let mut errors = Vec::new();
    for v in dataset.videos.values() {
        if let Err(e) = v.check() {
            errors.push(e);
        }
    }
    let mut seen = HashSet::new();
    let mut positives = 0;
    for a in &dataset.annotations {
        if !seen.insert(a.qid.as_str()) {
            errors.push(format!("duplicate query id {}", a.qid));
        }
        let clips = match dataset.videos.get(&a.vid) {
            Some(v) => Some(v.num_clips()),
            None => {
                errors.push(format!("query {}: unknown video {}", a.qid, a.vid));
                None
            }
        };
        errors.extend(a.check(clips));
        if a.polarity == Polarity::Positive {
            positives += 1;
        }
    }
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    Ok(DatasetReport {
        videos: dataset.videos.len(),
        queries: dataset.annotations.len(),
        positives,
        negatives: dataset.annotations.len() - positives,
        errors: 0,
    })
}

fn write_msdf(path: &Path, rows: usize, cols: usize, version: u32, payload: &[u8]) -> Result<()> {
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::Shape(format!("dimension {v} exceeds u32")))
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MSDF_MAGIC);
    header.extend_from_slice(&version.to_le_bytes());
    header.extend_from_slice(&to_u32(rows)?.to_le_bytes());
    header.extend_from_slice(&to_u32(cols)?.to_le_bytes());
    w.write_all(&header)
        .and_then(|_| w.write_all(payload))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_feature_file(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    m.validate()?;
    let payload: Vec<u8> = m.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_msdf(path.as_ref(), m.rows, m.cols, MSDF_VERSION_F32, &payload)
}

/// Header plus raw payload of an MSDF file.
struct RawMsdf {
    version: u32,
    rows: usize,
    cols: usize,
    payload: Vec<u8>,
}

fn read_msdf(path: &Path) -> Result<RawMsdf> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "{}: {} bytes is shorter than the header",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[0..4] != MSDF_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (version, rows, cols) = (word(4), word(8) as usize, word(12) as usize);
    let width = match version {
        MSDF_VERSION_F32 => 4,
        MSDF_VERSION_F64 => 8,
        v => {
            return Err(Error::Format(format!(
                "{}: unsupported version {v}",
                path.display()
            )))
        }
    };
    let expected = rows * cols * width;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, header declares {}",
            path.display(),
            payload.len(),
            expected
        )));
    }
    Ok(RawMsdf {
        version,
        rows,
        cols,
        payload: payload.to_vec(),
    })
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let raw = read_msdf(path)?;
    if raw.version != MSDF_VERSION_F32 {
        return Err(Error::Format(format!(
            "{}: feature files must be version {MSDF_VERSION_F32}",
            path.display()
        )));
    }
    let data = raw
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(raw.rows, raw.cols, data).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        Error::Validation(_) => Error::Format(format!("{}: {e}", path.display())),
        other => other,
    })
}

/// Writes a parameter matrix; `f64` payloads use version 2, `f32` version 1.
pub fn write_param_file(path: impl AsRef<Path>, rows: usize, cols: usize, data: &ParamData) -> Result<()> {
    let (version, payload): (u32, Vec<u8>) = match data {
        ParamData::F32(v) => (MSDF_VERSION_F32, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
        ParamData::F64(v) => (MSDF_VERSION_F64, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
    };
    if data.len() != rows * cols {
        return Err(Error::Shape(format!("{rows}x{cols} parameter with {} entries", data.len())));
    }
    write_msdf(path.as_ref(), rows, cols, version, &payload)
}

pub fn read_param_file(path: impl AsRef<Path>) -> Result<(usize, usize, ParamData)> {
    let path = path.as_ref();
    let raw = read_msdf(path)?;
    let data = if raw.version == MSDF_VERSION_F64 {
        ParamData::F64(
            raw.payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        ParamData::F32(
            raw.payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    };
    Ok((raw.rows, raw.cols, data))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ParamData {
    pub fn len(&self) -> usize {
        match self {
            ParamData::F32(v) => v.len(),
            ParamData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One line of the annotation manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub qid: String,
    pub vid: String,
    pub duration: f64,
    pub relevant_windows: Vec<[f64; 2]>,
    pub saliency_scores: Vec<i8>,
    pub motion_path: String,
    pub semantic_path: String,
    pub text_path: String,
    #[serde(default)]
    pub polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_len: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub aux: bool,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_existing(path: &Path) -> Result<FeatureMatrix> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing feature file"),
        ));
    }
    read_feature_file(path)
}

/// Loads a JSON-lines manifest; relative feature paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dataset = Dataset::default();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::invalid(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let windows = entry
            .relevant_windows
            .iter()
            .map(|[s, e]| MomentSpan::from_seconds(*s, *e, entry.duration))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::invalid(format!("query {}: {e}", entry.qid)))?;
        if entry.polarity == Polarity::Positive && windows.is_empty() {
            return Err(Error::invalid(format!(
                "query {}: positive pair without windows",
                entry.qid
            )));
        }
        if !dataset.videos.contains_key(&entry.vid) {
            let motion = read_existing(&resolve(base, &entry.motion_path))?;
            let semantic = read_existing(&resolve(base, &entry.semantic_path))?;
            let clip_len_s = entry
                .clip_len
                .unwrap_or(entry.duration / motion.rows() as f64);
            dataset.videos.insert(
                entry.vid.clone(),
                VideoRecord {
                    vid: entry.vid.clone(),
                    motion,
                    semantic,
                    duration_s: entry.duration,
                    clip_len_s,
                },
            );
        }
        let text = read_existing(&resolve(base, &entry.text_path))?;
        dataset.annotations.push(AnnotationRecord {
            qid: entry.qid,
            vid: entry.vid,
            text,
            windows,
            saliency_labels: entry.saliency_scores,
            polarity: entry.polarity,
            aux: entry.aux,
        });
    }
    validate_dataset(&dataset)?;
    Ok(dataset)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes `dir/manifest.jsonl` plus one MSDF file per feature matrix.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["video", "text"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for v in dataset.videos.values() {
        write_feature_file(dir.join(format!("video/{}_motion.msdf", v.vid)), &v.motion)?;
        write_feature_file(dir.join(format!("video/{}_semantic.msdf", v.vid)), &v.semantic)?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    let file = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = BufWriter::new(file);
    for a in &dataset.annotations {
        let v = dataset
            .videos
            .get(&a.vid)
            .ok_or_else(|| Error::invalid(format!("query {}: unknown video {}", a.qid, a.vid)))?;
        write_feature_file(dir.join(format!("text/{}.msdf", a.qid)), &a.text)?;
        let entry = ManifestEntry {
            qid: a.qid.clone(),
            vid: a.vid.clone(),
            duration: v.duration_s,
            relevant_windows: a
                .windows
                .iter()
                .map(|w| {
                    let (s, e) = w.to_seconds(v.duration_s);
                    [s, e]
                })
                .collect(),
            saliency_scores: a.saliency_labels.clone(),
            motion_path: format!("video/{}_motion.msdf", v.vid),
            semantic_path: format!("video/{}_semantic.msdf", v.vid),
            text_path: format!("text/{}.msdf", a.qid),
            polarity: a.polarity,
            clip_len: Some(v.clip_len_s),
            aux: a.aux,
        };
        serde_json::to_writer(&mut w, &entry)?;
        w.write_all(b"\n").map_err(|e| Error::io(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: usize, cols: usize) -> FeatureMatrix {
        let data = (0..rows * cols).map(|i| i as f32 * 0.25 - 1.0).collect();
        FeatureMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn two_by_three_file_is_forty_bytes_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.msdf");
        let m = matrix(2, 3);
        write_feature_file(&p, &m).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 16 + 24);
        let back = read_feature_file(&p).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn empty_matrix_rejected() {
        assert!(FeatureMatrix::new(0, 3, vec![]).is_err());
        let bad = FeatureMatrix {
            rows: 0,
            cols: 3,
            data: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.msdf");
        assert!(write_feature_file(&p, &bad).is_err());
        assert!(!p.exists());
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.msdf");
        write_feature_file(&p, &matrix(2, 3)).unwrap();
        let mut bytes = fs::read(&p).unwrap();

        let mut magic = bytes.clone();
        magic[..4].copy_from_slice(b"XXXX");
        fs::write(&p, &magic).unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::Format(_))));

        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::Format(_))));
    }

    #[test]
    fn nan_entry_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.msdf");
        write_feature_file(&p, &matrix(2, 2)).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::Data(_))));
    }

    #[test]
    fn seconds_to_normalized_span() {
        let m = MomentSpan::from_seconds(10.0, 20.0, 40.0).unwrap();
        assert!((m.center - 0.375).abs() < 1e-12);
        assert!((m.span - 0.25).abs() < 1e-12);
        assert!(MomentSpan::from_seconds(30.0, 50.0, 40.0).is_err());
    }

    #[test]
    fn span_tolerance_clamps_then_rejects() {
        let m = MomentSpan::from_start_end(-5e-7, 0.5).unwrap();
        assert_eq!(m.start(), 0.0);
        assert!(MomentSpan::from_start_end(-1e-5, 0.5).is_err());
        assert!(MomentSpan::new(0.5, 0.0).is_err());
        assert!(MomentSpan::new(0.95, 0.2).is_err());
    }

    #[test]
    fn param_file_f64_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.msdf");
        let data = ParamData::F64(vec![0.1, -1.0 / 3.0, std::f64::consts::PI]);
        write_param_file(&p, 1, 3, &data).unwrap();
        let (r, c, back) = read_param_file(&p).unwrap();
        assert_eq!((r, c), (1, 3));
        assert_eq!(back, data);
        assert!(matches!(read_feature_file(&p), Err(Error::Format(_))));
    }

    fn record(qid: &str, vid: &str, labels: usize) -> AnnotationRecord {
        AnnotationRecord {
            qid: qid.into(),
            vid: vid.into(),
            text: matrix(3, 4),
            windows: vec![MomentSpan::new(0.5, 0.5).unwrap()],
            saliency_labels: vec![-1; labels],
            polarity: Polarity::Positive,
            aux: false,
        }
    }

    fn video(vid: &str) -> VideoRecord {
        VideoRecord {
            vid: vid.into(),
            motion: matrix(8, 4),
            semantic: matrix(8, 4),
            duration_s: 16.0,
            clip_len_s: 2.0,
        }
    }

    fn dataset(records: Vec<AnnotationRecord>) -> Dataset {
        let mut ds = Dataset::default();
        for vid in ["a", "b"] {
            ds.videos.insert(vid.into(), video(vid));
        }
        ds.annotations = records;
        ds
    }

    #[test]
    fn validate_counts_and_errors() {
        let ok = dataset(vec![record("q1", "a", 8), record("q2", "b", 8)]);
        let report = validate_dataset(&ok).unwrap();
        assert_eq!(report.videos, 2);
        assert_eq!(report.errors, 0);
        assert_eq!(report.positives, 2);

        let bad_len = dataset(vec![record("q1", "a", 7), record("q2", "b", 8)]);
        match validate_dataset(&bad_len) {
            Err(Error::Validation(errs)) => assert_eq!(errs.len(), 1),
            other => panic!("expected validation error, got {other:?}"),
        }

        let dup = dataset(vec![record("q1", "a", 8), record("q1", "b", 8)]);
        match validate_dataset(&dup) {
            Err(Error::Validation(errs)) => assert_eq!(errs.len(), 1),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(vec![record("q1", "a", 8), record("q2", "b", 8)]);
        write_dataset(dir.path(), &ds).unwrap();
        let back = load_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.annotations, ds.annotations);
        assert_eq!(back.videos, ds.videos);

        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let first = manifest.lines().next().unwrap();

        let mut entry: ManifestEntry = serde_json::from_str(first).unwrap();
        entry.relevant_windows = vec![];
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, serde_json::to_string(&entry).unwrap()).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Validation(_))));

        let mut entry: ManifestEntry = serde_json::from_str(first).unwrap();
        entry.motion_path = "video/nope.msdf".into();
        let p = dir.path().join("missing.jsonl");
        fs::write(&p, serde_json::to_string(&entry).unwrap()).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Io { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn feature_file_round_trip_is_bitwise(
                rows in 1usize..6,
                cols in 1usize..6,
                seed in any::<u64>(),
            ) {
                let data: Vec<f32> = (0..rows * cols)
                    .map(|i| f32::from_bits((seed.wrapping_mul(i as u64 + 1) as u32) & 0x3fff_ffff))
                    .collect();
                let m = FeatureMatrix::new(rows, cols, data).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let p = dir.path().join("m.msdf");
                write_feature_file(&p, &m).unwrap();
                let back = read_feature_file(&p).unwrap();
                prop_assert_eq!(
                    back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }

            #[test]
            fn start_end_conversion_is_involution(a in 0.0f64..1.0, b in 0.0f64..1.0) {
                prop_assume!((a - b).abs() > 1e-6);
                let (s, e) = (a.min(b), a.max(b));
                let m = MomentSpan::from_start_end(s, e).unwrap();
                prop_assert!((m.start() - s).abs() < 1e-9);
                prop_assert!((m.end() - e).abs() < 1e-9);
            }
        }
    }
}

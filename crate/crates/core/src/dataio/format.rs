use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{top_k, PredictionSet};
use crate::numcore::Array;

pub const FORMAT_NAME: &str = "vidtag-frames";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_MAX_LEN: usize = 300;

/// One video: id, sorted distinct labels and a `[T × D]` frame matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub id: String,
    pub labels: Vec<usize>,
    pub frames: Array,
}

impl FrameRecord {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the label and width invariants against a vocabulary and feature dim.
    pub fn validate(&self, num_classes: usize, feature_dim: usize) -> std::result::Result<(), String> {
        if self.labels.is_empty() {
            return Err(format!("record {:?} has no labels", self.id));
        }
        if self.labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("record {:?} labels are not strictly increasing", self.id));
        }
        if let Some(&c) = self.labels.iter().find(|&&c| c >= num_classes) {
            return Err(format!("record {:?} label {c} outside [0, {num_classes})", self.id));
        }
        if self.frames.ndim() != 2 || self.frames.cols() != feature_dim {
            return Err(format!(
                "record {:?} frames have shape {:?}, expected width {feature_dim}",
                self.id,
                self.frames.shape()
            ));
        }
        if !self.frames.all_finite() {
            return Err(format!("record {:?} has non-finite frame values", self.id));
        }
        Ok(())
    }

    /// Mean over all frames, `[1 × D]`.
    pub fn mean_frame(&self) -> Array {
        let (t, d) = (self.frames.rows(), self.frames.cols());
        let mut mean = vec![0.0; d];
        for r in 0..t {
            mean.iter_mut().zip(self.frames.row(r)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        Array::row_vector(mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaling {
    /// Per-dimension mean and standard deviation over every frame of `records`.
    /// Dimensions with zero spread get std 1.
    pub fn fit(records: &[FrameRecord], feature_dim: usize) -> Self {
        let mut sum = vec![0.0; feature_dim];
        let mut count = 0usize;
        for r in records {
            for t in 0..r.len() {
                sum.iter_mut().zip(r.frames.row(t)).for_each(|(s, x)| *s += x);
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; feature_dim];
        for r in records {
            for t in 0..r.len() {
                for ((s, x), m) in sq.iter_mut().zip(r.frames.row(t)).zip(&mean) {
                    *s += (x - m) * (x - m);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let v = (s / n).sqrt();
                if v > 0.0 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, frames: &mut Array) {
        for t in 0..frames.rows() {
            for ((x, m), s) in frames.row_mut(t).iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
    }
}

/// Line 1 of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub max_len: usize,
    pub records: usize,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<FeatureScaling>,
}

impl DatasetManifest {
    pub fn new(num_classes: usize, feature_dim: usize, split: impl Into<String>) -> Self {
        Self {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            num_classes,
            feature_dim,
            max_len: DEFAULT_MAX_LEN,
            records: 0,
            split: split.into(),
            scaling: None,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.format != FORMAT_NAME || self.version != FORMAT_VERSION {
            return Err(format!(
                "unsupported format {:?} version {} (expected {FORMAT_NAME:?} {FORMAT_VERSION})",
                self.format, self.version
            ));
        }
        if self.num_classes == 0 || self.feature_dim == 0 || self.max_len == 0 {
            return Err("num_classes, feature_dim and max_len must be positive".into());
        }
        if let Some(s) = &self.scaling {
            if s.mean.len() != self.feature_dim || s.std.len() != self.feature_dim {
                return Err("scaling vectors must have feature_dim entries".into());
            }
            if s.std.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err("scaling std entries must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    labels: Vec<usize>,
    frames: Vec<Vec<f64>>,
}

/// Streams records from a dataset file after validating its manifest.
pub struct RecordReader<R> {
    path: PathBuf,
    lines: std::io::Lines<R>,
    line_no: usize,
    manifest: DatasetManifest,
    seen: usize,
}

impl RecordReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(file), path)
    }
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| parse_error(&path, 1, "missing manifest line".into()))?
            .map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&first).map_err(|e| parse_error(&path, 1, format!("manifest: {e}")))?;
        manifest.validate().map_err(|m| parse_error(&path, 1, m))?;
        Ok(Self {
            path,
            lines,
            line_no: 1,
            manifest,
            seen: 0,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn parse(&self, text: &str) -> Result<FrameRecord> {
        let line: RecordLine = serde_json::from_str(text).map_err(|e| parse_error(&self.path, self.line_no, e.to_string()))?;
        let frames = Array::from_rows(&line.frames)
            .map_err(|e| parse_error(&self.path, self.line_no, format!("frames: {e}")))?;
        let rec = FrameRecord {
            id: line.id,
            labels: line.labels,
            frames,
        };
        rec.validate(self.manifest.num_classes, self.manifest.feature_dim)
            .map_err(|m| parse_error(&self.path, self.line_no, m))?;
        Ok(rec)
    }
}

fn parse_error(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<FrameRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next() {
                Some(Ok(l)) => l,
                Some(Err(e)) => return Some(Err(Error::io(&self.path, e))),
                None => {
                    if self.seen != self.manifest.records {
                        let (line, seen, want) = (self.line_no, self.seen, self.manifest.records);
                        self.seen = want;
                        return Some(Err(parse_error(
                            &self.path,
                            line,
                            format!("manifest promises {want} records, file has {seen}"),
                        )));
                    }
                    return None;
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            self.seen += 1;
            return Some(self.parse(&line));
        }
    }
}

/// Reads a whole dataset file without applying its scaling.
pub fn read_records(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<FrameRecord>)> {
    let reader = RecordReader::open(path)?;
    let manifest = reader.manifest().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

/// Writes the manifest (with `records` set to the count) and one JSON line per record.
pub fn write_records(path: impl AsRef<Path>, manifest: &DatasetManifest, records: &[FrameRecord]) -> Result<()> {
    let path = path.as_ref();
    for r in records {
        r.validate(manifest.num_classes, manifest.feature_dim)
            .map_err(Error::InvalidArgument)?;
    }
    let mut manifest = manifest.clone();
    manifest.records = records.len();
    manifest.validate().map_err(Error::InvalidArgument)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut out, &manifest)?;
    out.write_all(b"\n").map_err(io)?;
    for r in records {
        let line = RecordLine {
            id: r.id.clone(),
            labels: r.labels.clone(),
            frames: (0..r.len()).map(|t| r.frames.row(t).to_vec()).collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// A dataset as models consume it: scaled and truncated to `max_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<FrameRecord>,
}

impl Dataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, records) = read_records(path)?;
        Ok(Self::prepare(manifest, records))
    }

    /// Applies the manifest's scaling and head-truncation.
    pub fn prepare(manifest: DatasetManifest, mut records: Vec<FrameRecord>) -> Self {
        for r in &mut records {
            if r.len() > manifest.max_len {
                r.frames = r.frames.slice_rows(0, manifest.max_len);
            }
            if let Some(s) = &manifest.scaling {
                s.apply(&mut r.frames);
            }
        }
        Self { manifest, records }
    }

    pub fn labels(&self) -> Vec<Vec<usize>> {
        self.records.iter().map(|r| r.labels.clone()).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }
}

/// Frames padded with zero rows or head-truncated to `max_len`, plus the true length.
pub fn pad_or_truncate(rec: &FrameRecord, max_len: usize) -> Result<(Array, usize)> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let (t, d) = (rec.len(), rec.frames.cols());
    if t >= max_len {
        return Ok((rec.frames.slice_rows(0, max_len), max_len));
    }
    let mut data = rec.frames.data().to_vec();
    data.resize(max_len * d, 0.0);
    Ok((Array::new(vec![max_len, d], data)?, t))
}

/// Keeps frames `0, r, 2r, ...`.
pub fn subsample(rec: &FrameRecord, rate: usize) -> Result<FrameRecord> {
    if rate == 0 {
        return Err(Error::InvalidArgument("subsample rate must be at least 1".into()));
    }
    let rows: Vec<Vec<f64>> = (0..rec.len()).step_by(rate).map(|t| rec.frames.row(t).to_vec()).collect();
    Ok(FrameRecord {
        id: rec.id.clone(),
        labels: rec.labels.clone(),
        frames: Array::from_rows(&rows)?,
    })
}

pub const PREDICTION_HEADER: &str = "VideoId,LabelConfidencePairs";

/// Challenge-style CSV: each video's top `k` `label score` pairs, descending.
/// Zero scores are omitted; they read back as 0 either way.
pub fn format_predictions(pred: &PredictionSet, k: usize) -> String {
    let mut out = String::from(PREDICTION_HEADER);
    out.push('\n');
    for i in 0..pred.len() {
        out.push_str(&pred.ids[i]);
        out.push(',');
        let pairs = top_k(pred.row(i), k);
        for (n, (c, s)) in pairs.iter().filter(|p| p.1 > 0.0).enumerate() {
            if n > 0 {
                out.push(' ');
            }
            write!(out, "{c} {s}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_predictions(path: impl AsRef<Path>, pred: &PredictionSet, k: usize) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_predictions(pred, k)).map_err(|e| Error::io(path, e))
}

/// Parses a prediction CSV; labels missing from a row get score 0.
pub fn parse_predictions(text: &str, num_classes: usize, path: &str) -> Result<PredictionSet> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == PREDICTION_HEADER => {}
        _ => return Err(err(1, format!("expected header {PREDICTION_HEADER}"))),
    }
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for (n, line) in lines {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once(',')
            .ok_or_else(|| err(line_no, "expected `id,pairs`".into()))?;
        let mut row = vec![0.0; num_classes];
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() % 2 != 0 {
            return Err(err(line_no, "odd number of label/score fields".into()));
        }
        for pair in fields.chunks(2) {
            let c: usize = pair[0].parse().map_err(|e| err(line_no, format!("label {:?}: {e}", pair[0])))?;
            let s: f64 = pair[1].parse().map_err(|e| err(line_no, format!("score {:?}: {e}", pair[1])))?;
            if c >= num_classes {
                return Err(err(line_no, format!("label {c} outside vocabulary of {num_classes}")));
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(err(line_no, format!("score {s} outside [0, 1]")));
            }
            row[c] = s;
        }
        ids.push(id.to_string());
        scores.extend(row);
    }
    PredictionSet::new(ids, num_classes, scores)
}

pub fn read_predictions(path: impl AsRef<Path>, num_classes: usize) -> Result<PredictionSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, num_classes, &path.display().to_string())
}

/// Largest label index plus one across prediction CSV text.
pub fn infer_num_classes(text: &str) -> usize {
    text.lines()
        .skip(1)
        .filter_map(|l| l.split_once(',').map(|(_, r)| r))
        .flat_map(|r| r.split_whitespace().step_by(2).filter_map(|c| c.parse::<usize>().ok()))
        .max()
        .map_or(1, |c| c + 1)
}

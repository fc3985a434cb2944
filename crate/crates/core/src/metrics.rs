//! Average precision, mean AP over classes and GAP@k.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TOP_K: usize = 20;

/// Per-video scores over a fixed vocabulary, aligned with video ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub ids: Vec<String>,
    pub num_classes: usize,
    scores: Vec<f64>,
}

impl PredictionSet {
    /// `scores` is row-major `[ids.len() × num_classes]` with values in `[0, 1]`.
    pub fn new(ids: Vec<String>, num_classes: usize, scores: Vec<f64>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("prediction set needs at least one class".into()));
        }
        if scores.len() != ids.len() * num_classes {
            return Err(Error::shape(
                "PredictionSet",
                format!("{} scores", ids.len() * num_classes),
                scores.len().to_string(),
            ));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidArgument(format!("score {bad} outside [0, 1]")));
        }
        Ok(Self {
            ids,
            num_classes,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Scores of class `c` across all videos.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.scores[i * self.num_classes + c]).collect()
    }

    /// Keeps each video's top `k` scores and zeroes the rest.
    pub fn truncate_top_k(&self, k: usize) -> PredictionSet {
        let mut scores = vec![0.0; self.scores.len()];
        for i in 0..self.len() {
            for (c, s) in top_k(self.row(i), k) {
                scores[i * self.num_classes + c] = s;
            }
        }
        PredictionSet {
            ids: self.ids.clone(),
            num_classes: self.num_classes,
            scores,
        }
    }
}

fn descending(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Indices and scores of the `k` highest entries, descending; ties keep index order.
pub fn top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut pairs: Vec<(usize, f64)> = scores.iter().cloned().enumerate().collect();
    pairs.sort_by(|a, b| descending(a.1, b.1));
    pairs.truncate(k.min(scores.len()));
    pairs
}

/// AP of a ranked list, `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("average_precision", scores.len().to_string(), labels.len().to_string()));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| descending(scores[a], scores[b]));
    Ok(Some(ranked_ap(order.iter().map(|&i| labels[i]), positives)))
}

/// Sum of precision at each hit, over `denominator`.
fn ranked_ap(ranked: impl Iterator<Item = bool>, denominator: usize) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, hit) in ranked.enumerate() {
        if hit {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    total / denominator as f64
}

fn check_labels(pred: &PredictionSet, labels: &[Vec<usize>]) -> Result<()> {
    if labels.len() != pred.len() {
        return Err(Error::Misaligned(format!("{} predictions but {} label sets", pred.len(), labels.len())));
    }
    if let Some(&c) = labels.iter().flatten().find(|&&c| c >= pred.num_classes) {
        return Err(Error::InvalidArgument(format!("label {c} outside vocabulary of {}", pred.num_classes)));
    }
    Ok(())
}

fn membership(pred: &PredictionSet, labels: &[Vec<usize>]) -> Vec<bool> {
    let mut m = vec![false; pred.scores.len()];
    for (i, set) in labels.iter().enumerate() {
        for &c in set {
            m[i * pred.num_classes + c] = true;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAps {
    /// `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub positives: Vec<usize>,
    pub map: f64,
}

/// Per-class AP over videos; the mean skips classes with no positives.
pub fn mean_ap(pred: &PredictionSet, labels: &[Vec<usize>]) -> Result<ClassAps> {
    check_labels(pred, labels)?;
    let member = membership(pred, labels);
    let v = pred.num_classes;
    let mut per_class = Vec::with_capacity(v);
    let mut positives = Vec::with_capacity(v);
    for c in 0..v {
        let col_labels: Vec<bool> = (0..pred.len()).map(|i| member[i * v + c]).collect();
        positives.push(col_labels.iter().filter(|&&y| y).count());
        per_class.push(average_precision(&pred.column(c), &col_labels)?);
    }
    let defined: Vec<f64> = per_class.iter().flatten().cloned().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(ClassAps {
        per_class,
        positives,
        map,
    })
}

/// Global AP over each video's top-`k` pairs pooled into one ranked list.
///
/// The denominator is `sum_i min(k, |labels_i|)`, the most hits the pooled
/// list can hold. Returns 0 when no video has a label.
pub fn gap_at_k(pred: &PredictionSet, labels: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("GAP needs k >= 1".into()));
    }
    check_labels(pred, labels)?;
    let member = membership(pred, labels);
    let v = pred.num_classes;
    let mut pooled: Vec<(f64, bool)> = Vec::with_capacity(pred.len() * k.min(v));
    let mut denominator = 0;
    for (i, set) in labels.iter().enumerate() {
        let distinct = {
            let mut s = set.clone();
            s.sort_unstable();
            s.dedup();
            s.len()
        };
        denominator += distinct.min(k);
        pooled.extend(top_k(pred.row(i), k).into_iter().map(|(c, s)| (s, member[i * v + c])));
    }
    if denominator == 0 {
        return Ok(0.0);
    }
    pooled.sort_by(|a, b| descending(a.0, b.0));
    Ok(ranked_ap(pooled.into_iter().map(|(_, hit)| hit), denominator))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: usize,
    pub top_k: usize,
    pub gap: f64,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub positives: Vec<usize>,
}

impl EvalReport {
    pub fn compute(pred: &PredictionSet, labels: &[Vec<usize>], k: usize) -> Result<Self> {
        let aps = mean_ap(pred, labels)?;
        Ok(Self {
            videos: pred.len(),
            top_k: k,
            gap: gap_at_k(pred, labels, k)?,
            map: aps.map,
            per_class_ap: aps.per_class,
            positives: aps.positives,
        })
    }

    /// Flat `key=value` summary.
    pub fn summary(&self) -> String {
        let scored = self.per_class_ap.iter().flatten().count();
        format!(
            "videos={}\ntop_k={}\ngap={}\nmap={}\nclasses={}\nclasses_with_positives={}\n",
            self.videos,
            self.top_k,
            self.gap,
            self.map,
            self.per_class_ap.len(),
            scored
        )
    }

    /// `class_id,ap,positives`; classes without positives get AP 0.
    pub fn class_csv(&self) -> String {
        let mut out = String::from("class_id,ap,positives\n");
        for (c, (ap, n)) in self.per_class_ap.iter().zip(&self.positives).enumerate() {
            writeln!(out, "{c},{},{n}", ap.unwrap_or(0.0)).unwrap();
        }
        out
    }
}

/// Reads the per-class CSV back into an AP vector indexed by class.
pub fn parse_class_csv(text: &str, path: &str) -> Result<Vec<f64>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "class_id,ap,positives" => {}
        _ => return Err(parse_err(1, "expected header class_id,ap,positives".into())),
    }
    let mut aps = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(n + 1, format!("expected 3 fields, got {}", fields.len())));
        }
        let class: usize = fields[0].trim().parse().map_err(|e| parse_err(n + 1, format!("class id: {e}")))?;
        if class != aps.len() {
            return Err(parse_err(n + 1, format!("expected class {} next, got {class}", aps.len())));
        }
        let ap: f64 = fields[1].trim().parse().map_err(|e| parse_err(n + 1, format!("ap: {e}")))?;
        if !(0.0..=1.0).contains(&ap) {
            return Err(parse_err(n + 1, format!("ap {ap} outside [0, 1]")));
        }
        aps.push(ap);
    }
    Ok(aps)
}

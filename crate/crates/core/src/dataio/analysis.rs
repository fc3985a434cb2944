use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    /// Positive videos per class.
    pub counts: Vec<usize>,
    /// `coverage[c]` is the fraction of (video, label) pairs with label `< c`;
    /// `V + 1` entries from 0 to 1.
    pub coverage: Vec<f64>,
}

impl LabelDistribution {
    /// `class_id,count,coverage` where coverage counts labels up to and including the class.
    pub fn csv(&self) -> String {
        let mut out = String::from("class_id,count,coverage\n");
        for (c, n) in self.counts.iter().enumerate() {
            writeln!(out, "{c},{n},{}", self.coverage[c + 1]).unwrap();
        }
        out
    }
}

fn check_labels(labels: &[Vec<usize>], num_classes: usize) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::InvalidArgument("vocabulary must be non-empty".into()));
    }
    if let Some(&c) = labels.iter().flatten().find(|&&c| c >= num_classes) {
        return Err(Error::InvalidArgument(format!("label {c} outside vocabulary of {num_classes}")));
    }
    Ok(())
}

pub fn label_distribution(labels: &[Vec<usize>], num_classes: usize) -> Result<LabelDistribution> {
    check_labels(labels, num_classes)?;
    let mut counts = vec![0usize; num_classes];
    for &c in labels.iter().flatten() {
        counts[c] += 1;
    }
    let total: usize = counts.iter().sum();
    let mut coverage = Vec::with_capacity(num_classes + 1);
    let mut running = 0usize;
    coverage.push(0.0);
    for &n in &counts {
        running += n;
        coverage.push(if total == 0 { 0.0 } else { running as f64 / total as f64 });
    }
    Ok(LabelDistribution { counts, coverage })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cooccurrence {
    /// The most frequent classes, by descending count then index.
    pub classes: Vec<usize>,
    /// Row-major `[top × top]`: videos containing both classes.
    pub counts: Vec<usize>,
}

impl Cooccurrence {
    pub fn get(&self, a: usize, b: usize) -> usize {
        self.counts[a * self.classes.len() + b]
    }

    /// Header row of class ids, then one row per class.
    pub fn csv(&self) -> String {
        let mut out = String::from("class_id");
        for c in &self.classes {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for (i, c) in self.classes.iter().enumerate() {
            write!(out, "{c}").unwrap();
            for j in 0..self.classes.len() {
                write!(out, ",{}", self.get(i, j)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Co-occurrence counts among the `top` most frequent classes.
pub fn cooccurrence_matrix(labels: &[Vec<usize>], num_classes: usize, top: usize) -> Result<Cooccurrence> {
    check_labels(labels, num_classes)?;
    if top == 0 || top > num_classes {
        return Err(Error::InvalidArgument(format!("top must be in [1, {num_classes}], got {top}")));
    }
    let dist = label_distribution(labels, num_classes)?;
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| dist.counts[b].cmp(&dist.counts[a]));
    order.truncate(top);
    let mut slot = vec![None; num_classes];
    for (i, &c) in order.iter().enumerate() {
        slot[c] = Some(i);
    }
    let mut counts = vec![0usize; top * top];
    for set in labels {
        let present: Vec<usize> = set.iter().filter_map(|&c| slot[c]).collect();
        for &a in &present {
            for &b in &present {
                counts[a * top + b] += 1;
            }
        }
    }
    Ok(Cooccurrence { classes: order, counts })
}

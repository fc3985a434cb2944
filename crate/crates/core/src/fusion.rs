//! Per-class AP-weighted fusion of several models' predictions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PredictionSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FusionNorm {
    /// Uniform `1/M`, ignoring the APs.
    Avg,
    /// `ap / ||ap||_p` per class.
    Lp(f64),
}

impl FusionNorm {
    pub const L1: FusionNorm = FusionNorm::Lp(1.0);
}

impl FromStr for FusionNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(FusionNorm::Avg),
            _ => {
                let p = s
                    .strip_prefix('l')
                    .and_then(|p| p.parse::<f64>().ok())
                    .filter(|p| *p >= 1.0 && p.is_finite())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown fusion norm {s:?} (avg, l1, l2, l3, ...)")))?;
                Ok(FusionNorm::Lp(p))
            }
        }
    }
}

impl fmt::Display for FusionNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionNorm::Avg => write!(f, "avg"),
            FusionNorm::Lp(p) => write!(f, "l{p}"),
        }
    }
}

/// Per-model, per-class weights, row-major `[M × V]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub norm: FusionNorm,
    /// Whether each class column was rescaled to sum to one.
    pub normalized_columns: bool,
    pub models: usize,
    pub classes: usize,
    weights: Vec<f64>,
}

impl FusionWeights {
    pub fn get(&self, model: usize, class: usize) -> f64 {
        self.weights[model * self.classes + class]
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        (0..self.models).map(|m| self.get(m, class)).collect()
    }

    pub fn uniform(models: usize, classes: usize) -> Result<Self> {
        if models == 0 || classes == 0 {
            return Err(Error::InvalidArgument("fusion needs at least one model and one class".into()));
        }
        Ok(Self {
            norm: FusionNorm::Avg,
            normalized_columns: true,
            models,
            classes,
            weights: vec![1.0 / models as f64; models * classes],
        })
    }
}

/// Weights from validation APs, one row per model.
///
/// A class whose APs are all zero falls back to uniform weights. With
/// `rescale`, every column is divided by its sum after the norm; for p = 1
/// and `avg` columns already sum to one.
pub fn per_class_weights(aps: &[Vec<f64>], norm: FusionNorm, rescale: bool) -> Result<FusionWeights> {
    let models = aps.len();
    let classes = aps.first().map_or(0, Vec::len);
    let mut w = FusionWeights::uniform(models, classes)?;
    if aps.iter().any(|row| row.len() != classes) {
        return Err(Error::Misaligned("AP rows have different class counts".into()));
    }
    if let Some(bad) = aps.iter().flatten().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidArgument(format!("AP {bad} outside [0, 1]")));
    }
    w.norm = norm;
    let FusionNorm::Lp(p) = norm else { return Ok(w) };
    w.normalized_columns = rescale || p == 1.0;
    for c in 0..classes {
        let col: Vec<f64> = aps.iter().map(|row| row[c]).collect();
        if col.iter().all(|&a| a == 0.0) {
            continue;
        }
        let denom = if p == 1.0 {
            col.iter().sum::<f64>()
        } else {
            col.iter().map(|a| a.powf(p)).sum::<f64>().powf(1.0 / p)
        };
        let mut ws: Vec<f64> = col.iter().map(|a| a / denom).collect();
        if rescale && p != 1.0 {
            let total: f64 = ws.iter().sum();
            ws.iter_mut().for_each(|x| *x /= total);
        }
        for (m, x) in ws.into_iter().enumerate() {
            w.weights[m * classes + c] = x;
        }
    }
    Ok(w)
}

fn check_aligned(preds: &[PredictionSet]) -> Result<()> {
    let first = preds.first().ok_or_else(|| Error::InvalidArgument("nothing to fuse".into()))?;
    for (m, p) in preds.iter().enumerate().skip(1) {
        if p.num_classes != first.num_classes {
            return Err(Error::Misaligned(format!(
                "model {m} has {} classes, model 0 has {}",
                p.num_classes, first.num_classes
            )));
        }
        if p.ids != first.ids {
            let at = p.ids.iter().zip(&first.ids).position(|(a, b)| a != b).unwrap_or(p.ids.len().min(first.ids.len()));
            return Err(Error::Misaligned(format!("model {m} video ids differ from model 0 at row {at}")));
        }
    }
    Ok(())
}

/// Weighted per-class combination of aligned predictions, clipped to `[0, 1]`.
///
/// When each weight column sums to one the sum is taken relative to the first
/// model, `s_0 + sum_m w_m (s_m - s_0)`, so identical inputs come back
/// unchanged bit for bit.
pub fn fuse(preds: &[PredictionSet], weights: &FusionWeights) -> Result<PredictionSet> {
    check_aligned(preds)?;
    let base = &preds[0];
    if weights.models != preds.len() || weights.classes != base.num_classes {
        return Err(Error::Misaligned(format!(
            "weights are {} × {}, predictions are {} × {}",
            weights.models,
            weights.classes,
            preds.len(),
            base.num_classes
        )));
    }
    let v = base.num_classes;
    let mut out = Vec::with_capacity(base.scores().len());
    for (idx, &s0) in base.scores().iter().enumerate() {
        let c = idx % v;
        let fused = if weights.normalized_columns {
            s0 + preds
                .iter()
                .enumerate()
                .map(|(m, p)| weights.get(m, c) * (p.scores()[idx] - s0))
                .sum::<f64>()
        } else {
            preds.iter().enumerate().map(|(m, p)| weights.get(m, c) * p.scores()[idx]).sum()
        };
        out.push(fused.clamp(0.0, 1.0));
    }
    PredictionSet::new(base.ids.clone(), v, out)
}

/// Uniform-weight fusion.
pub fn average_fuse(preds: &[PredictionSet]) -> Result<PredictionSet> {
    check_aligned(preds)?;
    fuse(preds, &FusionWeights::uniform(preds.len(), preds[0].num_classes)?)
}

//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidtag::dataio::FrameRecord;
use vidtag::metrics::PredictionSet;
use vidtag::numcore::Array;

pub fn random_array(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// AP by counting, for each positive, the items ranked at or above it.
/// Ties are broken by position.
pub fn brute_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n = scores.len();
    let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let positives: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let rank = 1 + (0..n).filter(|&j| ahead(i, j)).count();
            let hits = 1 + positives.iter().filter(|&&j| ahead(i, j)).count();
            hits as f64 / rank as f64
        })
        .sum();
    Some(total / positives.len() as f64)
}

/// Mean of the defined per-class APs.
pub fn brute_map(scores: &[f64], n: usize, v: usize, labels: &[Vec<usize>]) -> f64 {
    let aps: Vec<f64> = (0..v)
        .filter_map(|c| {
            let col: Vec<f64> = (0..n).map(|i| scores[i * v + c]).collect();
            let y: Vec<bool> = labels.iter().map(|s| s.contains(&c)).collect();
            brute_ap(&col, &y)
        })
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// GAP@k: class `c` is in video `i`'s top-k when fewer than `k` classes beat it
/// (higher score, or equal score and lower index).
pub fn brute_gap(scores: &[f64], n: usize, v: usize, labels: &[Vec<usize>], k: usize) -> f64 {
    let mut pooled_scores = Vec::new();
    let mut pooled_hits = Vec::new();
    let mut denominator = 0usize;
    for i in 0..n {
        let row = &scores[i * v..(i + 1) * v];
        let beats = |c: usize| (0..v).filter(|&o| row[o] > row[c] || (row[o] == row[c] && o < c)).count();
        let mut chosen: Vec<usize> = (0..v).filter(|&c| beats(c) < k).collect();
        chosen.sort_by_key(|&c| beats(c));
        for c in chosen {
            pooled_scores.push(row[c]);
            pooled_hits.push(labels[i].contains(&c));
        }
        denominator += labels[i].len().min(k);
    }
    if denominator == 0 {
        return 0.0;
    }
    let hits = pooled_hits.iter().filter(|&&h| h).count();
    brute_ap(&pooled_scores, &pooled_hits).map_or(0.0, |ap| ap * hits as f64 / denominator as f64)
}

/// Classic VLAD with nearest-center hard assignment: `[K·D]` residual sums.
pub fn classic_vlad(x: &Array, c: &Array) -> Vec<f64> {
    let (k, d) = (c.rows(), c.cols());
    let mut out = vec![0.0; k * d];
    for t in 0..x.rows() {
        let sq = |j: usize| (0..d).map(|m| (x.get(t, m) - c.get(j, m)).powi(2)).sum::<f64>();
        let nearest = (0..k).min_by(|&a, &b| sq(a).partial_cmp(&sq(b)).unwrap()).unwrap();
        for m in 0..d {
            out[nearest * d + m] += x.get(t, m) - c.get(nearest, m);
        }
    }
    out
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for m in col..n {
                a[row][m] -= f * a[col][m];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|m| a[row][m] * x[m]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One ridge-regularized logistic regression per class on mean frames,
/// fitted by Newton's method until the step is negligible.
pub struct LogisticOracle {
    weights: Vec<Vec<f64>>,
}

impl LogisticOracle {
    pub fn fit(records: &[FrameRecord], num_classes: usize, ridge: f64) -> Self {
        let xs: Vec<Vec<f64>> = records.iter().map(features).collect();
        let dim = xs[0].len();
        let n = xs.len() as f64;
        let weights = (0..num_classes)
            .map(|c| {
                let y: Vec<f64> = records.iter().map(|r| if r.labels.contains(&c) { 1.0 } else { 0.0 }).collect();
                let mut w = vec![0.0; dim];
                for _ in 0..100 {
                    let mut grad: Vec<f64> = w.iter().map(|wi| ridge * wi).collect();
                    let mut hess: Vec<Vec<f64>> = (0..dim).map(|i| (0..dim).map(|j| if i == j { ridge } else { 0.0 }).collect()).collect();
                    for (x, &yi) in xs.iter().zip(&y) {
                        let p = sigmoid(x.iter().zip(&w).map(|(a, b)| a * b).sum());
                        let s = p * (1.0 - p) / n;
                        for i in 0..dim {
                            grad[i] += (p - yi) * x[i] / n;
                            for j in 0..=i {
                                hess[i][j] += s * x[i] * x[j];
                            }
                        }
                    }
                    for i in 0..dim {
                        for j in 0..i {
                            hess[j][i] = hess[i][j];
                        }
                    }
                    let step = solve(hess, grad);
                    let size = step.iter().map(|s| s * s).sum::<f64>().sqrt();
                    w.iter_mut().zip(&step).for_each(|(wi, si)| *wi -= si);
                    if size < 1e-9 {
                        break;
                    }
                }
                w
            })
            .collect();
        Self { weights }
    }

    pub fn predict(&self, records: &[FrameRecord]) -> PredictionSet {
        let scores = records
            .iter()
            .flat_map(|r| {
                let x = features(r);
                self.weights
                    .iter()
                    .map(move |w| sigmoid(x.iter().zip(w).map(|(a, b)| a * b).sum()))
                    .collect::<Vec<_>>()
            })
            .collect();
        PredictionSet::new(records.iter().map(|r| r.id.clone()).collect(), self.weights.len(), scores).unwrap()
    }
}

/// Mean frame plus a constant bias feature.
fn features(r: &FrameRecord) -> Vec<f64> {
    let mut x = r.mean_frame().into_data();
    x.push(1.0);
    x
}

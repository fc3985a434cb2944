//! Synthetic multi-label frame sequences.
//!
//! Static classes plant a prototype direction in the video's mean frame and
//! are labelled by a linear threshold on that mean, so at difficulty 0 they
//! are exactly linearly decodable from mean-pooled features. Temporal classes
//! plant direction `a` in the first half and `b` in the second; other videos
//! receive the reversed `b`-then-`a` decoy at the same rate, leaving the mean
//! frame uninformative about them.

use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::format::{DatasetManifest, FeatureScaling, FrameRecord};
use crate::error::{Error, Result};
use crate::numcore::Array;

/// Prototype amplitude in the mean frame.
pub const SIGNAL: f64 = 2.0;
/// Amplitude of each half of a temporal pattern.
pub const PATTERN: f64 = 1.5;
const BACKGROUND_STD: f64 = 0.1;
const FRAME_STD: f64 = 0.5;

fn default_power() -> f64 {
    2.0
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub seed: u64,
    /// 0 is noise-free labelling; larger values add frame and label noise.
    #[serde(default)]
    pub difficulty: f64,
    /// Share of classes defined by frame order rather than content.
    #[serde(default)]
    pub temporal_fraction: f64,
    /// Class `c` is drawn with weight `(c + 1)^-power`.
    #[serde(default = "default_power")]
    pub power: f64,
    /// Train/val/test shares.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

impl SynthConfig {
    pub fn new(num_classes: usize, num_videos: usize, len_range: (usize, usize), feature_dim: usize, seed: u64) -> Self {
        Self {
            num_classes,
            num_videos,
            min_len: len_range.0,
            max_len: len_range.1,
            feature_dim,
            seed,
            difficulty: 0.0,
            temporal_fraction: 0.0,
            power: default_power(),
            split: default_split(),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.num_classes == 0 || self.num_videos == 0 || self.feature_dim == 0 {
            p.push("synth num_classes, num_videos and feature_dim must be at least 1".to_string());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            p.push(format!("synth length range [{}, {}] is invalid", self.min_len, self.max_len));
        }
        if !(self.difficulty >= 0.0 && self.difficulty.is_finite()) {
            p.push(format!("synth difficulty must be non-negative, got {}", self.difficulty));
        }
        if !(0.0..=1.0).contains(&self.temporal_fraction) {
            p.push(format!("synth temporal_fraction must be in [0, 1], got {}", self.temporal_fraction));
        }
        if self.temporal_fraction > 0.0 && self.min_len < 2 {
            p.push("temporal classes need min_len >= 2".to_string());
        }
        if !(self.power >= 0.0 && self.power.is_finite()) {
            p.push(format!("synth power must be non-negative, got {}", self.power));
        }
        if self.split.iter().any(|&s| s < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            p.push(format!("synth split must be non-negative and sum to 1, got {:?}", self.split));
        }
        p
    }

    /// Whether class `c` is a temporal class; temporal classes are spread evenly.
    pub fn is_temporal(&self, c: usize) -> bool {
        let f = self.temporal_fraction;
        ((c + 1) as f64 * f).floor() > (c as f64 * f).floor()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Vec<FrameRecord>,
    pub val: Vec<FrameRecord>,
    pub test: Vec<FrameRecord>,
    /// Fitted on the training split.
    pub scaling: FeatureScaling,
}

impl SynthData {
    pub fn manifest(&self, cfg: &SynthConfig, split: &str) -> DatasetManifest {
        let mut m = DatasetManifest::new(cfg.num_classes, cfg.feature_dim, split);
        m.max_len = cfg.max_len.max(1);
        m.scaling = Some(self.scaling.clone());
        m
    }
}

fn unit_gaussian<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `count` unit vectors; the first `min(count, d)` are orthonormal.
fn prototypes<R: Rng + ?Sized>(count: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = unit_gaussian(d, rng);
        if out.len() < d {
            for q in &out {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
        }
        out.push(v);
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Planted {
    /// Static prototype per class (unused for temporal classes).
    proto: Vec<Vec<f64>>,
    /// `(a, b)` directions per temporal class.
    pattern: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    weights: Vec<f64>,
}

fn plant<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Planted {
    let v = cfg.num_classes;
    let static_count = (0..v).filter(|&c| !cfg.is_temporal(c)).count();
    let mut protos = prototypes(static_count, cfg.feature_dim, rng).into_iter();
    let mut proto = Vec::with_capacity(v);
    let mut pattern = Vec::with_capacity(v);
    for c in 0..v {
        if cfg.is_temporal(c) {
            proto.push(Vec::new());
            pattern.push(Some((unit_gaussian(cfg.feature_dim, rng), unit_gaussian(cfg.feature_dim, rng))));
        } else {
            proto.push(protos.next().expect("one prototype per static class"));
            pattern.push(None);
        }
    }
    let weights = (0..v).map(|c| ((c + 1) as f64).powf(-cfg.power)).collect();
    Planted { proto, pattern, weights }
}

/// Draws `count` distinct classes proportionally to `weights`.
fn draw_classes<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count.min(w.len()) {
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = w.len() - 1;
        for (c, &wc) in w.iter().enumerate() {
            if wc > 0.0 && u < wc {
                pick = c;
                break;
            }
            u -= wc;
        }
        while w[pick] == 0.0 {
            pick -= 1;
        }
        out.push(pick);
        w[pick] = 0.0;
    }
    out
}

/// Probability that a video carries class `c` among its intended labels
/// (estimated once per dataset by simulation of the label draw).
fn intended_rates<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<f64> {
    let trials = 4000;
    let mut hits = vec![0usize; weights.len()];
    for _ in 0..trials {
        for c in draw_classes(weights, label_count(rng), rng) {
            hits[c] += 1;
        }
    }
    hits.into_iter().map(|h| h as f64 / trials as f64).collect()
}

fn label_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    let u: f64 = rng.random();
    if u < 0.5 {
        1
    } else if u < 0.8 {
        2
    } else {
        3
    }
}

fn generate_video<R: Rng + ?Sized>(cfg: &SynthConfig, planted: &Planted, decoy_rate: &[f64], id: String, rng: &mut R) -> FrameRecord {
    let (v, d) = (cfg.num_classes, cfg.feature_dim);
    let frame_std = FRAME_STD * (1.0 + cfg.difficulty);
    loop {
        let intended = draw_classes(&planted.weights, label_count(rng), rng);
        let t = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut centre: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                BACKGROUND_STD * z
            })
            .collect();
        for &c in &intended {
            if planted.pattern[c].is_none() {
                centre.iter_mut().zip(&planted.proto[c]).for_each(|(x, p)| *x += SIGNAL * p);
            }
        }
        let mut frames = Array::zeros(vec![t, d]);
        for r in 0..t {
            for (x, m) in frames.row_mut(r).iter_mut().zip(&centre) {
                let z: f64 = StandardNormal.sample(rng);
                *x = m + frame_std * z;
            }
        }
        // temporal patterns occupy equal-length head and tail segments, so
        // forward and reversed placements leave the mean frame unchanged
        let half = t / 2;
        let mut labels = Vec::new();
        for c in 0..v {
            let Some((a, b)) = &planted.pattern[c] else { continue };
            let positive = intended.contains(&c);
            if !positive && rng.random::<f64>() >= decoy_rate[c] {
                continue;
            }
            let (first, second) = if positive { (a, b) } else { (b, a) };
            for r in 0..half {
                frames.row_mut(r).iter_mut().zip(first).for_each(|(x, p)| *x += PATTERN * p);
            }
            for r in t - half..t {
                frames.row_mut(r).iter_mut().zip(second).for_each(|(x, p)| *x += PATTERN * p);
            }
            if positive {
                labels.push(c);
            }
        }
        let rec = FrameRecord {
            id: id.clone(),
            labels: Vec::new(),
            frames,
        };
        let mean = rec.mean_frame();
        for c in 0..v {
            if planted.pattern[c].is_some() {
                continue;
            }
            let noise: f64 = if cfg.difficulty > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                cfg.difficulty * z
            } else {
                0.0
            };
            if dot(mean.data(), &planted.proto[c]) + noise > SIGNAL / 2.0 {
                labels.push(c);
            }
        }
        if labels.is_empty() {
            continue;
        }
        labels.sort_unstable();
        return FrameRecord { labels, ..rec };
    }
}

/// Generates train/val/test splits; identical output for identical configs.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let planted = plant(cfg, &mut rng);
    // decoys go to non-positive videos only, so P(decoy) = P(positive) needs pi / (1 - pi)
    let decoy_rate: Vec<f64> = intended_rates(&planted.weights, &mut rng)
        .into_iter()
        .map(|pi| if pi < 1.0 { (pi / (1.0 - pi)).min(1.0) } else { 0.0 })
        .collect();
    let mut videos: Vec<FrameRecord> = (0..cfg.num_videos)
        .map(|i| generate_video(cfg, &planted, &decoy_rate, format!("vid{i:06}"), &mut rng))
        .collect();
    videos.shuffle(&mut rng);
    let n = videos.len();
    let n_train = (cfg.split[0] * n as f64).round() as usize;
    let n_val = ((cfg.split[1] * n as f64).round() as usize).min(n - n_train);
    let test = videos.split_off(n_train + n_val);
    let val = videos.split_off(n_train);
    let train = videos;
    let scaling = FeatureScaling::fit(&train, cfg.feature_dim);
    Ok(SynthData {
        train,
        val,
        test,
        scaling,
    })
}

//! Minibatch ADAM training with periodic validation and best-GAP checkpointing.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv1d::update_running_stats;
use crate::dataio::FrameRecord;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, DEFAULT_TOP_K};
use crate::model::{label_matrix, Checkpoint, ForwardState, Model, ModelSpec};
use crate::numcore::{adam_step, AdamState, Graph, LrSchedule};

pub const DEFAULT_BATCH_SIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Sigmoid,
    /// Softmax over classes against label-normalized targets; logit models only.
    SmoothedSoftmax,
}

fn default_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_eval_every() -> usize {
    1
}
fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Overrides of the per-model learning-rate defaults.
    #[serde(default)]
    pub base_lr: Option<f64>,
    #[serde(default)]
    pub decay_factor: Option<f64>,
    #[serde(default)]
    pub decay_every_examples: Option<u64>,
    /// Validate every this many epochs (and always after the last).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            base_lr: None,
            decay_factor: None,
            decay_every_examples: None,
            eval_every: default_eval_every(),
            loss: LossKind::Sigmoid,
            top_k: default_top_k(),
        }
    }
}

/// Learning-rate defaults by model family.
pub fn default_schedule(spec: &ModelSpec) -> LrSchedule {
    if spec.is_convolutional() {
        LrSchedule {
            base_lr: 0.1,
            decay_factor: 0.1,
            decay_every_examples: 10_000_000,
        }
    } else {
        LrSchedule {
            base_lr: if spec.is_recurrent() { 5e-4 } else { 0.01 },
            decay_factor: 0.9,
            decay_every_examples: 4_000_000,
        }
    }
}

impl TrainSettings {
    pub fn schedule(&self, spec: &ModelSpec) -> LrSchedule {
        let d = default_schedule(spec);
        LrSchedule {
            base_lr: self.base_lr.unwrap_or(d.base_lr),
            decay_factor: self.decay_factor.unwrap_or(d.decay_factor),
            decay_every_examples: self.decay_every_examples.unwrap_or(d.decay_every_examples),
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("train.batch_size must be positive".into());
        }
        if self.eval_every == 0 {
            p.push("train.eval_every must be positive".into());
        }
        if self.top_k == 0 {
            p.push("train.top_k must be positive".into());
        }
        if self.loss == LossKind::SmoothedSoftmax && !spec.emits_logits() {
            p.push("train.loss = \"smoothed_softmax\" needs a model that emits logits (resnet1d)".into());
        }
        p.extend(self.schedule(spec).validate().into_iter().map(|m| format!("train.{m}")));
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Best validation GAP, or the final state when there is no validation set.
    pub best: Checkpoint,
    /// One line per evaluation.
    pub log: Vec<String>,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        self.log.iter().fold(String::new(), |mut s, l| {
            writeln!(s, "{l}").unwrap();
            s
        })
    }
}

/// Trains `spec` on `train`, validating on `val` when it is non-empty.
pub fn train_model(
    spec: &ModelSpec,
    settings: &TrainSettings,
    seed: u64,
    num_classes: usize,
    feature_dim: usize,
    train: &[FrameRecord],
    val: &[FrameRecord],
) -> Result<TrainOutcome> {
    let mut problems = spec.validate();
    problems.extend(settings.validate(spec));
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = crate::numcore::ParamStore::new();
    let model = Model::new(spec, num_classes, feature_dim, &mut store, &mut rng)?;
    for rec in train.iter().chain(val) {
        model.check_record(rec)?;
    }
    let mut stats = model.initial_stats();
    let momentum = match spec {
        ModelSpec::Resnet1d { resnet } => resnet.momentum,
        _ => 0.0,
    };
    let mut adam = AdamState::new(&store, settings.schedule(spec))?;
    let val_labels: Vec<Vec<usize>> = val.iter().map(|r| r.labels.clone()).collect();

    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let evaluate = |store: &_, stats: &[_]| -> Result<Option<EvalReport>> {
        if val.is_empty() {
            return Ok(None);
        }
        let pred = model.predict(store, stats, val)?;
        EvalReport::compute(&pred, &val_labels, settings.top_k).map(Some)
    };
    if settings.epochs == 0 || train.is_empty() {
        let report = evaluate(&store, &stats)?;
        log.push(format_line(0, 0, adam.effective_lr(), None, report.as_ref()));
        let best = Checkpoint::new(&model, &store, &stats, 0, report.map(|r| r.gap));
        return Ok(TrainOutcome { best, log });
    }
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<&FrameRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let mut observed = Vec::new();
            let grads = {
                let mut g = Graph::new(&store);
                let mut state = ForwardState {
                    dropout: Some(&mut rng),
                    stats: &stats,
                    observed: if stats.is_empty() { None } else { Some(&mut observed) },
                };
                let out = model.forward(&mut g, &batch, &mut state);
                let y = label_matrix(&batch, num_classes);
                let mut loss = match (settings.loss, spec.emits_logits()) {
                    (LossKind::SmoothedSoftmax, _) => g.smoothed_softmax_loss(out.scores, &y),
                    (LossKind::Sigmoid, true) => g.sigmoid_cross_entropy(out.scores, &y),
                    (LossKind::Sigmoid, false) => g.binary_cross_entropy(out.scores, &y),
                };
                if let Some(aux) = out.aux_loss {
                    loss = g.add(loss, aux);
                }
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                loss_sum += value;
                batches += 1;
                g.backward(loss)
            };
            adam_step(&mut store, &grads, &mut adam, batch.len() as u64)?;
            if !observed.is_empty() {
                update_running_stats(&mut stats, &observed, momentum);
            }
        }
        if epoch % settings.eval_every == 0 || epoch == settings.epochs {
            let report = evaluate(&store, &stats)?;
            let mean_loss = loss_sum / batches.max(1) as f64;
            log.push(format_line(epoch, adam.examples_seen, adam.effective_lr(), Some(mean_loss), report.as_ref()));
            let gap = report.map(|r| r.gap);
            let improved = match (&best, gap) {
                (None, _) => true,
                (Some(b), Some(gap)) => b.val_gap.is_none_or(|bg| gap > bg),
                (Some(_), None) => true,
            };
            if improved {
                best = Some(Checkpoint::new(&model, &store, &stats, adam.examples_seen, gap));
            }
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one evaluation"),
        log,
    })
}

fn format_line(epoch: usize, examples: u64, lr: f64, loss: Option<f64>, report: Option<&EvalReport>) -> String {
    let mut line = format!("epoch={epoch} examples={examples} lr={lr:e}");
    if let Some(l) = loss {
        write!(line, " train_loss={l:.6}").unwrap();
    }
    if let Some(r) = report {
        write!(line, " val_gap={:.6} val_map={:.6}", r.gap, r.map).unwrap();
    }
    line
}

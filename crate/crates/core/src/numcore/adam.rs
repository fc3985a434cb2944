use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Array, Gradients, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Learning-rate schedule: `base_lr * decay_factor^floor(examples / decay_every_examples)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every_examples: u64,
}

impl LrSchedule {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            problems.push(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            problems.push(format!("decay_factor must be in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_every_examples == 0 {
            problems.push("decay_every_examples must be positive".to_string());
        }
        problems
    }

    pub fn lr_at(&self, examples_seen: u64) -> f64 {
        let periods = (examples_seen / self.decay_every_examples) as i32;
        self.base_lr * self.decay_factor.powi(periods)
    }
}

/// ADAM moments plus the example counter that drives the schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub examples_seen: u64,
    pub schedule: LrSchedule,
    first_moment: Vec<Array>,
    second_moment: Vec<Array>,
}

impl AdamState {
    pub fn new(params: &ParamStore, schedule: LrSchedule) -> Result<Self> {
        let problems = schedule.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let zeros: Vec<Array> = params.values().iter().map(|p| Array::zeros(p.shape().to_vec())).collect();
        Ok(Self {
            step: 0,
            examples_seen: 0,
            schedule,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    pub fn effective_lr(&self) -> f64 {
        self.schedule.lr_at(self.examples_seen)
    }
}

/// One bias-corrected ADAM update over all parameters.
///
/// `batch_examples` advances the example counter after the update, so the
/// rate used here is the one in force before this batch.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    batch_examples: u64,
) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameter arrays", params.len()),
            format!("{} gradients / {} moments", grads.len(), state.first_moment.len()),
        ));
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("adam_step gradient"));
    }
    let lr = state.effective_lr();
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = grads.get(id);
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        if g.shape() != m.shape() {
            return Err(Error::shape("adam_step", format!("{:?}", m.shape()), format!("{:?}", g.shape())));
        }
        let p = params.get_mut(id);
        for (((pj, &gj), mj), vj) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mj = BETA1 * *mj + (1.0 - BETA1) * gj;
            *vj = BETA2 * *vj + (1.0 - BETA2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *pj -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    state.examples_seen += batch_examples;
    Ok(())
}

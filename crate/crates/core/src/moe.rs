//! Mixture-of-experts heads and the vocabulary-partitioned (parallel) variant.
//!
//! For every output unit `c` the layer keeps its own `k`-way softmax gate
//! and `k` experts:
//!
//! ```text
//! out_c(x) = sum_i softmax(x·Wg_c + bg_c)_i * act(x·We_{c,i} + be_{c,i})
//! ```
//!
//! `act` is the sigmoid for classification heads and the identity for the
//! hidden layer between hierarchical RNN levels.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Array, Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertActivation {
    Sigmoid,
    Linear,
}

/// Parameter handles of one MoE layer; the arrays live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moe {
    pub input_dim: usize,
    pub outputs: usize,
    pub mixtures: usize,
    pub activation: ExpertActivation,
    /// `[D × outputs·k]`, column `c·k + i` gates expert `i` of output `c`.
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub expert_w: ParamId,
    pub expert_b: ParamId,
}

impl Moe {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        outputs: usize,
        mixtures: usize,
        activation: ExpertActivation,
        rng: &mut R,
    ) -> Result<Self> {
        if mixtures == 0 {
            return Err(Error::InvalidArgument("MoE needs at least one mixture".into()));
        }
        if input_dim == 0 || outputs == 0 {
            return Err(Error::InvalidArgument(format!(
                "MoE dims must be positive (input {input_dim}, outputs {outputs})"
            )));
        }
        let width = outputs * mixtures;
        let gate_w = store.add_scaled_normal(format!("{prefix}/gate_w"), vec![input_dim, width], input_dim, rng);
        let gate_b = store.add_zeros(format!("{prefix}/gate_b"), vec![width]);
        let expert_w = store.add_scaled_normal(format!("{prefix}/expert_w"), vec![input_dim, width], input_dim, rng);
        let expert_b = store.add_zeros(format!("{prefix}/expert_b"), vec![width]);
        Ok(Self {
            input_dim,
            outputs,
            mixtures,
            activation,
            gate_w,
            gate_b,
            expert_w,
            expert_b,
        })
    }

    /// `x: [N × D]` to `[N × outputs]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.value(x).rows();
        let k = self.mixtures;
        let (gw, gb, ew, eb) = (
            g.param(self.gate_w),
            g.param(self.gate_b),
            g.param(self.expert_w),
            g.param(self.expert_b),
        );
        let gate_logits = g.matmul(x, gw);
        let gate_logits = g.add_row(gate_logits, gb);
        let gate_logits = g.reshape(gate_logits, vec![n * self.outputs, k]);
        let gates = g.softmax(gate_logits, 1);

        let expert = g.matmul(x, ew);
        let expert = g.add_row(expert, eb);
        let expert = g.reshape(expert, vec![n * self.outputs, k]);
        let expert = match self.activation {
            ExpertActivation::Sigmoid => g.sigmoid(expert),
            ExpertActivation::Linear => expert,
        };
        let mixed = g.mul(gates, expert);
        let summed = g.sum_cols(mixed);
        g.reshape(summed, vec![n, self.outputs])
    }

    fn check_input(&self, x: &Array) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.input_dim {
            return Err(Error::shape("moe_forward", format!("[N × {}]", self.input_dim), format!("{:?}", x.shape())));
        }
        Ok(())
    }
}

/// Scores `[N × outputs]` of a MoE layer on `x: [N × D]`.
pub fn moe_forward(x: &Array, moe: &Moe, store: &ParamStore) -> Result<Array> {
    moe.check_input(x)?;
    let mut g = Graph::new(store);
    let xv = g.constant(x.clone());
    let out = moe.forward(&mut g, xv);
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    /// Contiguous label ranges of `width` in vocabulary order.
    Ordered { width: usize },
    /// A seeded permutation of the vocabulary chunked into groups of `width`.
    Random { width: usize, seed: u64 },
}

impl PartitionScheme {
    pub fn width(&self) -> usize {
        match *self {
            PartitionScheme::Ordered { width } | PartitionScheme::Random { width, .. } => width,
        }
    }
}

/// Disjoint label groups whose union is `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyPartition {
    pub num_classes: usize,
    pub scheme: PartitionScheme,
    pub groups: Vec<Vec<usize>>,
}

impl VocabularyPartition {
    /// For each class, its `(group, position within group)`.
    pub fn locate(&self) -> Vec<(usize, usize)> {
        let mut at = vec![(usize::MAX, usize::MAX); self.num_classes];
        for (gi, group) in self.groups.iter().enumerate() {
            for (pos, &c) in group.iter().enumerate() {
                at[c] = (gi, pos);
            }
        }
        at
    }

    /// Verifies the disjoint-cover invariant.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_classes];
        for group in &self.groups {
            if group.is_empty() {
                return Err(Error::InvalidArgument("empty partition group".into()));
            }
            for &c in group {
                if c >= self.num_classes || seen[c] {
                    return Err(Error::InvalidArgument(format!(
                        "class {c} out of range or repeated in partition"
                    )));
                }
                seen[c] = true;
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("class {c} not covered by partition")));
        }
        Ok(())
    }
}

pub fn partition_vocabulary(num_classes: usize, scheme: PartitionScheme) -> Result<VocabularyPartition> {
    let width = scheme.width();
    if num_classes == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "partition needs positive vocabulary and width (got {num_classes}, {width})"
        )));
    }
    let order: Vec<usize> = match scheme {
        PartitionScheme::Ordered { .. } => (0..num_classes).collect(),
        PartitionScheme::Random { seed, .. } => {
            let mut perm: Vec<usize> = (0..num_classes).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            perm
        }
    };
    let groups = order
        .chunks(width)
        .map(|chunk| {
            let mut g = chunk.to_vec();
            g.sort_unstable();
            g
        })
        .collect();
    Ok(VocabularyPartition {
        num_classes,
        scheme,
        groups,
    })
}

/// One independent MoE per label group, scattered back into vocabulary order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelMoe {
    pub partition: VocabularyPartition,
    pub experts: Vec<Moe>,
}

impl ParallelMoe {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        partition: VocabularyPartition,
        mixtures: usize,
        rng: &mut R,
    ) -> Result<Self> {
        partition.validate()?;
        let experts = partition
            .groups
            .iter()
            .enumerate()
            .map(|(gi, group)| {
                Moe::new(
                    store,
                    &format!("{prefix}/group{gi}"),
                    input_dim,
                    group.len(),
                    mixtures,
                    ExpertActivation::Sigmoid,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { partition, experts })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        pmoe_graph(g, x, &self.partition, &self.experts)
    }
}

fn pmoe_graph(g: &mut Graph, x: Var, partition: &VocabularyPartition, experts: &[Moe]) -> Var {
    let outs: Vec<Var> = experts.iter().map(|m| m.forward(g, x)).collect();
    let joined = g.concat_cols(&outs);
    let mut offsets = Vec::with_capacity(partition.groups.len());
    let mut acc = 0;
    for group in &partition.groups {
        offsets.push(acc);
        acc += group.len();
    }
    let index = partition
        .locate()
        .into_iter()
        .map(|(gi, pos)| offsets[gi] + pos)
        .collect();
    g.gather_cols(joined, index)
}

/// Scores `[N × V]` where each class comes from the MoE of its group.
pub fn pmoe_predict(
    x: &Array,
    partition: &VocabularyPartition,
    experts: &[Moe],
    store: &ParamStore,
) -> Result<Array> {
    if experts.len() != partition.groups.len() {
        return Err(Error::shape(
            "pmoe_predict",
            format!("{} MoE layers", partition.groups.len()),
            format!("{}", experts.len()),
        ));
    }
    partition.validate()?;
    for (group, moe) in partition.groups.iter().zip(experts) {
        if moe.outputs != group.len() {
            return Err(Error::shape("pmoe_predict", format!("{} outputs", group.len()), format!("{}", moe.outputs)));
        }
        moe.check_input(x)?;
    }
    let mut g = Graph::new(store);
    let xv = g.constant(x.clone());
    let out = pmoe_graph(&mut g, xv, partition, experts);
    Ok(g.value(out).clone())
}

/// Averages, per class, the scores of every model whose label range covers it.
///
/// Each entry pairs a label range with scores `[N × range.len()]`.
pub fn blend_overlapping(models: &[(Range<usize>, Array)], num_classes: usize) -> Result<Array> {
    let Some((_, first)) = models.first() else {
        return Err(Error::InvalidArgument("blend_overlapping needs at least one model".into()));
    };
    let n = first.rows();
    let mut sum = Array::zeros(vec![n, num_classes]);
    let mut count = vec![0usize; num_classes];
    for (range, scores) in models {
        if range.end > num_classes || range.is_empty() {
            return Err(Error::InvalidArgument(format!("label range {range:?} outside [0, {num_classes})")));
        }
        if scores.rows() != n || scores.cols() != range.len() {
            return Err(Error::shape(
                "blend_overlapping",
                format!("[{n} × {}]", range.len()),
                format!("{:?}", scores.shape()),
            ));
        }
        for c in range.clone() {
            count[c] += 1;
        }
        for r in 0..n {
            for (j, c) in range.clone().enumerate() {
                let v = sum.get(r, c) + scores.get(r, j);
                sum.set(r, c, v);
            }
        }
    }
    if let Some(c) = count.iter().position(|&k| k == 0) {
        return Err(Error::InvalidArgument(format!("class {c} is not covered by any model")));
    }
    for r in 0..n {
        for (c, &k) in count.iter().enumerate() {
            let v = sum.get(r, c) / k as f64;
            sum.set(r, c, v);
        }
    }
    Ok(sum)
}

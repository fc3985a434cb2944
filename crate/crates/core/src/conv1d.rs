//! A 1D residual network over the frame axis.
//!
//! Frames are the time axis and feature dimensions are channels. The
//! layout follows the bottleneck ResNet: a strided stem convolution and max
//! pool, four stages of bottleneck blocks, global average pooling over time
//! and a linear layer whose sigmoid gives per-class scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Array, Graph, ParamId, ParamStore, Var};

pub const NORM_EPS: f64 = 1e-5;

/// How block activations are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Learned per-channel scale and shift only.
    Affine,
    /// Standardize with running mean/variance, then the learned affine.
    #[default]
    RunningStats,
}

fn default_channels() -> Vec<usize> {
    vec![8, 8, 16, 32, 64]
}

fn default_blocks() -> Vec<usize> {
    vec![1, 1, 1, 1]
}

fn default_momentum() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResNet1dSpec {
    /// Stem width followed by the output width of each of the four stages.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks: Vec<usize>,
    #[serde(default)]
    pub norm: NormMode,
    /// Weight of the newest batch in the running statistics.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

impl Default for ResNet1dSpec {
    fn default() -> Self {
        Self {
            channels: default_channels(),
            blocks: default_blocks(),
            norm: NormMode::default(),
            momentum: default_momentum(),
        }
    }
}

impl ResNet1dSpec {
    /// The full-width plan: 512 stem, stages 512/1024/2048/4096, blocks 3/4/6/3.
    pub fn full_width() -> Self {
        Self {
            channels: vec![512, 512, 1024, 2048, 4096],
            blocks: vec![3, 4, 6, 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.channels.len() != 5 {
            problems.push(format!("resnet channels need 5 entries (stem + 4 stages), got {}", self.channels.len()));
        }
        if self.blocks.len() != 4 {
            problems.push(format!("resnet blocks need 4 entries, got {}", self.blocks.len()));
        }
        if self.channels.contains(&0) {
            problems.push("resnet channels must be positive".to_string());
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            problems.push(format!("resnet channels must be non-decreasing, got {:?}", self.channels));
        }
        if self.blocks.contains(&0) {
            problems.push("resnet blocks must be at least 1 per stage".to_string());
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            problems.push(format!("resnet momentum must be in (0, 1], got {}", self.momentum));
        }
        problems
    }
}

/// Running statistics of one normalization site, indexed by [`Norm::slot`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStat {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel statistics observed in one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedStat {
    pub slot: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub slot: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize, slot: usize) -> Self {
        Self {
            slot,
            gamma: store.add(format!("{prefix}/gamma"), Array::full(vec![channels], 1.0)),
            beta: store.add_zeros(format!("{prefix}/beta"), vec![channels]),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut NormContext) -> Var {
        let x = match ctx.mode {
            NormMode::Affine => x,
            NormMode::RunningStats => {
                if let Some(obs) = ctx.observed.as_deref_mut() {
                    obs.push(channel_stats(g.value(x), self.slot));
                }
                let stat = &ctx.stats[self.slot];
                let shift = g.constant(Array::row_vector(stat.mean.iter().map(|m| -m).collect()));
                let inv = g.constant(Array::row_vector(stat.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect()));
                let centered = g.add_row(x, shift);
                g.mul_row(centered, inv)
            }
        };
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let scaled = g.mul_row(x, gamma);
        g.add_row(scaled, beta)
    }
}

fn channel_stats(x: &Array, slot: usize) -> ObservedStat {
    let (t, c) = (x.rows(), x.cols());
    let mut mean = vec![0.0; c];
    for r in 0..t {
        mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut var = vec![0.0; c];
    for r in 0..t {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= t as f64);
    ObservedStat { slot, mean, var }
}

struct NormContext<'a> {
    mode: NormMode,
    stats: &'a [RunningStat],
    observed: Option<&'a mut Vec<ObservedStat>>,
}

/// A conv weight `[k·Cin × Cout]` with its geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: String,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // He-style scale for the following ReLU
        let weight = store.add_scaled_normal(name, vec![kernel * cin, cout], (kernel * cin).div_ceil(2), rng);
        Self {
            weight,
            kernel,
            stride,
            pad,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        g.conv1d(x, w, self.kernel, self.stride, self.pad)
    }
}

/// 1×1 reduce, 3-tap (strided) conv, 1×1 expand, each normalized; ReLU after
/// the residual sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bottleneck {
    pub reduce: (ConvLayer, Norm),
    pub mid: (ConvLayer, Norm),
    pub expand: (ConvLayer, Norm),
    /// Present when the stride or width changes.
    pub shortcut: Option<(ConvLayer, Norm)>,
}

impl Bottleneck {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        slots: &mut usize,
        rng: &mut R,
    ) -> Self {
        let inner = (cout / 4).max(1);
        let mut norm = |store: &mut ParamStore, name: &str, c: usize| {
            let n = Norm::new(store, &format!("{prefix}/{name}"), c, *slots);
            *slots += 1;
            n
        };
        let reduce = ConvLayer::new(store, format!("{prefix}/reduce"), cin, inner, 1, 1, 0, rng);
        let reduce = (reduce, norm(store, "reduce_norm", inner));
        let mid = ConvLayer::new(store, format!("{prefix}/mid"), inner, inner, 3, stride, 1, rng);
        let mid = (mid, norm(store, "mid_norm", inner));
        let expand = ConvLayer::new(store, format!("{prefix}/expand"), inner, cout, 1, 1, 0, rng);
        let expand = (expand, norm(store, "expand_norm", cout));
        let shortcut = (stride != 1 || cin != cout).then(|| {
            let conv = ConvLayer::new(store, format!("{prefix}/shortcut"), cin, cout, 1, stride, 0, rng);
            (conv, norm(store, "shortcut_norm", cout))
        });
        Self {
            reduce,
            mid,
            expand,
            shortcut,
        }
    }

    /// Applies the block inside a graph, normalizing with `stats` when `mode` asks for them.
    pub fn apply(&self, g: &mut Graph, x: Var, mode: NormMode, stats: &[RunningStat]) -> Var {
        let mut ctx = NormContext {
            mode,
            stats,
            observed: None,
        };
        self.forward(g, x, &mut ctx)
    }

    fn forward(&self, g: &mut Graph, x: Var, ctx: &mut NormContext) -> Var {
        let mut h = x;
        for (i, (conv, norm)) in [&self.reduce, &self.mid, &self.expand].into_iter().enumerate() {
            h = conv.forward(g, h);
            h = norm.forward(g, h, ctx);
            if i < 2 {
                h = g.relu(h);
            }
        }
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(g, x);
                norm.forward(g, s, ctx)
            }
            None => x,
        };
        let sum = g.add(h, skip);
        g.relu(sum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNet1d {
    pub spec: ResNet1dSpec,
    pub input_dim: usize,
    pub num_classes: usize,
    pub stem: (ConvLayer, Norm),
    pub stages: Vec<Vec<Bottleneck>>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Number of normalization sites; the length of the running statistics.
    pub norm_slots: usize,
}

impl ResNet1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: ResNet1dSpec,
        input_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut problems = spec.validate();
        if input_dim == 0 || num_classes == 0 {
            problems.push("resnet input dim and class count must be positive".to_string());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut slots = 0;
        let c0 = spec.channels[0];
        let stem_conv = ConvLayer::new(store, format!("{prefix}/stem"), input_dim, c0, 7, 2, 3, rng);
        let stem = (stem_conv, Norm::new(store, &format!("{prefix}/stem_norm"), c0, slots));
        slots += 1;
        let mut stages = Vec::new();
        let mut cin = c0;
        for (s, (&cout, &n)) in spec.channels[1..].iter().zip(&spec.blocks).enumerate() {
            let mut blocks = Vec::new();
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("{prefix}/stage{s}/block{b}");
                blocks.push(Bottleneck::new(store, &name, cin, cout, stride, &mut slots, rng));
                cin = cout;
            }
            stages.push(blocks);
        }
        let head_w = store.add_scaled_normal(format!("{prefix}/head_w"), vec![cin, num_classes], cin, rng);
        let head_b = store.add_zeros(format!("{prefix}/head_b"), vec![num_classes]);
        Ok(Self {
            spec,
            input_dim,
            num_classes,
            stem,
            stages,
            head_w,
            head_b,
            norm_slots: slots,
        })
    }

    /// Identity running statistics (mean 0, variance 1) for every site.
    pub fn initial_stats(&self) -> Vec<RunningStat> {
        let mut widths = vec![0; self.norm_slots];
        let mut record = |n: &Norm, c: usize| widths[n.slot] = c;
        record(&self.stem.1, self.spec.channels[0]);
        for (s, blocks) in self.stages.iter().enumerate() {
            let cout = self.spec.channels[s + 1];
            let inner = (cout / 4).max(1);
            for b in blocks {
                record(&b.reduce.1, inner);
                record(&b.mid.1, inner);
                record(&b.expand.1, cout);
                if let Some((_, n)) = &b.shortcut {
                    record(n, cout);
                }
            }
        }
        widths
            .into_iter()
            .map(|c| RunningStat {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            })
            .collect()
    }

    /// Logits `[1 × V]` for `x: [T × D]`. When `observed` is given, the
    /// per-channel statistics at every normalization site are appended.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        stats: &[RunningStat],
        observed: Option<&mut Vec<ObservedStat>>,
    ) -> Var {
        let mut ctx = NormContext {
            mode: self.spec.norm,
            stats,
            observed,
        };
        let h = self.stem.0.forward(g, x);
        let h = self.stem.1.forward(g, h, &mut ctx);
        let h = g.relu(h);
        let mut h = g.max_pool1d(h, 3, 2, 1);
        for blocks in &self.stages {
            for b in blocks {
                h = b.forward(g, h, &mut ctx);
            }
        }
        let pooled = g.mean_rows(h);
        let (w, b) = (g.param(self.head_w), g.param(self.head_b));
        let z = g.matmul(pooled, w);
        g.add_row(z, b)
    }
}

/// Blends per-example observations into the running statistics.
pub fn update_running_stats(stats: &mut [RunningStat], observed: &[ObservedStat], momentum: f64) {
    let mut sums: Vec<Option<(Vec<f64>, Vec<f64>, usize)>> = vec![None; stats.len()];
    for o in observed {
        let entry = sums[o.slot].get_or_insert_with(|| (vec![0.0; o.mean.len()], vec![0.0; o.var.len()], 0));
        entry.0.iter_mut().zip(&o.mean).for_each(|(a, b)| *a += b);
        entry.1.iter_mut().zip(&o.var).for_each(|(a, b)| *a += b);
        entry.2 += 1;
    }
    for (stat, sum) in stats.iter_mut().zip(sums) {
        let Some((mean, var, n)) = sum else { continue };
        let n = n as f64;
        for (s, m) in stat.mean.iter_mut().zip(mean) {
            *s = (1.0 - momentum) * *s + momentum * m / n;
        }
        for (s, v) in stat.var.iter_mut().zip(var) {
            *s = (1.0 - momentum) * *s + momentum * v / n;
        }
    }
}

/// Cross-correlation of `x: [T × Cin]` with `kernel: [k × Cin × Cout]`.
pub fn conv1d(x: &Array, kernel: &Array, stride: usize, pad: usize) -> Result<Array> {
    if kernel.ndim() != 3 || x.ndim() != 2 || kernel.shape()[1] != x.cols() {
        return Err(Error::shape(
            "conv1d",
            format!("x [T × Cin], kernel [k × {} × Cout]", x.cols()),
            format!("{:?} and {:?}", x.shape(), kernel.shape()),
        ));
    }
    let (k, cin, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if stride == 0 {
        return Err(Error::InvalidArgument("conv1d stride must be positive".into()));
    }
    if x.rows() + 2 * pad < k {
        return Err(Error::InvalidArgument(format!(
            "conv1d output would be empty: T={} pad={pad} kernel={k}",
            x.rows()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let wv = g.constant(kernel.clone().reshape(vec![k * cin, cout])?);
    let out = g.conv1d(xv, wv, k, stride, pad);
    Ok(g.value(out).clone())
}

/// One bottleneck block applied to `x` (running statistics as given).
pub fn bottleneck_block(x: &Array, block: &Bottleneck, mode: NormMode, stats: &[RunningStat], store: &ParamStore) -> Result<Array> {
    let cin = store.get(block.reduce.0.weight).rows();
    if x.ndim() != 2 || x.cols() != cin {
        return Err(Error::shape("bottleneck_block", format!("[T × {cin}]"), format!("{:?}", x.shape())));
    }
    let mut g = Graph::new(store);
    let xv = g.constant(x.clone());
    let mut ctx = NormContext {
        mode,
        stats,
        observed: None,
    };
    let out = block.forward(&mut g, xv, &mut ctx);
    Ok(g.value(out).clone())
}

/// Per-class scores `[1 × V]` for the first `len` frames.
pub fn resnet1d_forward(frames: &Array, len: usize, net: &ResNet1d, stats: &[RunningStat], store: &ParamStore) -> Result<Array> {
    if frames.ndim() != 2 || frames.cols() != net.input_dim || len == 0 || len > frames.rows() {
        return Err(Error::shape(
            "resnet1d_forward",
            format!("[>={len} × {}] with len >= 1", net.input_dim),
            format!("{:?}", frames.shape()),
        ));
    }
    let mut g = Graph::new(store);
    let x = g.constant(frames.slice_rows(0, len));
    let z = net.forward(&mut g, x, stats, None);
    let p = g.sigmoid(z);
    Ok(g.value(p).clone())
}

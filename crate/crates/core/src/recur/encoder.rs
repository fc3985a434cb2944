//! Sequence encoders built from [`RnnCell`]s.
//!
//! Every encoder reads only the first `len` rows of its frame matrix, so
//! zero-padded tails never enter the recurrence.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{ExpertActivation, Moe};
use crate::numcore::{Array, Graph, ParamId, ParamStore, Var};
use crate::recur::cell::{CellKind, RnnCell};

pub const DEFAULT_WINDOW: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    #[default]
    Stacked,
    Context,
    Hierarchical,
    Multiscale,
}

fn default_hidden() -> usize {
    32
}
fn default_layers() -> usize {
    2
}
fn default_hidden_mixtures() -> usize {
    2
}

/// Declarative description of an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    #[serde(default)]
    pub variant: EncoderVariant,
    #[serde(default)]
    pub cell: CellKind,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Stacked and context variants.
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default)]
    pub bidirectional: bool,
    /// Hierarchical window length.
    #[serde(default)]
    pub window: Option<usize>,
    /// Multi-scale subsampling strides.
    #[serde(default)]
    pub rates: Option<Vec<usize>>,
    /// Mixtures of the linear MoE between hierarchical levels.
    #[serde(default = "default_hidden_mixtures")]
    pub hidden_mixtures: usize,
    /// Dropout keep probability on hierarchical segment states.
    #[serde(default)]
    pub dropout_keep: Option<f64>,
    /// Width of an optional linear projection of the final state.
    #[serde(default)]
    pub output_projection: Option<usize>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::Stacked,
            cell: CellKind::Gru,
            hidden: default_hidden(),
            layers: default_layers(),
            bidirectional: false,
            window: None,
            rates: None,
            hidden_mixtures: default_hidden_mixtures(),
            dropout_keep: None,
            output_projection: None,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.hidden == 0 {
            p.push("encoder.hidden must be positive".into());
        }
        match self.variant {
            EncoderVariant::Stacked | EncoderVariant::Context => {
                if self.layers == 0 {
                    p.push("encoder.layers must be positive".into());
                }
            }
            EncoderVariant::Hierarchical => {
                if self.window == Some(0) {
                    p.push("encoder.window must be positive".into());
                }
                if self.hidden_mixtures == 0 {
                    p.push("encoder.hidden_mixtures must be positive".into());
                }
            }
            EncoderVariant::Multiscale => match &self.rates {
                None => p.push("multiscale encoder needs encoder.rates".into()),
                Some(r) if r.is_empty() => p.push("encoder.rates must not be empty".into()),
                Some(r) => {
                    if r.contains(&0) {
                        p.push("encoder.rates entries must be >= 1".into());
                    }
                    let mut sorted = r.clone();
                    sorted.sort_unstable();
                    sorted.dedup();
                    if sorted.len() != r.len() {
                        p.push("encoder.rates entries must be distinct".into());
                    }
                }
            },
        }
        if let Some(k) = self.dropout_keep {
            if !(k > 0.0 && k <= 1.0) {
                p.push(format!("encoder.dropout_keep must be in (0, 1], got {k}"));
            }
        }
        if self.output_projection == Some(0) {
            p.push("encoder.output_projection must be positive".into());
        }
        p
    }

    pub fn window(&self) -> usize {
        self.window.unwrap_or(DEFAULT_WINDOW)
    }

    /// Keep probability in force during training.
    pub fn keep_probability(&self) -> f64 {
        match (self.dropout_keep, self.variant) {
            (Some(k), _) => k,
            (None, EncoderVariant::Hierarchical) => 0.5,
            (None, _) => 1.0,
        }
    }
}

/// Layers of optionally bidirectional cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stack {
    pub layers: Vec<(RnnCell, Option<RnnCell>)>,
}

impl Stack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: CellKind,
        input_dim: usize,
        hidden: usize,
        layers: usize,
        bidirectional: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(layers);
        let mut in_dim = input_dim;
        for l in 0..layers {
            let fwd = RnnCell::new(store, &format!("{prefix}/layer{l}/fwd"), kind, in_dim, hidden, rng)?;
            let bwd = if bidirectional {
                Some(RnnCell::new(store, &format!("{prefix}/layer{l}/bwd"), kind, in_dim, hidden, rng)?)
            } else {
                None
            };
            out.push((fwd, bwd));
            in_dim = if bidirectional { 2 * hidden } else { hidden };
        }
        Ok(Self { layers: out })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.input_dim
    }

    pub fn output_dim(&self) -> usize {
        let (fwd, bwd) = self.layers.last().expect("stack has layers");
        fwd.state_dim * if bwd.is_some() { 2 } else { 1 }
    }

    /// Per-position outputs of the top layer, `[T × output_dim]`.
    pub fn outputs(&self, g: &mut Graph, x: Var) -> Var {
        let mut input = x;
        for (fwd, bwd) in &self.layers {
            input = layer_outputs(g, fwd, bwd.as_ref(), input);
        }
        input
    }

    /// Final state: the forward state after the last frame, concatenated with
    /// the backward state after the first frame when bidirectional.
    pub fn final_state(&self, g: &mut Graph, x: Var) -> Var {
        let (last, below) = self.layers.split_last().expect("stack has layers");
        let mut input = x;
        for (fwd, bwd) in below {
            input = layer_outputs(g, fwd, bwd.as_ref(), input);
        }
        let (fwd, bwd) = last;
        let xp = fwd.project_inputs(g, input);
        let f = fwd.run_final(g, xp);
        match bwd {
            None => f,
            Some(bwd) => {
                let bp = bwd.project_inputs(g, input);
                let b = bwd.run(g, bp, true);
                g.concat_cols(&[f, b[0]])
            }
        }
    }
}

fn layer_outputs(g: &mut Graph, fwd: &RnnCell, bwd: Option<&RnnCell>, x: Var) -> Var {
    let xp = fwd.project_inputs(g, x);
    let f = fwd.run(g, xp, false);
    match bwd {
        None => g.concat_rows(&f),
        Some(bwd) => {
            let bp = bwd.project_inputs(g, x);
            let b = bwd.run(g, bp, true);
            let rows: Vec<Var> = f.iter().zip(&b).map(|(&fv, &bv)| g.concat_cols(&[fv, bv])).collect();
            g.concat_rows(&rows)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EncoderParts {
    Stacked(Stack),
    Context { context: Stack, main: Stack },
    Hierarchical { lower: RnnCell, mixer: Moe, upper: RnnCell },
    Multiscale { streams: Vec<(usize, RnnCell)> },
}

/// A configured encoder whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub input_dim: usize,
    pub parts: EncoderParts,
    pub projection: Option<(ParamId, ParamId)>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: &EncoderSpec,
        input_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let problems = spec.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let h = spec.hidden;
        let parts = match spec.variant {
            EncoderVariant::Stacked => EncoderParts::Stacked(Stack::new(
                store,
                &format!("{prefix}/stack"),
                spec.cell,
                input_dim,
                h,
                spec.layers,
                spec.bidirectional,
                rng,
            )?),
            EncoderVariant::Context => {
                // output dim must equal the frame dim for x + context(x)
                let context = Stack::new(store, &format!("{prefix}/context"), spec.cell, input_dim, input_dim, 1, false, rng)?;
                let main = Stack::new(
                    store,
                    &format!("{prefix}/stack"),
                    spec.cell,
                    input_dim,
                    h,
                    spec.layers,
                    spec.bidirectional,
                    rng,
                )?;
                EncoderParts::Context { context, main }
            }
            EncoderVariant::Hierarchical => {
                let lower = RnnCell::new(store, &format!("{prefix}/lower"), spec.cell, input_dim, h, rng)?;
                let mixer = Moe::new(
                    store,
                    &format!("{prefix}/mixer"),
                    h,
                    h,
                    spec.hidden_mixtures,
                    ExpertActivation::Linear,
                    rng,
                )?;
                let upper = RnnCell::new(store, &format!("{prefix}/upper"), spec.cell, h, h, rng)?;
                EncoderParts::Hierarchical { lower, mixer, upper }
            }
            EncoderVariant::Multiscale => {
                let rates = spec.rates.clone().unwrap_or_default();
                let streams = rates
                    .iter()
                    .map(|&r| Ok((r, RnnCell::new(store, &format!("{prefix}/rate{r}"), spec.cell, input_dim, h, rng)?)))
                    .collect::<Result<Vec<_>>>()?;
                EncoderParts::Multiscale { streams }
            }
        };
        let raw_dim = raw_output_dim(&parts);
        let projection = spec.output_projection.map(|p| {
            (
                store.add_scaled_normal(format!("{prefix}/proj_w"), vec![raw_dim, p], raw_dim, rng),
                store.add_zeros(format!("{prefix}/proj_b"), vec![p]),
            )
        });
        Ok(Self {
            spec: spec.clone(),
            input_dim,
            parts,
            projection,
        })
    }

    pub fn output_dim(&self) -> usize {
        match &self.spec.output_projection {
            Some(p) => *p,
            None => raw_output_dim(&self.parts),
        }
    }

    /// Encodes the first `len` rows of `frames` into a `[1 × output_dim]` state.
    ///
    /// `dropout` supplies randomness for training-time dropout; pass `None`
    /// for deterministic evaluation.
    pub fn encode<R: Rng + ?Sized>(&self, g: &mut Graph, frames: &Array, len: usize, dropout: Option<&mut R>) -> Var {
        assert!(len >= 1 && len <= frames.rows(), "encode needs 1 <= len <= rows");
        assert_eq!(frames.cols(), self.input_dim, "frame dim");
        let state = match &self.parts {
            EncoderParts::Stacked(stack) => {
                let x = g.constant(frames.slice_rows(0, len));
                encode_stacked(g, stack, x)
            }
            EncoderParts::Context { context, main } => {
                let x = g.constant(frames.slice_rows(0, len));
                encode_with_context(g, x, context, main).expect("context dims fixed at construction")
            }
            EncoderParts::Hierarchical { lower, mixer, upper } => {
                let keep = self.spec.keep_probability();
                let drop = dropout.filter(|_| keep < 1.0).map(|r| (r, keep));
                encode_hierarchical(g, frames, len, self.spec.window(), lower, mixer, upper, drop)
            }
            EncoderParts::Multiscale { streams } => encode_multiscale(g, frames, len, streams),
        };
        match self.projection {
            None => state,
            Some((w, b)) => {
                let wv = g.param(w);
                let bv = g.param(b);
                let y = g.matmul(state, wv);
                g.add_row(y, bv)
            }
        }
    }

    /// Checked, inference-only convenience wrapper around [`Encoder::encode`].
    pub fn encode_array(&self, store: &ParamStore, frames: &Array, len: usize) -> Result<Array> {
        if frames.ndim() != 2 || frames.cols() != self.input_dim {
            return Err(Error::shape("encode", format!("[T × {}]", self.input_dim), format!("{:?}", frames.shape())));
        }
        if len == 0 || len > frames.rows() {
            return Err(Error::InvalidArgument(format!(
                "sequence length {len} outside 1..={}",
                frames.rows()
            )));
        }
        let mut g = Graph::new(store);
        let out = self.encode::<rand_chacha::ChaCha8Rng>(&mut g, frames, len, None);
        Ok(g.value(out).clone())
    }
}

fn raw_output_dim(parts: &EncoderParts) -> usize {
    match parts {
        EncoderParts::Stacked(stack) => stack.output_dim(),
        EncoderParts::Context { main, .. } => main.output_dim(),
        EncoderParts::Hierarchical { upper, .. } => upper.state_dim,
        EncoderParts::Multiscale { streams } => streams.iter().map(|(_, c)| c.state_dim).sum(),
    }
}

pub fn encode_stacked(g: &mut Graph, stack: &Stack, x: Var) -> Var {
    stack.final_state(g, x)
}

/// Adds the stop-gradient context encoding to every frame, then runs `main`.
pub fn encode_with_context(g: &mut Graph, x: Var, context: &Stack, main: &Stack) -> Result<Var> {
    let d = g.value(x).cols();
    if context.output_dim() != d || context.input_dim() != d {
        return Err(Error::shape(
            "encode_with_context",
            format!("context encoder {d} -> {d}"),
            format!("{} -> {}", context.input_dim(), context.output_dim()),
        ));
    }
    let ctx = context.outputs(g, x);
    let ctx = g.stop_gradient(ctx);
    let injected = g.add(x, ctx);
    Ok(encode_stacked(g, main, injected))
}

/// Window-level RNN, linear-expert MoE on segment states, segment-level RNN.
#[allow(clippy::too_many_arguments)]
pub fn encode_hierarchical<R: Rng + ?Sized>(
    g: &mut Graph,
    frames: &Array,
    len: usize,
    window: usize,
    lower: &RnnCell,
    mixer: &Moe,
    upper: &RnnCell,
    dropout: Option<(&mut R, f64)>,
) -> Var {
    let x = g.constant(frames.slice_rows(0, len));
    let xp = lower.project_inputs(g, x);
    let segments: Vec<Var> = (0..len.div_ceil(window))
        .map(|s| {
            let rows = g.slice_rows(xp, s * window, ((s + 1) * window).min(len));
            lower.run_final(g, rows)
        })
        .collect();
    let mut seg = g.concat_rows(&segments);
    if let Some((rng, keep)) = dropout {
        let shape = g.value(seg).shape().to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = g.constant(Array::new(shape, mask).expect("mask shape"));
        seg = g.mul(seg, mask);
    }
    let mixed = mixer.forward(g, seg);
    let up = upper.project_inputs(g, mixed);
    upper.run_final(g, up)
}

/// Keeps rows `0, rate, 2·rate, …` of the first `len` rows.
pub fn subsample_rows(frames: &Array, len: usize, rate: usize) -> Array {
    let rows: Vec<Vec<f64>> = (0..len).step_by(rate).map(|t| frames.row(t).to_vec()).collect();
    Array::from_rows(&rows).expect("at least frame 0 is kept")
}

/// One independent RNN per subsampling rate; final states concatenated.
pub fn encode_multiscale(g: &mut Graph, frames: &Array, len: usize, streams: &[(usize, RnnCell)]) -> Var {
    let finals: Vec<Var> = streams
        .iter()
        .map(|(rate, cell)| {
            let x = g.constant(subsample_rows(frames, len, *rate));
            let xp = cell.project_inputs(g, x);
            cell.run_final(g, xp)
        })
        .collect();
    if finals.len() == 1 {
        finals[0]
    } else {
        g.concat_cols(&finals)
    }
}

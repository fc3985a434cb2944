//! Declarative model descriptions, the networks they build, and checkpoints.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agg::{AttentionPool, Vlad, VladSpec};
use crate::conv1d::{ObservedStat, ResNet1d, ResNet1dSpec, RunningStat};
use crate::dataio::FrameRecord;
use crate::error::{Error, Result};
use crate::metrics::PredictionSet;
use crate::moe::{partition_vocabulary, ExpertActivation, Moe, ParallelMoe, PartitionScheme};
use crate::numcore::{Array, Graph, ParamStore, Var};
use crate::recur::{Encoder, EncoderSpec};

fn default_mixtures() -> usize {
    4
}
fn default_head_mixtures() -> usize {
    2
}
fn default_proj() -> usize {
    32
}
fn default_hops() -> usize {
    2
}

/// Which encoder and head to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// MoE on the mean frame.
    Moe {
        #[serde(default = "default_mixtures")]
        mixtures: usize,
    },
    /// One MoE per label group, on the mean frame.
    Pmoe {
        #[serde(default = "default_mixtures")]
        mixtures: usize,
        partition: PartitionScheme,
    },
    /// Recurrent encoder followed by a MoE head.
    Rnn {
        #[serde(default)]
        encoder: EncoderSpec,
        #[serde(default = "default_head_mixtures")]
        mixtures: usize,
    },
    /// Attention pooling followed by a MoE head.
    Attention {
        #[serde(default = "default_proj")]
        proj: usize,
        #[serde(default = "default_hops")]
        hops: usize,
        #[serde(default = "default_head_mixtures")]
        mixtures: usize,
    },
    /// Learnable VLAD followed by a MoE head.
    Vlad {
        #[serde(default)]
        vlad: VladSpec,
        #[serde(default = "default_head_mixtures")]
        mixtures: usize,
    },
    /// 1D residual network emitting logits.
    Resnet1d {
        #[serde(default)]
        resnet: ResNet1dSpec,
    },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Moe {
            mixtures: default_mixtures(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut mixtures = |k: usize| {
            if k == 0 {
                p.push("model.mixtures must be positive".to_string());
            }
        };
        match self {
            ModelSpec::Moe { mixtures: k } => mixtures(*k),
            ModelSpec::Pmoe { mixtures: k, partition } => {
                mixtures(*k);
                if partition.width() == 0 {
                    p.push("model.partition.width must be positive".into());
                }
            }
            ModelSpec::Rnn { encoder, mixtures: k } => {
                mixtures(*k);
                p.extend(encoder.validate());
            }
            ModelSpec::Attention { proj, hops, mixtures: k } => {
                mixtures(*k);
                if *proj == 0 || *hops == 0 {
                    p.push("model.proj and model.hops must be positive".into());
                }
            }
            ModelSpec::Vlad { vlad, mixtures: k } => {
                mixtures(*k);
                p.extend(vlad.validate());
            }
            ModelSpec::Resnet1d { resnet } => p.extend(resnet.validate()),
        }
        p
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, ModelSpec::Rnn { .. })
    }

    pub fn is_convolutional(&self) -> bool {
        matches!(self, ModelSpec::Resnet1d { .. })
    }

    /// Whether the network emits logits rather than probabilities.
    pub fn emits_logits(&self) -> bool {
        self.is_convolutional()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Moe(Moe),
    Pmoe(ParallelMoe),
    Rnn { encoder: Encoder, head: Moe },
    Attention { pool: AttentionPool, head: Moe },
    Vlad { vlad: Vlad, head: Moe },
    Resnet(ResNet1d),
}

/// A built network; parameters live in the accompanying [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub num_classes: usize,
    pub feature_dim: usize,
    body: Body,
}

/// Training-time extras for one forward pass.
#[derive(Default)]
pub struct ForwardState<'a> {
    pub dropout: Option<&'a mut ChaCha8Rng>,
    pub stats: &'a [RunningStat],
    pub observed: Option<&'a mut Vec<ObservedStat>>,
}

/// Batch output: `[B × V]` scores (probabilities, or logits when
/// [`ModelSpec::emits_logits`]) plus any auxiliary loss.
pub struct BatchOutput {
    pub scores: Var,
    pub aux_loss: Option<Var>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        spec: &ModelSpec,
        num_classes: usize,
        feature_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let problems = spec.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let (v, d) = (num_classes, feature_dim);
        let sigmoid_head = |store: &mut ParamStore, input: usize, k: usize, rng: &mut R| {
            Moe::new(store, "head", input, v, k, ExpertActivation::Sigmoid, rng)
        };
        let body = match spec {
            ModelSpec::Moe { mixtures } => Body::Moe(sigmoid_head(store, d, *mixtures, rng)?),
            ModelSpec::Pmoe { mixtures, partition } => {
                let partition = partition_vocabulary(v, *partition)?;
                Body::Pmoe(ParallelMoe::new(store, "pmoe", d, partition, *mixtures, rng)?)
            }
            ModelSpec::Rnn { encoder, mixtures } => {
                let encoder = Encoder::new(store, "encoder", encoder, d, rng)?;
                let head = sigmoid_head(store, encoder.output_dim(), *mixtures, rng)?;
                Body::Rnn { encoder, head }
            }
            ModelSpec::Attention { proj, hops, mixtures } => {
                let pool = AttentionPool::new(store, "attention", d, *proj, *hops, rng)?;
                let head = sigmoid_head(store, pool.output_dim(), *mixtures, rng)?;
                Body::Attention { pool, head }
            }
            ModelSpec::Vlad { vlad, mixtures } => {
                // frames are standardized on load, so unit feature scale
                let vlad = Vlad::new(store, "vlad", vlad.clone(), d, 1.0, rng)?;
                let head = sigmoid_head(store, vlad.output_dim(), *mixtures, rng)?;
                Body::Vlad { vlad, head }
            }
            ModelSpec::Resnet1d { resnet } => Body::Resnet(ResNet1d::new(store, "resnet", resnet.clone(), d, v, rng)?),
        };
        Ok(Self {
            spec: spec.clone(),
            num_classes,
            feature_dim,
            body,
        })
    }

    /// Fresh parameters and running statistics from `seed`.
    pub fn initialize(spec: &ModelSpec, num_classes: usize, feature_dim: usize, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(spec, num_classes, feature_dim, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn initial_stats(&self) -> Vec<RunningStat> {
        match &self.body {
            Body::Resnet(net) => net.initial_stats(),
            _ => Vec::new(),
        }
    }

    pub fn check_record(&self, rec: &FrameRecord) -> Result<()> {
        rec.validate(self.num_classes, self.feature_dim)
            .map_err(|m| Error::InvalidArgument(format!("video {}: {m}", rec.id)))
    }

    pub fn forward(&self, g: &mut Graph, batch: &[&FrameRecord], state: &mut ForwardState) -> BatchOutput {
        let mean_frames = |g: &mut Graph| {
            let rows: Vec<Var> = batch
                .iter()
                .map(|r| {
                    let x = g.constant(r.frames.clone());
                    g.mean_rows(x)
                })
                .collect();
            g.concat_rows(&rows)
        };
        let mut aux = Vec::new();
        let scores = match &self.body {
            Body::Moe(moe) => {
                let x = mean_frames(g);
                moe.forward(g, x)
            }
            Body::Pmoe(pmoe) => {
                let x = mean_frames(g);
                pmoe.forward(g, x)
            }
            Body::Rnn { encoder, head } => {
                let states: Vec<Var> = batch
                    .iter()
                    .map(|r| encoder.encode(g, &r.frames, r.len(), state.dropout.as_deref_mut()))
                    .collect();
                let x = g.concat_rows(&states);
                head.forward(g, x)
            }
            Body::Attention { pool, head } => {
                let pooled: Vec<Var> = batch
                    .iter()
                    .map(|r| {
                        let x = g.constant(r.frames.clone());
                        pool.forward(g, x)
                    })
                    .collect();
                let x = g.concat_rows(&pooled);
                head.forward(g, x)
            }
            Body::Vlad { vlad, head } => {
                let descs: Vec<Var> = batch
                    .iter()
                    .map(|r| {
                        let x = g.constant(r.frames.clone());
                        let (desc, loss) = vlad.forward(g, x);
                        aux.push(loss);
                        desc
                    })
                    .collect();
                let x = g.concat_rows(&descs);
                head.forward(g, x)
            }
            Body::Resnet(net) => {
                let logits: Vec<Var> = batch
                    .iter()
                    .map(|r| {
                        let x = g.constant(r.frames.clone());
                        net.forward(g, x, state.stats, state.observed.as_deref_mut())
                    })
                    .collect();
                g.concat_rows(&logits)
            }
        };
        let aux_loss = match (&self.body, aux.is_empty()) {
            (Body::Vlad { vlad, .. }, false) => {
                let parts: Vec<Var> = aux.into_iter().map(|l| g.reshape(l, vec![1, 1])).collect();
                let stacked = g.concat_rows(&parts);
                let total = g.sum_all(stacked);
                Some(g.scale(total, vlad.spec.cluster_weight / batch.len() as f64))
            }
            _ => None,
        };
        BatchOutput { scores, aux_loss }
    }

    /// Deterministic `[N × V]` probabilities, `chunk` videos per graph.
    pub fn predict(&self, store: &ParamStore, stats: &[RunningStat], records: &[FrameRecord]) -> Result<PredictionSet> {
        const CHUNK: usize = 64;
        let mut scores = Vec::with_capacity(records.len() * self.num_classes);
        for rec in records {
            self.check_record(rec)?;
        }
        for chunk in records.chunks(CHUNK) {
            let batch: Vec<&FrameRecord> = chunk.iter().collect();
            let mut g = Graph::new(store);
            let mut state = ForwardState {
                stats,
                ..Default::default()
            };
            let out = self.forward(&mut g, &batch, &mut state);
            let value = g.value(out.scores);
            if !value.all_finite() {
                return Err(Error::NonFinite("model scores"));
            }
            if self.spec.emits_logits() {
                scores.extend(crate::numcore::sigmoid(value).into_data());
            } else {
                scores.extend(value.data().iter().map(|p| p.clamp(0.0, 1.0)));
            }
        }
        PredictionSet::new(records.iter().map(|r| r.id.clone()).collect(), self.num_classes, scores)
    }
}

/// Multi-hot `[B × V]` label matrix.
pub fn label_matrix(batch: &[&FrameRecord], num_classes: usize) -> Array {
    let mut y = Array::zeros(vec![batch.len(), num_classes]);
    for (i, r) in batch.iter().enumerate() {
        for &c in &r.labels {
            y.set(i, c, 1.0);
        }
    }
    y
}

pub const CHECKPOINT_FORMAT: &str = "vidtag-checkpoint";

/// Everything needed to rebuild a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub spec: ModelSpec,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Examples seen when this checkpoint was taken.
    pub examples_seen: u64,
    /// Validation GAP at that point, if a validation set was used.
    pub val_gap: Option<f64>,
    pub params: ParamStore,
    #[serde(default)]
    pub stats: Vec<RunningStat>,
}

impl Checkpoint {
    pub fn new(model: &Model, params: &ParamStore, stats: &[RunningStat], examples_seen: u64, val_gap: Option<f64>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            spec: model.spec.clone(),
            num_classes: model.num_classes,
            feature_dim: model.feature_dim,
            examples_seen,
            val_gap,
            params: params.clone(),
            stats: stats.to_vec(),
        }
    }

    /// Rebuilds the network and loads the stored parameters into it.
    pub fn restore(&self) -> Result<(Model, ParamStore)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(vec![format!("unknown checkpoint format {:?}", self.format)]));
        }
        let (model, mut store) = Model::initialize(&self.spec, self.num_classes, self.feature_dim, 0)?;
        store.load_from(&self.params)?;
        if store.len() != self.params.len() {
            return Err(Error::Config(vec![format!(
                "checkpoint holds {} parameter arrays, model needs {}",
                self.params.len(),
                store.len()
            )]));
        }
        let expected = model.initial_stats();
        let shapes_match = expected.len() == self.stats.len()
            && expected.iter().zip(&self.stats).all(|(a, b)| a.mean.len() == b.mean.len() && a.var.len() == b.var.len());
        if !shapes_match {
            return Err(Error::Config(vec!["checkpoint normalization statistics do not match the model".into()]));
        }
        Ok((model, store))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{softmax, Array, Graph, ParamId, ParamStore, Var};

/// Floor inside the descriptor normalizations, so an all-zero residual stays finite.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `exp(-alpha ||x - c||^2)` with a fixed `alpha`.
    Alpha { alpha: f64 },
    /// `exp(w_j · x + b_j)` with free `w`, `b` per center.
    Decoupled,
    /// `exp(W_a · tanh(W_c c_j + W_i x + b))` with projection size `proj`.
    Attention { proj: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// Each frame's memberships sum to one.
    #[default]
    OverCenters,
    /// Each center's memberships sum to one over the frames.
    OverInputs,
}

impl SoftmaxAxis {
    fn axis(self) -> usize {
        match self {
            SoftmaxAxis::OverCenters => 1,
            SoftmaxAxis::OverInputs => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorNorm {
    /// Unit-normalize each center's residual, then the whole descriptor.
    #[default]
    IntraGlobal,
    Global,
    None,
}

fn default_centers() -> usize {
    10
}

fn default_kernel() -> KernelSpec {
    KernelSpec::Attention { proj: 16 }
}

fn default_cluster_weight() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VladSpec {
    #[serde(default = "default_centers")]
    pub centers: usize,
    #[serde(default = "default_kernel")]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub softmax: SoftmaxAxis,
    #[serde(default)]
    pub norm: DescriptorNorm,
    /// Weight of the cluster-compactness term in the training loss.
    #[serde(default = "default_cluster_weight")]
    pub cluster_weight: f64,
}

impl Default for VladSpec {
    fn default() -> Self {
        Self {
            centers: default_centers(),
            kernel: default_kernel(),
            softmax: SoftmaxAxis::default(),
            norm: DescriptorNorm::default(),
            cluster_weight: default_cluster_weight(),
        }
    }
}

impl VladSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.centers == 0 {
            problems.push("vlad.centers must be at least 1".to_string());
        }
        match self.kernel {
            KernelSpec::Alpha { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                problems.push(format!("vlad alpha must be positive, got {alpha}"));
            }
            KernelSpec::Attention { proj: 0 } => problems.push("vlad attention proj must be positive".to_string()),
            _ => {}
        }
        if !(self.cluster_weight >= 0.0 && self.cluster_weight.is_finite()) {
            problems.push(format!("vlad.cluster_weight must be non-negative, got {}", self.cluster_weight));
        }
        problems
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelParams {
    Alpha(f64),
    /// `w: [K × D]`, `b: [K]`
    Decoupled { w: ParamId, b: ParamId },
    /// `w_i, w_c: [P × D]`, `b: [P]`, `w_a: [P × 1]`
    Attention {
        w_i: ParamId,
        w_c: ParamId,
        b: ParamId,
        w_a: ParamId,
    },
}

/// Learnable soft-assignment VLAD layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vlad {
    pub spec: VladSpec,
    pub input_dim: usize,
    /// `[K × D]`
    pub centers: ParamId,
    pub kernel: KernelParams,
}

impl Vlad {
    /// Centers are drawn from `N(0, feature_std^2)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: VladSpec,
        input_dim: usize,
        feature_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut problems = spec.validate();
        if input_dim == 0 {
            problems.push("vlad input dim must be positive".to_string());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let k = spec.centers;
        let data = (0..k * input_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * feature_std
            })
            .collect();
        let centers = store.add(format!("{prefix}/centers"), Array::new(vec![k, input_dim], data)?);
        let kernel = match spec.kernel {
            KernelSpec::Alpha { alpha } => KernelParams::Alpha(alpha),
            KernelSpec::Decoupled => KernelParams::Decoupled {
                w: store.add_scaled_normal(format!("{prefix}/w"), vec![k, input_dim], input_dim, rng),
                b: store.add_zeros(format!("{prefix}/b"), vec![k]),
            },
            KernelSpec::Attention { proj } => KernelParams::Attention {
                w_i: store.add_scaled_normal(format!("{prefix}/w_i"), vec![proj, input_dim], input_dim, rng),
                w_c: store.add_scaled_normal(format!("{prefix}/w_c"), vec![proj, input_dim], input_dim, rng),
                b: store.add_zeros(format!("{prefix}/b"), vec![proj]),
                w_a: store.add_scaled_normal(format!("{prefix}/w_a"), vec![proj, 1], proj, rng),
            },
        };
        Ok(Self {
            spec,
            input_dim,
            centers,
            kernel,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.spec.centers * self.input_dim
    }

    /// Unnormalized membership logits `[T × K]`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Var {
        let c = g.param(self.centers);
        match self.kernel {
            KernelParams::Alpha(alpha) => {
                let d = g.pairwise_sq_dist(x, c);
                g.scale(d, -alpha)
            }
            KernelParams::Decoupled { w, b } => {
                let (w, b) = (g.param(w), g.param(b));
                let wt = g.transpose(w);
                let s = g.matmul(x, wt);
                g.add_row(s, b)
            }
            KernelParams::Attention { w_i, w_c, b, w_a } => {
                let t = g.value(x).rows();
                let k = self.spec.centers;
                let (w_i, w_c, b, w_a) = (g.param(w_i), g.param(w_c), g.param(b), g.param(w_a));
                let wit = g.transpose(w_i);
                let u = g.matmul(x, wit);
                let wct = g.transpose(w_c);
                let v = g.matmul(c, wct);
                let pre = g.pairwise_add(u, v);
                let pre = g.add_row(pre, b);
                let act = g.tanh(pre);
                let s = g.matmul(act, w_a);
                g.reshape(s, vec![t, k])
            }
        }
    }

    /// Memberships `[T × K]`, normalized along the configured axis.
    pub fn assign(&self, g: &mut Graph, x: Var) -> Var {
        let s = self.logits(g, x);
        g.softmax(s, self.spec.softmax.axis())
    }

    /// Returns the `[1 × K·D]` descriptor and the scalar cluster loss.
    pub fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let a = self.assign(g, x);
        let c = g.param(self.centers);
        let residual = aggregate(g, x, c, a);
        let loss = cluster_loss(g, x, c, a);
        let desc = match self.spec.norm {
            DescriptorNorm::IntraGlobal => {
                let intra = g.l2_normalize_rows(residual, NORM_EPS);
                let flat = g.reshape(intra, vec![1, self.output_dim()]);
                g.l2_normalize_rows(flat, NORM_EPS)
            }
            DescriptorNorm::Global => {
                let flat = g.reshape(residual, vec![1, self.output_dim()]);
                g.l2_normalize_rows(flat, NORM_EPS)
            }
            DescriptorNorm::None => g.reshape(residual, vec![1, self.output_dim()]),
        };
        (desc, loss)
    }
}

/// `O[j] = sum_i A[i,j] (x_i - c_j)` as a `[K × D]` node.
pub fn aggregate(g: &mut Graph, x: Var, c: Var, a: Var) -> Var {
    let at = g.transpose(a);
    let weighted = g.matmul(at, x);
    let mass = g.sum_rows(a);
    let shifted = g.scale_rows(c, mass);
    g.sub(weighted, shifted)
}

/// `sum_ij A[i,j] ||x_i - c_j||^2`
pub fn cluster_loss(g: &mut Graph, x: Var, c: Var, a: Var) -> Var {
    let d = g.pairwise_sq_dist(x, c);
    let w = g.mul(a, d);
    g.sum_all(w)
}

fn check_pair(op: &'static str, x: &Array, c: &Array) -> Result<()> {
    if x.ndim() != 2 || c.ndim() != 2 || x.cols() != c.cols() {
        return Err(Error::shape(op, "[T × D] and [K × D]", format!("{:?} and {:?}", x.shape(), c.shape())));
    }
    Ok(())
}

fn check_assignment(op: &'static str, x: &Array, c: &Array, a: &Array) -> Result<()> {
    check_pair(op, x, c)?;
    if a.shape() != [x.rows(), c.rows()] {
        return Err(Error::shape(op, format!("A [{} × {}]", x.rows(), c.rows()), format!("{:?}", a.shape())));
    }
    Ok(())
}

/// Soft assignment `A[i,j] ∝ exp(-alpha ||x_i - c_j||^2)`, rows summing to one.
pub fn assign_alpha(x: &Array, c: &Array, alpha: f64) -> Result<Array> {
    check_pair("assign_alpha", x, c)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
    let d = g.pairwise_sq_dist(xv, cv);
    let s = g.scale(d, -alpha);
    let a = g.softmax(s, 1);
    Ok(g.value(a).clone())
}

/// Soft assignment `A[i,j] ∝ exp(w_j · x_i + b_j)`.
pub fn assign_decoupled(x: &Array, w: &Array, b: &Array) -> Result<Array> {
    check_pair("assign_decoupled", x, w)?;
    if b.len() != w.rows() {
        return Err(Error::shape("assign_decoupled", format!("b of length {}", w.rows()), format!("{:?}", b.shape())));
    }
    let logits = x.matmul(&w.transpose())?;
    let mut logits = logits;
    for r in 0..logits.rows() {
        for (v, &bj) in logits.row_mut(r).iter_mut().zip(b.data()) {
            *v += bj;
        }
    }
    softmax(&logits, 1)
}

/// Memberships from a VLAD layer's own kernel and softmax scheme.
pub fn assign_attention(x: &Array, vlad: &Vlad, store: &ParamStore) -> Result<Array> {
    if !matches!(vlad.kernel, KernelParams::Attention { .. }) {
        return Err(Error::InvalidArgument("assign_attention needs an attention-kernel VLAD".into()));
    }
    vlad_assign(x, vlad, store)
}

/// Memberships `[T × K]` for any kernel.
pub fn vlad_assign(x: &Array, vlad: &Vlad, store: &ParamStore) -> Result<Array> {
    check_pair("vlad_assign", x, store.get(vlad.centers))?;
    let mut g = Graph::new(store);
    let xv = g.constant(x.clone());
    let a = vlad.assign(&mut g, xv);
    Ok(g.value(a).clone())
}

/// Unnormalized descriptor `[1 × K·D]` for a given assignment.
pub fn vlad_aggregate(x: &Array, c: &Array, a: &Array) -> Result<Array> {
    check_assignment("vlad_aggregate", x, c, a)?;
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (xv, cv, av) = (g.constant(x.clone()), g.constant(c.clone()), g.constant(a.clone()));
    let o = aggregate(&mut g, xv, cv, av);
    g.value(o).clone().reshape(vec![1, c.rows() * c.cols()])
}

pub fn vlad_cluster_loss(x: &Array, c: &Array, a: &Array) -> Result<f64> {
    check_assignment("vlad_cluster_loss", x, c, a)?;
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (xv, cv, av) = (g.constant(x.clone()), g.constant(c.clone()), g.constant(a.clone()));
    let l = cluster_loss(&mut g, xv, cv, av);
    Ok(g.scalar(l))
}

/// Applies the descriptor normalization to a `[1 × K·D]` descriptor.
pub fn normalize_descriptor(desc: &Array, centers: usize, norm: DescriptorNorm) -> Result<Array> {
    if desc.len() % centers != 0 {
        return Err(Error::shape("normalize_descriptor", format!("multiple of {centers}"), desc.len().to_string()));
    }
    let dim = desc.len() / centers;
    let mut out = desc.clone().reshape(vec![centers, dim])?;
    let unit = |row: &mut [f64]| {
        let n = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    };
    match norm {
        DescriptorNorm::IntraGlobal => {
            for r in 0..centers {
                unit(out.row_mut(r));
            }
            unit(out.data_mut());
        }
        DescriptorNorm::Global => unit(out.data_mut()),
        DescriptorNorm::None => {}
    }
    out.reshape(vec![1, desc.len()])
}

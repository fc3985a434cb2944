//! A small reverse-mode tape over [`Array`] values.
//!
//! Layers build their forward pass with the methods on [`Graph`]; calling
//! [`Graph::backward`] on a scalar node returns gradients for every
//! parameter leaf. Shape misuse inside the tape is a programmer error and
//! panics; checked entry points live in the layer modules.

use std::collections::HashMap;

use crate::numcore::activation::{axis_extents, sigmoid_scalar, softmax_unchecked, softplus};
use crate::numcore::array::matmul_raw;
use crate::numcore::{Array, Gradients, ParamId, ParamStore};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m×n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// `[m×n] * [m]`, scaling row `i` by `s[i]`.
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var, usize),
    SumAll(Var),
    /// Sum along axis 0 of a 2-D array, giving `[1×n]`.
    SumRows(Var),
    /// Sum along axis 1 of a 2-D array, giving `[m×1]`.
    SumCols(Var),
    MeanRows(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize),
    GatherCols(Var, Vec<usize>),
    PairwiseSqDist(Var, Var),
    PairwiseAdd(Var, Var),
    L2NormalizeRows(Var, f64),
    Conv1d {
        x: Var,
        w: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    SigmoidCrossEntropy(Var, Array),
    BinaryCrossEntropy(Var, Array),
    SmoothedSoftmax(Var, Array),
}

enum Value {
    Owned(Array),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

const BCE_FLOOR: f64 = 1e-12;

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        a.data()[0]
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Forward value passes through, backward contributes nothing upstream.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(out, Op::Transpose(a), ng)
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::from_parts(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_same(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a length-`n` bias to every row of `[m×n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        assert_eq!(bv.len(), n, "add_row bias length");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, bias]);
        self.push(out, Op::AddRow(a, bias), ng)
    }

    /// Multiplies every row of `[m×n]` elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, factor: Var) -> Var {
        let (av, fv) = (self.value(a), self.value(factor));
        let n = av.cols();
        assert_eq!(fv.len(), n, "mul_row factor length");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &f) in out.row_mut(r).iter_mut().zip(fv.data()) {
                *o *= f;
            }
        }
        let ng = self.ng(&[a, factor]);
        self.push(out, Op::MulRow(a, factor), ng)
    }

    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.len(), av.rows(), "scale_rows length");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let f = sv.data()[r];
            for o in out.row_mut(r) {
                *o *= f;
            }
        }
        let ng = self.ng(&[a, s]);
        self.push(out, Op::ScaleRows(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        assert!(axis < self.value(a).ndim(), "softmax axis out of range");
        let out = softmax_unchecked(self.value(a), axis);
        let ng = self.ng(&[a]);
        self.push(out, Op::Softmax(a, axis), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, &x) in out.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let ng = self.ng(&[a]);
        self.push(Array::from_parts(vec![1, n], out), Op::SumRows(a), ng)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.rows();
        let out = (0..m).map(|r| av.row(r).iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(Array::from_parts(vec![m, 1], out), Op::SumCols(a), ng)
    }

    /// Mean over rows (time), giving `[1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, &x) in out.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.ng(&[a]);
        self.push(Array::from_parts(vec![1, n], out), Op::MeanRows(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        let ng = self.ng(&[a]);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), m, "concat_cols row mismatch");
                self.value(p).cols()
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = self.ng(parts);
        self.push(Array::from_parts(vec![m, n], out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), n, "concat_rows column mismatch");
            m += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let ng = self.ng(parts);
        self.push(Array::from_parts(vec![m, n], out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start < end && end <= av.cols(), "slice_cols out of range");
        let mut out = Vec::with_capacity(av.rows() * (end - start));
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row(r)[start..end]);
        }
        let ng = self.ng(&[a]);
        self.push(
            Array::from_parts(vec![av.rows(), end - start], out),
            Op::SliceCols(a, start, end),
            ng,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_rows(start, end);
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    /// `out[:, j] = a[:, index[j]]`
    pub fn gather_cols(&mut self, a: Var, index: Vec<usize>) -> Var {
        let av = self.value(a);
        let m = av.rows();
        let mut out = Vec::with_capacity(m * index.len());
        for r in 0..m {
            let row = av.row(r);
            out.extend(index.iter().map(|&j| row[j]));
        }
        let ng = self.ng(&[a]);
        let shape = vec![m, index.len()];
        self.push(Array::from_parts(shape, out), Op::GatherCols(a, index), ng)
    }

    /// `out[i, j] = ||a_i - b_j||^2` for `a: [T×D]`, `b: [K×D]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "pairwise_sq_dist dims");
        let (t, k) = (av.rows(), bv.rows());
        let mut out = Vec::with_capacity(t * k);
        for i in 0..t {
            for j in 0..k {
                out.push(av.row(i).iter().zip(bv.row(j)).map(|(x, c)| (x - c) * (x - c)).sum());
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(Array::from_parts(vec![t, k], out), Op::PairwiseSqDist(a, b), ng)
    }

    /// Row `i*K + j` of the `[T·K × P]` result is `a_i + b_j`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "pairwise_add dims");
        let (t, k, p) = (av.rows(), bv.rows(), av.cols());
        let mut out = Vec::with_capacity(t * k * p);
        for i in 0..t {
            for j in 0..k {
                out.extend(av.row(i).iter().zip(bv.row(j)).map(|(x, y)| x + y));
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(Array::from_parts(vec![t * k, p], out), Op::PairwiseAdd(a, b), ng)
    }

    /// Divides each row by `sqrt(||row||^2 + eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
            for x in row {
                *x /= norm;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::L2NormalizeRows(a, eps), ng)
    }

    /// Cross-correlation along time.
    ///
    /// `x: [T×Cin]`, `w: [kernel·Cin × Cout]` with row `q·Cin + c` holding tap
    /// `q` of input channel `c`. Zero padding of `pad` frames on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (t, cin) = (xv.rows(), xv.cols());
        let cout = wv.cols();
        assert_eq!(wv.rows(), kernel * cin, "conv1d kernel rows");
        assert!(stride >= 1 && kernel >= 1);
        let padded = t + 2 * pad;
        assert!(padded >= kernel, "conv1d output would be empty");
        let tout = (padded - kernel) / stride + 1;
        let mut out = vec![0.0; tout * cout];
        for o in 0..tout {
            let orow = &mut out[o * cout..(o + 1) * cout];
            for q in 0..kernel {
                let pos = o * stride + q;
                if pos < pad || pos - pad >= t {
                    continue;
                }
                let xrow = xv.row(pos - pad);
                for (c, &xval) in xrow.iter().enumerate() {
                    if xval == 0.0 {
                        continue;
                    }
                    let wrow = wv.row(q * cin + c);
                    for (acc, &wval) in orow.iter_mut().zip(wrow) {
                        *acc += xval * wval;
                    }
                }
            }
        }
        let ng = self.ng(&[x, w]);
        self.push(
            Array::from_parts(vec![tout, cout], out),
            Op::Conv1d {
                x,
                w,
                kernel,
                stride,
                pad,
            },
            ng,
        )
    }

    /// Per-channel max over time windows; padded positions never win.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (t, c) = (xv.rows(), xv.cols());
        let padded = t + 2 * pad;
        assert!(padded >= kernel && kernel > pad, "max_pool1d window");
        let tout = (padded - kernel) / stride + 1;
        let mut out = vec![0.0; tout * c];
        let mut argmax = vec![0usize; tout * c];
        for o in 0..tout {
            let lo = (o * stride).saturating_sub(pad);
            let hi = (o * stride + kernel - pad).min(t);
            for ch in 0..c {
                let mut best = lo;
                for pos in lo..hi {
                    if xv.get(pos, ch) > xv.get(best, ch) {
                        best = pos;
                    }
                }
                out[o * c + ch] = xv.get(best, ch);
                argmax[o * c + ch] = best;
            }
        }
        let ng = self.ng(&[x]);
        self.push(Array::from_parts(vec![tout, c], out), Op::MaxPool1d { x, argmax }, ng)
    }

    /// Mean binary cross-entropy on logits.
    pub fn sigmoid_cross_entropy(&mut self, logits: Var, labels: &Array) -> Var {
        let zv = self.value(logits);
        assert_eq!(zv.shape(), labels.shape(), "label shape");
        let n = zv.len() as f64;
        let total: f64 = zv
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&z, &y)| softplus(z) - z * y)
            .sum();
        let ng = self.ng(&[logits]);
        self.push(Array::scalar(total / n), Op::SigmoidCrossEntropy(logits, labels.clone()), ng)
    }

    /// Mean binary cross-entropy on probabilities, logs floored at 1e-12.
    pub fn binary_cross_entropy(&mut self, probs: Var, labels: &Array) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.shape(), labels.shape(), "label shape");
        let n = pv.len() as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&p, &y)| -y * p.max(BCE_FLOOR).ln() - (1.0 - y) * (1.0 - p).max(BCE_FLOOR).ln())
            .sum();
        let ng = self.ng(&[probs]);
        self.push(Array::scalar(total / n), Op::BinaryCrossEntropy(probs, labels.clone()), ng)
    }

    /// Row-averaged softmax cross-entropy against row-normalized labels.
    pub fn smoothed_softmax_loss(&mut self, logits: Var, labels: &Array) -> Var {
        let zv = self.value(logits);
        let loss = crate::numcore::activation::smoothed_softmax_loss(zv, labels)
            .expect("smoothed softmax labels must have a positive per row");
        let ng = self.ng(&[logits]);
        self.push(Array::scalar(loss), Op::SmoothedSoftmax(logits, labels.clone()), ng)
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut param_grads = Gradients::zeros_like(self.params);
        assert_eq!(self.value(output).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Array>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array::full(self.value(output).shape().to_vec(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let out = self.value(Var(idx));
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => param_grads.get_mut(*id).add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.nodes[a.0].needs_grad {
                        let bt = bv.transpose();
                        let ga = matmul_raw(g.data(), bt.data(), m, n, k);
                        accumulate(&self.nodes, &mut grads, *a, ga.reshape(av.shape().to_vec()).unwrap());
                    }
                    if self.nodes[b.0].needs_grad {
                        let at = av.transpose();
                        let gb = matmul_raw(at.data(), g.data(), k, m, n);
                        accumulate(&self.nodes, &mut grads, *b, gb.reshape(bv.shape().to_vec()).unwrap());
                    }
                }
                Op::Transpose(a) => {
                    let ga = g.transpose().reshape(self.value(*a).shape().to_vec()).unwrap();
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::Add(a, b) => {
                    accumulate(&self.nodes, &mut grads, *a, g.clone());
                    accumulate(&self.nodes, &mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&self.nodes, &mut grads, *b, g.map(|x| -x));
                    accumulate(&self.nodes, &mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip(&g, self.value(*b), |x, y| x * y);
                    let gb = zip(&g, self.value(*a), |x, y| x * y);
                    accumulate(&self.nodes, &mut grads, *a, ga);
                    accumulate(&self.nodes, &mut grads, *b, gb);
                }
                Op::MulRow(a, factor) => {
                    let (av, fv) = (self.value(*a), self.value(*factor));
                    if self.nodes[factor.0].needs_grad {
                        let mut gf = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for ((o, &x), &y) in gf.iter_mut().zip(g.row(r)).zip(av.row(r)) {
                                *o += x * y;
                            }
                        }
                        accumulate(&self.nodes, &mut grads, *factor, Array::from_parts(fv.shape().to_vec(), gf));
                    }
                    if self.nodes[a.0].needs_grad {
                        let mut ga = g.clone();
                        for r in 0..ga.rows() {
                            for (o, &f) in ga.row_mut(r).iter_mut().zip(fv.data()) {
                                *o *= f;
                            }
                        }
                        accumulate(&self.nodes, &mut grads, *a, ga);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.nodes[bias.0].needs_grad {
                        let bshape = self.value(*bias).shape().to_vec();
                        let mut gb = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for (o, &x) in gb.iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                        accumulate(&self.nodes, &mut grads, *bias, Array::from_parts(bshape, gb));
                    }
                    accumulate(&self.nodes, &mut grads, *a, g);
                }
                Op::ScaleRows(a, s) => {
                    let (av, sv) = (self.value(*a), self.value(*s));
                    if self.nodes[s.0].needs_grad {
                        let gs = (0..av.rows())
                            .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                            .collect();
                        accumulate(&self.nodes, &mut grads, *s, Array::from_parts(sv.shape().to_vec(), gs));
                    }
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        let f = sv.data()[r];
                        for x in ga.row_mut(r) {
                            *x *= f;
                        }
                    }
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&self.nodes, &mut grads, *a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => accumulate(&self.nodes, &mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let ga = zip(&g, out, |gi, y| gi * y * (1.0 - y));
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = zip(&g, out, |gi, y| gi * (1.0 - y * y));
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = zip(&g, self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::Softmax(a, axis) => {
                    let (outer, len, inner) = axis_extents(out.shape(), *axis);
                    let (y, gd) = (out.data(), g.data());
                    let mut ga = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                ga[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                    accumulate(&self.nodes, &mut grads, *a, Array::from_parts(out.shape().to_vec(), ga));
                }
                Op::SumAll(a) => {
                    let gv = g.data()[0];
                    let ga = Array::full(self.value(*a).shape().to_vec(), gv);
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::SumRows(a) | Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let m = av.rows();
                    let f = if matches!(node.op, Op::MeanRows(_)) { 1.0 / m as f64 } else { 1.0 };
                    let mut ga = Vec::with_capacity(av.len());
                    for _ in 0..m {
                        ga.extend(g.data().iter().map(|x| x * f));
                    }
                    accumulate(&self.nodes, &mut grads, *a, Array::from_parts(av.shape().to_vec(), ga));
                }
                Op::SumCols(a) => {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut ga = Vec::with_capacity(av.len());
                    for &x in g.data() {
                        ga.extend(std::iter::repeat_n(x, n));
                    }
                    accumulate(&self.nodes, &mut grads, *a, Array::from_parts(av.shape().to_vec(), ga));
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&self.nodes, &mut grads, *a, g.reshape(shape).unwrap());
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.nodes[p.0].needs_grad {
                            let mut gp = Vec::with_capacity(m * w);
                            for r in 0..m {
                                gp.extend_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            let shape = self.value(p).shape().to_vec();
                            accumulate(&self.nodes, &mut grads, p, Array::from_parts(shape, gp));
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let n = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let len = pv.rows() * n;
                        if self.nodes[p.0].needs_grad {
                            let gp = g.data()[offset..offset + len].to_vec();
                            accumulate(&self.nodes, &mut grads, p, Array::from_parts(pv.shape().to_vec(), gp));
                        }
                        offset += len;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let av = self.value(*a);
                    let mut ga = Array::zeros(av.shape().to_vec());
                    for r in 0..av.rows() {
                        ga.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Array::zeros(av.shape().to_vec());
                    let n = av.cols();
                    ga.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::GatherCols(a, index) => {
                    let av = self.value(*a);
                    let mut ga = Array::zeros(av.shape().to_vec());
                    for r in 0..g.rows() {
                        let grow = g.row(r);
                        let arow = ga.row_mut(r);
                        for (j, &src) in index.iter().enumerate() {
                            arow[src] += grow[j];
                        }
                    }
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::PairwiseSqDist(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (t, k) = (av.rows(), bv.rows());
                    let mut ga = Array::zeros(av.shape().to_vec());
                    let mut gb = Array::zeros(bv.shape().to_vec());
                    for i in 0..t {
                        for j in 0..k {
                            let gij = 2.0 * g.get(i, j);
                            if gij == 0.0 {
                                continue;
                            }
                            for d in 0..av.cols() {
                                let diff = gij * (av.get(i, d) - bv.get(j, d));
                                ga.row_mut(i)[d] += diff;
                                gb.row_mut(j)[d] -= diff;
                            }
                        }
                    }
                    accumulate(&self.nodes, &mut grads, *a, ga);
                    accumulate(&self.nodes, &mut grads, *b, gb);
                }
                Op::PairwiseAdd(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (t, k) = (av.rows(), bv.rows());
                    let mut ga = Array::zeros(av.shape().to_vec());
                    let mut gb = Array::zeros(bv.shape().to_vec());
                    for i in 0..t {
                        for j in 0..k {
                            let grow = g.row(i * k + j);
                            for (o, &x) in ga.row_mut(i).iter_mut().zip(grow) {
                                *o += x;
                            }
                            for (o, &x) in gb.row_mut(j).iter_mut().zip(grow) {
                                *o += x;
                            }
                        }
                    }
                    accumulate(&self.nodes, &mut grads, *a, ga);
                    accumulate(&self.nodes, &mut grads, *b, gb);
                }
                Op::L2NormalizeRows(a, eps) => {
                    let av = self.value(*a);
                    let mut ga = Array::zeros(av.shape().to_vec());
                    for r in 0..av.rows() {
                        let norm = (av.row(r).iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gr).zip(y) {
                            *o = (gi - yi * dot) / norm;
                        }
                    }
                    accumulate(&self.nodes, &mut grads, *a, ga);
                }
                Op::Conv1d {
                    x,
                    w,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (t, cin) = (xv.rows(), xv.cols());
                    let tout = g.rows();
                    let want_x = self.nodes[x.0].needs_grad;
                    let want_w = self.nodes[w.0].needs_grad;
                    let mut gx = Array::zeros(xv.shape().to_vec());
                    let mut gw = Array::zeros(wv.shape().to_vec());
                    for o in 0..tout {
                        let grow = g.row(o);
                        for q in 0..*kernel {
                            let pos = o * stride + q;
                            if pos < *pad || pos - pad >= t {
                                continue;
                            }
                            let src = pos - pad;
                            for c in 0..cin {
                                let wrow = wv.row(q * cin + c);
                                if want_x {
                                    let s: f64 = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                                    gx.row_mut(src)[c] += s;
                                }
                                if want_w {
                                    let xval = xv.get(src, c);
                                    if xval != 0.0 {
                                        for (acc, &gi) in gw.row_mut(q * cin + c).iter_mut().zip(grow) {
                                            *acc += xval * gi;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if want_x {
                        accumulate(&self.nodes, &mut grads, *x, gx);
                    }
                    if want_w {
                        accumulate(&self.nodes, &mut grads, *w, gw);
                    }
                }
                Op::MaxPool1d { x, argmax } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = Array::zeros(xv.shape().to_vec());
                    for (flat, &src) in argmax.iter().enumerate() {
                        let ch = flat % c;
                        gx.row_mut(src)[ch] += g.data()[flat];
                    }
                    accumulate(&self.nodes, &mut grads, *x, gx);
                }
                Op::SigmoidCrossEntropy(z, labels) => {
                    let zv = self.value(*z);
                    let f = g.data()[0] / zv.len() as f64;
                    let gz = zip(zv, labels, |zi, yi| f * (sigmoid_scalar(zi) - yi));
                    accumulate(&self.nodes, &mut grads, *z, gz);
                }
                Op::BinaryCrossEntropy(p, labels) => {
                    let pv = self.value(*p);
                    let f = g.data()[0] / pv.len() as f64;
                    let gp = zip(pv, labels, |pi, yi| {
                        let pos = if pi > BCE_FLOOR { -yi / pi } else { 0.0 };
                        let neg = if 1.0 - pi > BCE_FLOOR { (1.0 - yi) / (1.0 - pi) } else { 0.0 };
                        f * (pos + neg)
                    });
                    accumulate(&self.nodes, &mut grads, *p, gp);
                }
                Op::SmoothedSoftmax(z, labels) => {
                    let zv = self.value(*z);
                    let n = zv.rows() as f64;
                    let f = g.data()[0] / n;
                    let sm = softmax_unchecked(zv, zv.ndim() - 1);
                    let mut gz = Array::zeros(zv.shape().to_vec());
                    for r in 0..zv.rows() {
                        let mass: f64 = labels.row(r).iter().sum();
                        let (p, y) = (sm.row(r), labels.row(r));
                        for (j, o) in gz.row_mut(r).iter_mut().enumerate() {
                            *o = f * (p[j] - y[j] / mass);
                        }
                    }
                    accumulate(&self.nodes, &mut grads, *z, gz);
                }
            }
        }
        param_grads
    }
}

fn zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::from_parts(a.shape().to_vec(), data)
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Array>], v: Var, g: Array) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numcore::{grad_check, GRAD_CHECK_EPS};

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Array {
        let n = shape.iter().product();
        Array::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Gradient-checks `f(a, b)` reduced against a fixed random probe.
    fn check(name: &str, a: Vec<usize>, b: Vec<usize>, f: impl Fn(&mut Graph, Var, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
        let mut store = ParamStore::new();
        let pa = store.add("a", random(a, &mut rng));
        let pb = store.add("b", random(b, &mut rng));
        let probe_shape = {
            let mut g = Graph::new(&store);
            let (x, y) = (g.param(pa), g.param(pb));
            let o = f(&mut g, x, y);
            g.shape(o).to_vec()
        };
        let probe = random(probe_shape, &mut rng);
        let report = grad_check(
            &mut store,
            |g| {
                let (x, y) = (g.param(pa), g.param(pb));
                let o = f(g, x, y);
                let p = g.constant(probe.clone());
                let m = g.mul(o, p);
                g.sum_all(m)
            },
            GRAD_CHECK_EPS,
        );
        assert!(report.max_rel_error < 1e-6, "{name}: {report:?}");
    }

    #[test]
    fn elementwise_and_linear_ops() {
        check("matmul", vec![3, 4], vec![4, 2], |g, a, b| g.matmul(a, b));
        check("transpose", vec![3, 4], vec![1], |g, a, _| g.transpose(a));
        check("add", vec![2, 3], vec![2, 3], |g, a, b| g.add(a, b));
        check("sub", vec![2, 3], vec![2, 3], |g, a, b| g.sub(a, b));
        check("mul", vec![2, 3], vec![2, 3], |g, a, b| g.mul(a, b));
        check("add_row", vec![4, 3], vec![3], |g, a, b| g.add_row(a, b));
        check("mul_row", vec![4, 3], vec![3], |g, a, b| g.mul_row(a, b));
        check("scale_rows", vec![4, 3], vec![4], |g, a, b| g.scale_rows(a, b));
        check("scale", vec![2, 2], vec![1], |g, a, _| g.scale(a, -2.5));
        check("one_minus", vec![2, 2], vec![1], |g, a, _| g.one_minus(a));
        check("sigmoid", vec![3, 3], vec![1], |g, a, _| g.sigmoid(a));
        check("tanh", vec![3, 3], vec![1], |g, a, _| g.tanh(a));
        check("relu", vec![3, 3], vec![1], |g, a, _| g.relu(a));
    }

    #[test]
    fn reductions_and_reshapes() {
        check("softmax0", vec![3, 4], vec![1], |g, a, _| g.softmax(a, 0));
        check("softmax1", vec![3, 4], vec![1], |g, a, _| g.softmax(a, 1));
        check("sum_rows", vec![3, 4], vec![1], |g, a, _| g.sum_rows(a));
        check("sum_cols", vec![3, 4], vec![1], |g, a, _| g.sum_cols(a));
        check("mean_rows", vec![3, 4], vec![1], |g, a, _| g.mean_rows(a));
        check("reshape", vec![3, 4], vec![1], |g, a, _| g.reshape(a, vec![2, 6]));
        check("concat_cols", vec![3, 2], vec![3, 1], |g, a, b| g.concat_cols(&[a, b, a]));
        check("concat_rows", vec![1, 3], vec![2, 3], |g, a, b| g.concat_rows(&[b, a]));
        check("slice_cols", vec![3, 5], vec![1], |g, a, _| g.slice_cols(a, 1, 4));
        check("slice_rows", vec![5, 2], vec![1], |g, a, _| g.slice_rows(a, 2, 4));
        check("gather_cols", vec![2, 4], vec![1], |g, a, _| g.gather_cols(a, vec![3, 0, 0, 2]));
        check("l2_normalize_rows", vec![3, 4], vec![1], |g, a, _| g.l2_normalize_rows(a, 1e-12));
    }

    #[test]
    fn pairwise_and_temporal_ops() {
        check("pairwise_sq_dist", vec![3, 2], vec![4, 2], |g, a, b| g.pairwise_sq_dist(a, b));
        check("pairwise_add", vec![3, 2], vec![4, 2], |g, a, b| g.pairwise_add(a, b));
        check("conv1d", vec![7, 2], vec![6, 3], |g, a, b| g.conv1d(a, b, 3, 2, 1));
        check("conv1d_k1", vec![5, 2], vec![2, 3], |g, a, b| g.conv1d(a, b, 1, 1, 0));
        check("max_pool1d", vec![7, 3], vec![1], |g, a, _| g.max_pool1d(a, 3, 2, 1));
    }

    #[test]
    fn losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = Array::new(vec![2, 3], vec![1., 0., 1., 0., 0., 1.]).unwrap();
        let mut store = ParamStore::new();
        let z = store.add("z", random(vec![2, 3], &mut rng));
        for kind in 0..3 {
            let report = grad_check(
                &mut store,
                |g| {
                    let zv = g.param(z);
                    match kind {
                        0 => g.sigmoid_cross_entropy(zv, &labels),
                        1 => {
                            let p = g.sigmoid(zv);
                            g.binary_cross_entropy(p, &labels)
                        }
                        _ => g.smoothed_softmax_loss(zv, &labels),
                    }
                },
                GRAD_CHECK_EPS,
            );
            assert!(report.max_rel_error < 1e-6, "loss {kind}: {report:?}");
        }
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut store = ParamStore::new();
        let a = store.add("a", Array::full(vec![2, 2], 0.5));
        let mut g = Graph::new(&store);
        let av = g.param(a);
        let sq = g.mul(av, av);
        let cut = g.stop_gradient(sq);
        let both = g.add(cut, av);
        let s = g.sum_all(both);
        let grads = g.backward(s);
        assert!(grads.get(a).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv1d_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(vec![5, 2], &mut rng);
        let w = random(vec![6, 3], &mut rng);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let o = g.conv1d(xv, wv, 3, 1, 1);
        let out = g.value(o);
        assert_eq!(out.shape(), &[5, 3]);
        for t in 0..5 {
            for co in 0..3 {
                let mut acc = 0.0;
                for q in 0..3 {
                    let pos = t as isize + q as isize - 1;
                    if (0..5).contains(&pos) {
                        for c in 0..2 {
                            acc += x.get(pos as usize, c) * w.get(q * 2 + c, co);
                        }
                    }
                }
                assert!((out.get(t, co) - acc).abs() < 1e-14);
            }
        }
    }
}

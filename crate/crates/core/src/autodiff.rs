//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is applied. Nodes are only
//! ever appended, so creation order is a topological order and the
//! backward pass simply walks the tape in reverse.
//!
//! The op set is deliberately small: exactly what the convolutional
//! encoder and the sub-block contrastive objective need. Activations are
//! laid out channel-last (`N×T×C`), matching the `B×T×D` layout of the
//! input windows.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Zero-padding mode for [`Graph::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length; `(K-1)/2` zeros on the left and
    /// the remainder on the right.
    Same,
    /// No padding; output length is `T - K + 1`.
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: NodeId,
        weight: NodeId,
        pad_left: usize,
        // im2col buffer of the forward pass, reused by the adjoint
        cols: Vec<f64>,
    },
    BiasAdd {
        input: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    MeanPoolTime(NodeId),
    Dense {
        input: NodeId,
        weight: NodeId,
    },
    Contract {
        left: NodeId,
        right: NodeId,
        scale: f64,
    },
    SoftmaxCe {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mean(NodeId),
    Sum(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, if it was reached.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

/// The recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a trainable leaf. Gradients are computed for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Adds a constant leaf. No gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// 1-D cross-correlation, stride 1.
    ///
    /// `input` is `N×T×C_in`, `weight` is `C_out×C_in×K`; the result is
    /// `N×T'×C_out` with `T'` set by `padding`.
    pub fn conv1d(&mut self, input: NodeId, weight: NodeId, padding: Padding) -> Result<NodeId> {
        let (x, w) = (self.value(input), self.value(weight));
        let (&[n, t, c_in], &[c_out, wc_in, k]) = (x.shape(), w.shape()) else {
            return Err(Error::shape(
                "conv1d",
                format!("expected N×T×C input and O×C×K weight, got {:?} and {:?}", x.shape(), w.shape()),
            ));
        };
        if wc_in != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("input has {c_in} channels, weight expects {wc_in}"),
            ));
        }
        let (pad_left, t_out) = match padding {
            Padding::Same => ((k - 1) / 2, t),
            Padding::Valid => {
                if t < k {
                    return Err(Error::shape(
                        "conv1d",
                        format!("valid convolution needs T >= K, got T={t} K={k}"),
                    ));
                }
                (0, t - k + 1)
            }
        };
        let width = c_in * k;
        let rows = n * t_out;
        let xd = x.data();
        let mut cols = vec![0.0; rows * width];
        for b in 0..n {
            let xb = &xd[b * t * c_in..(b + 1) * t * c_in];
            for to in 0..t_out {
                let row = &mut cols[(b * t_out + to) * width..(b * t_out + to + 1) * width];
                for tap in 0..k {
                    let src = to + tap;
                    if src < pad_left || src - pad_left >= t {
                        continue;
                    }
                    let xs = &xb[(src - pad_left) * c_in..(src - pad_left + 1) * c_in];
                    for (c, &v) in xs.iter().enumerate() {
                        row[c * k + tap] = v;
                    }
                }
            }
        }
        let mut out = vec![0.0; rows * c_out];
        gemm(rows, width, c_out, &cols, width, 1, w.data(), 1, width, &mut out, false);
        let value = Tensor::new(&[n, t_out, c_out], out)?;
        let rg = self.needs(&[input, weight]);
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                pad_left,
                cols,
            },
            rg,
        ))
    }

    /// Adds `bias` (length C) along the last axis of `input`.
    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, b) = (self.value(input), self.value(bias));
        let c = *x.shape().last().unwrap();
        if b.shape() != [c] {
            return Err(Error::shape(
                "bias_add",
                format!("bias {:?} does not match trailing extent {c}", b.shape()),
            ));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let rg = self.needs(&[input, bias]);
        Ok(self.push(out, Op::BiasAdd { input, bias }, rg))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            if *v <= 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.needs(&[input]);
        self.push(out, Op::Relu(input), rg)
    }

    /// Mean over the temporal axis: `N×T×C` to `N×C`.
    pub fn mean_pool_time(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let &[n, t, c] = x.shape() else {
            return Err(Error::shape("mean_pool_time", format!("expected rank 3, got {:?}", x.shape())));
        };
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            let acc = &mut out[b * c..(b + 1) * c];
            for row in x.data()[b * t * c..(b + 1) * t * c].chunks(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            let inv = 1.0 / t as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::MeanPoolTime(input), rg))
    }

    /// `input (N×C_in) · weightᵀ` with `weight` stored `C_out×C_in`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId) -> Result<NodeId> {
        let (x, w) = (self.value(input), self.value(weight));
        let (&[n, c_in], &[c_out, wc_in]) = (x.shape(), w.shape()) else {
            return Err(Error::shape(
                "dense",
                format!("expected N×C input and O×C weight, got {:?} and {:?}", x.shape(), w.shape()),
            ));
        };
        if c_in != wc_in {
            return Err(Error::shape(
                "dense",
                format!("input has {c_in} features, weight expects {wc_in}"),
            ));
        }
        let mut out = vec![0.0; n * c_out];
        gemm(n, c_in, c_out, x.data(), c_in, 1, w.data(), 1, c_in, &mut out, false);
        let value = Tensor::new(&[n, c_out], out)?;
        let rg = self.needs(&[input, weight]);
        Ok(self.push(value, Op::Dense { input, weight }, rg))
    }

    /// Batched contraction over the feature axis:
    /// `out[b,j,p] = scale · Σ_f left[b,j,f] · right[b,p,f]`.
    pub fn contract(&mut self, left: NodeId, right: NodeId, scale: f64) -> Result<NodeId> {
        let (l, r) = (self.value(left), self.value(right));
        let (&[b, k, f], &[rb, m, rf]) = (l.shape(), r.shape()) else {
            return Err(Error::shape(
                "contract",
                format!("expected rank-3 operands, got {:?} and {:?}", l.shape(), r.shape()),
            ));
        };
        if b != rb || f != rf {
            return Err(Error::shape(
                "contract",
                format!("operands {:?} and {:?} disagree on batch or feature extent", l.shape(), r.shape()),
            ));
        }
        let mut out = vec![0.0; b * k * m];
        for i in 0..b {
            gemm(
                k,
                f,
                m,
                &l.data()[i * k * f..],
                f,
                1,
                &r.data()[i * m * f..],
                1,
                f,
                &mut out[i * k * m..(i + 1) * k * m],
                false,
            );
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let value = Tensor::new(&[b, k, m], out)?;
        let rg = self.needs(&[left, right]);
        Ok(self.push(value, Op::Contract { left, right, scale }, rg))
    }

    /// Fused softmax + cross-entropy, averaged over rows.
    ///
    /// The last axis of `logits` holds the classes; every other axis is
    /// flattened into rows, and `targets` gives one class per row.
    pub fn softmax_ce(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let x = self.value(logits);
        let c = *x.shape().last().unwrap();
        let rows = x.len() / c;
        if targets.len() != rows {
            return Err(Error::shape(
                "softmax_ce",
                format!("{rows} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(
                "softmax_ce",
                format!("target {bad} out of range for {c} classes"),
            ));
        }
        if !x.is_finite() {
            return Err(Error::Numerics("softmax_ce received non-finite logits".into()));
        }
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for ((row, p), &t) in x.data().chunks(c).zip(probs.chunks_mut(c)).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= z);
            loss += z.ln() + max - row[t];
        }
        let value = Tensor::scalar(loss / rows as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let v = x.data().iter().sum::<f64>() / x.len() as f64;
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(v), Op::Mean(input), rg)
    }

    /// Sum of all elements.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input).data().iter().sum::<f64>();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(v), Op::Sum(input), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(input).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.needs(&[input]);
        self.push(out, Op::Scale(input, factor), rg)
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(out, Op::Reshape(input), rg))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every node that requires a gradient and lies upstream of `loss`
    /// receives one; fan-out contributions are summed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let g = up.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                pad_left,
                cols,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (&[n, t, c_in], &[c_out, _, k]) = (x.shape(), w.shape()) else {
                    unreachable!()
                };
                let t_out = node.value.shape()[1];
                let rows = n * t_out;
                let width = c_in * k;
                if self.nodes[weight.0].requires_grad {
                    let mut dw = vec![0.0; c_out * width];
                    gemm(c_out, rows, width, g, 1, c_out, cols, width, 1, &mut dw, false);
                    self.accumulate(grads, *weight, Tensor::new(w.shape(), dw)?);
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; rows * width];
                    gemm(rows, c_out, width, g, c_out, 1, w.data(), width, 1, &mut dcols, false);
                    let mut dx = vec![0.0; n * t * c_in];
                    for b in 0..n {
                        for to in 0..t_out {
                            let row = &dcols[(b * t_out + to) * width..(b * t_out + to + 1) * width];
                            for tap in 0..k {
                                let src = to + tap;
                                if src < *pad_left || src - pad_left >= t {
                                    continue;
                                }
                                let base = (b * t + src - pad_left) * c_in;
                                for c in 0..c_in {
                                    dx[base + c] += row[c * k + tap];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(x.shape(), dx)?);
                }
            }
            Op::BiasAdd { input, bias } => {
                let c = self.value(*bias).len();
                if self.nodes[bias.0].requires_grad {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[c], db)?);
                }
                self.accumulate(grads, *input, up.clone());
            }
            Op::Relu(input) => {
                let mut dx = up.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::MeanPoolTime(input) => {
                let shape = self.value(*input).shape().to_vec();
                let (n, t, c) = (shape[0], shape[1], shape[2]);
                let inv = 1.0 / t as f64;
                let mut dx = vec![0.0; n * t * c];
                for b in 0..n {
                    let src = &g[b * c..(b + 1) * c];
                    for row in dx[b * t * c..(b + 1) * t * c].chunks_mut(c) {
                        for (d, v) in row.iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(&shape, dx)?);
            }
            Op::Dense { input, weight } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (&[n, c_in], c_out) = (x.shape(), w.shape()[0]) else {
                    unreachable!()
                };
                if self.nodes[weight.0].requires_grad {
                    let mut dw = vec![0.0; c_out * c_in];
                    gemm(c_out, n, c_in, g, 1, c_out, x.data(), c_in, 1, &mut dw, false);
                    self.accumulate(grads, *weight, Tensor::new(w.shape(), dw)?);
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; n * c_in];
                    gemm(n, c_out, c_in, g, c_out, 1, w.data(), c_in, 1, &mut dx, false);
                    self.accumulate(grads, *input, Tensor::new(x.shape(), dx)?);
                }
            }
            Op::Contract { left, right, scale } => {
                let l = self.value(*left);
                let r = self.value(*right);
                let (&[b, k, f], m) = (l.shape(), r.shape()[1]) else {
                    unreachable!()
                };
                if self.nodes[left.0].requires_grad {
                    let mut dl = vec![0.0; b * k * f];
                    for i in 0..b {
                        gemm(
                            k,
                            m,
                            f,
                            &g[i * k * m..],
                            m,
                            1,
                            &r.data()[i * m * f..],
                            f,
                            1,
                            &mut dl[i * k * f..(i + 1) * k * f],
                            false,
                        );
                    }
                    dl.iter_mut().for_each(|v| *v *= scale);
                    self.accumulate(grads, *left, Tensor::new(l.shape(), dl)?);
                }
                if self.nodes[right.0].requires_grad {
                    let mut dr = vec![0.0; b * m * f];
                    for i in 0..b {
                        gemm(
                            m,
                            k,
                            f,
                            &g[i * k * m..],
                            1,
                            m,
                            &l.data()[i * k * f..],
                            f,
                            1,
                            &mut dr[i * m * f..(i + 1) * m * f],
                            false,
                        );
                    }
                    dr.iter_mut().for_each(|v| *v *= scale);
                    self.accumulate(grads, *right, Tensor::new(r.shape(), dr)?);
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let shape = self.value(*logits).shape();
                let c = *shape.last().unwrap();
                let rows = targets.len();
                let coef = g[0] / rows as f64;
                let mut dx = probs.clone();
                for (row, &t) in dx.chunks_mut(c).zip(targets) {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= coef);
                }
                self.accumulate(grads, *logits, Tensor::new(shape, dx)?);
            }
            Op::Mean(input) => {
                let x = self.value(*input);
                let v = g[0] / x.len() as f64;
                self.accumulate(grads, *input, Tensor::full(x.shape(), v));
            }
            Op::Sum(input) => {
                let x = self.value(*input);
                self.accumulate(grads, *input, Tensor::full(x.shape(), g[0]));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::Scale(input, factor) => {
                let mut dx = up.clone();
                dx.data_mut().iter_mut().for_each(|v| *v *= factor);
                self.accumulate(grads, *input, dx);
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape();
                self.accumulate(grads, *input, up.clone().reshape(shape)?);
            }
        }
        Ok(())
    }
}

/// Compares the tape gradient of a scalar function against central
/// finite differences.
///
/// `f` receives a fresh graph and the node holding `x` and must return the
/// scalar loss node. The result is the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.param(t.clone());
        let loss = f(&mut g, id)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let id = g.param(x.clone());
    let loss = f(&mut g, id)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .get(id)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

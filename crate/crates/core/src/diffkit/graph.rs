//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep. Every node
//! keeps its value; gradients are allocated lazily and stay readable after
//! the sweep.

use rand::Rng;

use super::kernels::{self, BnCache, Dims3};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::huwindow::{self, BranchSet, CutVector};
use crate::scalar::{sigmoid, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probability clamp applied before the logarithms of the BCE loss.
pub const BCE_CLAMP: f64 = 1e-7;
pub const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv3d { x: NodeId, w: NodeId, b: NodeId },
    MaxPool3d { x: NodeId, argmax: Vec<u32> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: BnCache<T> },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Dropout { x: NodeId, mask: Vec<T> },
    Reshape { x: NodeId },
    Concat { parts: Vec<NodeId> },
    SelectChannel { x: NodeId, channel: usize },
    Window { x: NodeId, theta: NodeId, set: BranchSet<T> },
    Bce { p: NodeId, target: Vec<T> },
    SumSquares { x: NodeId },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::MaxPool3d { .. } => "maxpool3d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Dense { .. } => "dense",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Dropout { .. } => "dropout",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::SelectChannel { .. } => "select_channel",
            Op::Window { .. } => "hu_window",
            Op::Bce { .. } => "bce",
            Op::SumSquares { .. } => "sum_squares",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    label: Option<String>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn spatial(shape: &[usize]) -> Result<(usize, usize, Dims3)> {
    match shape {
        &[n, c, d, h, w] => Ok((n, c, Dims3 { d, h, w })),
        other => Err(Error::Shape(format!("expected [N, C, D, H, W], got {other:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            label: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value: t,
            grad: None,
            requires_grad: false,
            label: None,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        let id = self.input(t);
        self.nodes[id.0].requires_grad = true;
        id
    }

    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = Some(label.into());
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.nodes[id.0].grad.take()
    }

    /// Batch mean and variance recorded by a training-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { cache, .. } if cache.train => Some((&cache.batch_mean, &cache.batch_var)),
            _ => None,
        }
    }

    /// Description of the first node whose value holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.all_finite()).then(|| match &n.label {
                Some(l) => format!("{l} (node {i}, {})", n.op.name()),
                None => format!("node {i} ({})", n.op.name()),
            })
        })
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, cin, s) = spatial(self.value(x).shape())?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 5 || ws[1] != cin || ws[2..] != [3, 3, 3] {
            return Err(Error::Shape(format!("conv kernel {ws:?} does not fit {cin} input channels")));
        }
        let cout = ws[0];
        if self.value(b).len() != cout {
            return Err(Error::Shape(format!("conv bias needs {cout} entries")));
        }
        let y = kernels::conv3d_forward(
            self.value(x).data(),
            n,
            cin,
            s,
            self.value(w).data(),
            self.value(b).data(),
            cout,
        );
        let t = Tensor::new(vec![n, cout, s.d, s.h, s.w], y)?;
        Ok(self.push(t, Op::Conv3d { x, w, b }, &[x, w, b]))
    }

    pub fn maxpool3d(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, s) = spatial(self.value(x).shape())?;
        if s.d % 2 != 0 || s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::Shape(format!("max pooling needs even extents, got {s:?}")));
        }
        let (y, argmax) = kernels::maxpool_forward(self.value(x).data(), n * c, s);
        let t = Tensor::new(vec![n, c, s.d / 2, s.h / 2, s.w / 2], y)?;
        Ok(self.push(t, Op::MaxPool3d { x, argmax }, &[x]))
    }

    /// Batch normalization over every axis but the channel axis (axis 1).
    /// `running = None` normalizes with batch statistics.
    pub fn batchnorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, running: Option<(&[T], &[T])>) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("batch norm needs [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!("batch norm affine parameters need {c} entries")));
        }
        if running.is_none() && n * s < 2 {
            return Err(Error::Shape("training-mode batch norm needs more than one value per channel".into()));
        }
        let (y, cache) = kernels::batchnorm_forward(
            self.value(x).data(),
            n,
            c,
            s,
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
            T::lit(BN_EPS),
        );
        let t = Tensor::new(shape, y)?;
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, cache }, &[x, gamma, beta]))
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).len() != ws[0] {
            return Err(Error::Shape(format!("dense: input {xs:?} vs weight {ws:?}")));
        }
        let y = kernels::dense_forward(
            self.value(x).data(),
            xs[0],
            xs[1],
            self.value(w).data(),
            self.value(b).data(),
            ws[0],
        );
        let t = Tensor::new(vec![xs[0], ws[0]], y)?;
        Ok(self.push(t, Op::Dense { x, w, b }, &[x, w, b]))
    }

    fn map(&mut self, x: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape")
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.map(x, |a| a.max(T::zero()));
        self.push(t, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid { x }, &[x])
    }

    /// Inverted dropout: zeroes each value with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut impl Rng) -> NodeId {
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let v = self.value(x);
        let mask: Vec<T> = (0..v.len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Dropout { x, mask }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// `[N, ...] → [N, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let n = v.batch();
        let f = v.len() / n.max(1);
        self.reshape(x, vec![n, f])
    }

    /// Concatenates `[N, F_j]` matrices along the feature axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = self.value(parts[0]).batch();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != n {
                return Err(Error::Shape(format!("concat needs [{n}, F] inputs, got {s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![n, total], data)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// `[N, C, ...] → [N, 1, ...]` keeping one channel.
    pub fn select_channel(&mut self, x: NodeId, channel: usize) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || channel >= shape[1] {
            return Err(Error::Shape(format!("channel {channel} out of range for {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * s);
        for i in 0..n {
            data.extend_from_slice(&src[(i * c + channel) * s..(i * c + channel + 1) * s]);
        }
        let mut out_shape = shape;
        out_shape[1] = 1;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::SelectChannel { x, channel }, &[x]))
    }

    /// Intensity-window branching. `x: [N, 1, ...]`, `theta: [n_windows]`;
    /// output `[N, K, ...]` with one channel per branch.
    pub fn hu_window(&mut self, x: NodeId, theta: NodeId, tau: T, include_original: bool) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || shape[1] != 1 {
            return Err(Error::Shape(format!("window layer needs a single input channel, got {shape:?}")));
        }
        let cv = CutVector::from_theta(self.value(theta).data().to_vec(), tau)?;
        let set = huwindow::branch_forward(self.value(x).data(), &cv, include_original);
        let n = shape[0];
        let s: usize = shape[2..].iter().product();
        let k = set.len();
        let mut data = Vec::with_capacity(n * k * s);
        for i in 0..n {
            for b in &set.branches {
                data.extend_from_slice(&b[i * s..(i + 1) * s]);
            }
        }
        let mut out_shape = shape;
        out_shape[1] = k;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Window { x, theta, set }, &[x, theta]))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    pub fn bce(&mut self, p: NodeId, target: &[T]) -> Result<NodeId> {
        let pv = self.value(p);
        if pv.len() != target.len() {
            return Err(Error::Shape(format!(
                "bce: {} predictions for {} targets",
                pv.len(),
                target.len()
            )));
        }
        let loss = bce_value(pv.data(), target);
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::Bce {
                p,
                target: target.to_vec(),
            },
            &[p],
        ))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().map(|&a| a * a).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x }, &[x])
    }

    pub fn backward(&mut self, root: NodeId) {
        let seed = Tensor::full(self.value(root).shape().to_vec(), T::one());
        self.backward_with(root, seed);
    }

    /// Reverse sweep from `root` seeded with `∂L/∂root = seed`. Gradients of
    /// earlier sweeps are cleared first.
    pub fn backward_with(&mut self, root: NodeId, seed: Tensor<T>) {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape must match root");
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &g);
            self.nodes[i].grad = Some(g);
            for (p, t) in contributions {
                let node = &mut self.nodes[p.0];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&t),
                    None => node.grad = Some(t),
                }
            }
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn like(&self, id: NodeId, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.value(id).shape().to_vec(), data).expect("gradient matches value shape")
    }

    /// Local vector-Jacobian products of node `i` for each parent that needs one.
    fn vjp(&self, i: usize, g: &Tensor<T>) -> Vec<(NodeId, Tensor<T>)> {
        let gd = g.data();
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv3d { x, w, b } => {
                let (n, cin, s) = spatial(self.value(x).shape()).expect("checked in forward");
                let cout = self.value(w).shape()[0];
                let grads = kernels::conv3d_backward(
                    self.value(x).data(),
                    n,
                    cin,
                    s,
                    self.value(w).data(),
                    cout,
                    gd,
                    self.wants(x),
                );
                if let Some(gx) = grads.gx {
                    out.push((x, self.like(x, gx)));
                }
                out.push((w, self.like(w, grads.gw)));
                out.push((b, self.like(b, grads.gb)));
            }
            Op::MaxPool3d { x, argmax } => {
                let gx = kernels::maxpool_backward(gd, argmax, self.value(*x).len());
                out.push((*x, self.like(*x, gx)));
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                let shape = self.value(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let (gx, gg, gb) = kernels::batchnorm_backward(gd, n, c, s, self.value(*gamma).data(), cache);
                out.push((*x, self.like(*x, gx)));
                out.push((*gamma, self.like(*gamma, gg)));
                out.push((*beta, self.like(*beta, gb)));
            }
            &Op::Dense { x, w, b } => {
                let xs = self.value(x).shape();
                let fout = self.value(w).shape()[0];
                let (gx, gw, gb) =
                    kernels::dense_backward(self.value(x).data(), xs[0], xs[1], self.value(w).data(), fout, gd);
                out.push((x, self.like(x, gx)));
                out.push((w, self.like(w, gw)));
                out.push((b, self.like(b, gb)));
            }
            &Op::Relu { x } => {
                let gx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((x, self.like(x, gx)));
            }
            &Op::Sigmoid { x } => {
                let y = self.nodes[i].value.data();
                let gx = y.iter().zip(gd).map(|(&s, &g)| g * s * (T::one() - s)).collect();
                out.push((x, self.like(x, gx)));
            }
            Op::Dropout { x, mask } => {
                let gx = mask.iter().zip(gd).map(|(&m, &g)| m * g).collect();
                out.push((*x, self.like(*x, gx)));
            }
            &Op::Reshape { x } => out.push((x, self.like(x, gd.to_vec()))),
            Op::Concat { parts } => {
                let n = g.batch();
                let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).shape()[1]).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            gp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, self.like(p, gp)));
                    }
                    offset += w;
                }
            }
            &Op::SelectChannel { x, channel } => {
                let shape = self.value(x).shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let mut gx = vec![T::zero(); n * c * s];
                for r in 0..n {
                    gx[(r * c + channel) * s..(r * c + channel + 1) * s].copy_from_slice(&gd[r * s..(r + 1) * s]);
                }
                out.push((x, self.like(x, gx)));
            }
            Op::Window { x, theta, set } => {
                let shape = self.value(*x).shape();
                let n = shape[0];
                let s: usize = shape[2..].iter().product();
                let k = set.len();
                let upstream: Vec<Vec<T>> = (0..k)
                    .map(|b| (0..n).flat_map(|r| gd[(r * k + b) * s..(r * k + b + 1) * s].iter().copied()).collect())
                    .collect();
                let refs: Vec<&[T]> = upstream.iter().map(|u| u.as_slice()).collect();
                let (gx, gt) = huwindow::branch_backward(self.value(*x).data(), self.value(*theta).data(), set, &refs);
                if self.wants(*x) {
                    out.push((*x, self.like(*x, gx)));
                }
                out.push((*theta, self.like(*theta, gt)));
            }
            Op::Bce { p, target } => {
                let gp = bce_grad(self.value(*p).data(), target, g.item());
                out.push((*p, self.like(*p, gp)));
            }
            &Op::SumSquares { x } => {
                let scale = T::lit(2.0) * g.item();
                let gx = self.value(x).data().iter().map(|&v| v * scale).collect();
                out.push((x, self.like(x, gx)));
            }
        }
        out.retain(|(p, _)| self.wants(*p));
        out
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    p.max(T::lit(BCE_CLAMP)).min(T::one() - T::lit(BCE_CLAMP))
}

/// `−(1/N) Σ [y log p + (1−y) log(1−p)]` with `p` clamped to `[1e-7, 1−1e-7]`.
pub fn bce_value<T: Scalar>(p: &[T], y: &[T]) -> T {
    let n = T::lit(p.len().max(1) as f64);
    let total: T = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            y * p.ln() + (T::one() - y) * (T::one() - p).ln()
        })
        .sum();
    -total / n
}

fn bce_grad<T: Scalar>(p: &[T], y: &[T], upstream: T) -> Vec<T> {
    let n = T::lit(p.len().max(1) as f64);
    let lo = T::lit(BCE_CLAMP);
    let hi = T::one() - lo;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            if p < lo || p > hi {
                // flat outside the clamp
                T::zero()
            } else {
                upstream * (-(y / p) + (T::one() - y) / (T::one() - p)) / n
            }
        })
        .collect()
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in execution order. Node ids are therefore a
//! topological order and backward is a single reverse sweep. Nodes never
//! mutate after creation.

pub mod conv;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::warp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    },
    AddChannelBias {
        input: NodeId,
        bias: NodeId,
    },
    MatMul {
        lhs: NodeId,
        rhs: NodeId,
    },
    AddRowBias {
        input: NodeId,
        bias: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    LeakyRelu(NodeId, T),
    Tanh(NodeId),
    Softplus(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    ResampleNearest(NodeId),
    Reshape(NodeId),
    Warp {
        image: NodeId,
        flow: NodeId,
    },
    Sum(NodeId),
    Mean(NodeId),
    RowNorm(NodeId),
    Gram(NodeId),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Confined to one thread while recording and differentiating.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `id`, or `None` when no path from the loss reaches it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, zero-filled when unreachable from the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

fn finite<T: Real>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        Err(Error::shape(op, a.shape(), b.shape()))
    } else {
        Ok(())
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn nearest_index(dst: usize, src_extent: usize, dst_extent: usize) -> usize {
    (((2 * dst + 1) * src_extent) / (2 * dst_extent)).min(src_extent - 1)
}

/// Nearest-neighbour resampling of the two trailing axes.
pub fn resample_nearest<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid(format!(
            "resample_nearest: target extent {out_h}x{out_w} must be >= 1"
        )));
    }
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::Invalid(format!("resample_nearest: shape {shape:?} has < 2 axes")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = input.len() / (h * w).max(1);
    let mut out_shape = shape.to_vec();
    let rank = out_shape.len();
    out_shape[rank - 2] = out_h;
    out_shape[rank - 1] = out_w;
    let rows: Vec<usize> = (0..out_h).map(|y| nearest_index(y, h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|x| nearest_index(x, w, out_w)).collect();
    let mut data = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        for &y in &rows {
            data.extend(cols.iter().map(|&x| src[y * w + x]));
        }
    }
    Tensor::new(&out_shape, data)
}

fn resample_nearest_backward<T: Real>(grad: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let rank = in_shape.len();
    let (h, w) = (in_shape[rank - 2], in_shape[rank - 1]);
    let gs = grad.shape();
    let (oh, ow) = (gs[rank - 2], gs[rank - 1]);
    let mut out = Tensor::zeros(in_shape);
    let planes = out.len() / (h * w).max(1);
    for p in 0..planes {
        for y in 0..oh {
            let sy = nearest_index(y, h, oh);
            for x in 0..ow {
                let sx = nearest_index(x, w, ow);
                let d = &mut out.data_mut()[p * h * w + sy * w + sx];
                *d = *d + grad.data()[(p * oh + y) * ow + x];
            }
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Per-sample Gram matrices `F Fᵀ / (c·h·w)` of a `[n, c, h, w]` tensor.
pub fn gram<T: Real>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = features.dims4("gram")?;
    let p = h * w;
    let norm = T::lit((c * p) as f64);
    let mut out = vec![T::zero(); n * c * c];
    for s in 0..n {
        let f = features.batch_item(s);
        let g = &mut out[s * c * c..(s + 1) * c * c];
        T::gemm(c, p, c, f, (p as isize, 1), f, (1, p as isize), T::zero(), g, c as isize);
        g.iter_mut().for_each(|v| *v = *v / norm);
    }
    Tensor::new(&[n, c, c], out)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let value = finite(name, value)?;
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// A leaf that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by backward.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Copies a node's value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let out = conv::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        self.record(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        )
    }

    /// Adds `bias[c]` to every pixel of channel `c` of a `[n, c, h, w]` tensor.
    pub fn add_channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (_, c, h, w) = x.dims4("add_channel_bias")?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(Error::shape("add_channel_bias", &[c], b.shape()));
        }
        let plane = h * w;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b.data()[(i / plane) % c])
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        self.record("add_channel_bias", out, Op::AddChannelBias { input, bias }, &[input, bias])
    }

    /// `[n, k] · [k, m] → [n, m]`.
    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let (&[n, k], &[k2, m]) = (a.shape(), b.shape()) else {
            return Err(Error::Invalid(format!(
                "matmul: expected 2-d operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        };
        if k != k2 {
            return Err(Error::shape("matmul", &[k, m], b.shape()));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, a.data(), (k as isize, 1), b.data(), (m as isize, 1), T::zero(), &mut out, m as isize);
        let out = Tensor::new(&[n, m], out)?;
        self.record("matmul", out, Op::MatMul { lhs, rhs }, &[lhs, rhs])
    }

    /// Adds `bias[j]` to column `j` of an `[n, m]` tensor.
    pub fn add_row_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let m = *x.shape().last().unwrap_or(&0);
        let b = self.value(bias);
        if x.shape().len() != 2 || b.len() != m {
            return Err(Error::shape("add_row_bias", &[m], b.shape()));
        }
        let data = x.data().iter().enumerate().map(|(i, &v)| v + b.data()[i % m]).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.record("add_row_bias", out, Op::AddRowBias { input, bias }, &[input, bias])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        self.record("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        self.record("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        let out = self.value(a).map(|x| x * s);
        self.record("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> Result<NodeId> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.record("leaky_relu", out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| x.tanh());
        self.record("tanh", out, Op::Tanh(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self
            .value(a)
            .map(|x| x.max(T::zero()) + (-x.abs()).exp().ln_1p());
        self.record("softplus", out, Op::Softplus(a), &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Invalid(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let span = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * span..(o + 1) * span]);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        self.record(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn resample_nearest(&mut self, a: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let out = resample_nearest(self.value(a), out_h, out_w)?;
        self.record("resample_nearest", out, Op::ResampleNearest(a), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshape(shape)?;
        self.record("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn bilinear_warp(&mut self, image: NodeId, flow: NodeId) -> Result<NodeId> {
        let out = warp::warp_forward(self.value(image), self.value(flow))?;
        self.record("bilinear_warp", out, Op::Warp { image, flow }, &[image, flow])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().copied().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Invalid("mean of an empty tensor".into()));
        }
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.record("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Euclidean norm of each leading-axis slice: `[n, ...] → [n]`.
    pub fn row_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let n = *v.shape().first().ok_or_else(|| Error::Invalid("row_norm of a scalar".into()))?;
        let norms = (0..n)
            .map(|i| v.batch_item(i).iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let out = Tensor::new(&[n], norms)?;
        self.record("row_norm", out, Op::RowNorm(a), &[a])
    }

    pub fn gram(&mut self, a: NodeId) -> Result<NodeId> {
        let out = gram(self.value(a))?;
        self.record("gram", out, Op::Gram(a), &[a])
    }

    /// Reverse sweep from a one-element loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Backward(format!("unknown node {}", loss.0)))?;
        if node.value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must have exactly one element, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward(
                "loss is detached from every differentiable input".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(node.value.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, delta: Tensor<T>| {
            let slot = &mut grads[id.0];
            match slot {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e = *e + *d;
                    }
                }
                None => *slot = Some(delta),
            }
        };
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (gi, gk) = conv::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    stride,
                    padding,
                    g,
                    wants(input),
                    wants(kernel),
                )?;
                if let Some(gi) = gi {
                    acc(input, gi);
                }
                if let Some(gk) = gk {
                    acc(kernel, gk);
                }
            }
            &Op::AddChannelBias { input, bias } => {
                if wants(bias) {
                    let (_, c, h, w) = g.dims4("add_channel_bias")?;
                    let plane = h * w;
                    let mut gb = vec![T::zero(); c];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        gb[i % c] = gb[i % c] + chunk.iter().copied().sum::<T>();
                    }
                    acc(bias, Tensor::new(self.value(bias).shape(), gb)?);
                }
                if wants(input) {
                    acc(input, g.clone());
                }
            }
            &Op::MatMul { lhs, rhs } => {
                let (a, b) = (self.value(lhs), self.value(rhs));
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if wants(lhs) {
                    let mut ga = vec![T::zero(); n * k];
                    T::gemm(n, m, k, g.data(), (m as isize, 1), b.data(), (1, m as isize), T::zero(), &mut ga, k as isize);
                    acc(lhs, Tensor::new(&[n, k], ga)?);
                }
                if wants(rhs) {
                    let mut gb = vec![T::zero(); k * m];
                    T::gemm(k, n, m, a.data(), (1, k as isize), g.data(), (m as isize, 1), T::zero(), &mut gb, m as isize);
                    acc(rhs, Tensor::new(&[k, m], gb)?);
                }
            }
            &Op::AddRowBias { input, bias } => {
                if wants(bias) {
                    let m = self.value(bias).len();
                    let mut gb = vec![T::zero(); m];
                    for (i, &v) in g.data().iter().enumerate() {
                        gb[i % m] = gb[i % m] + v;
                    }
                    acc(bias, Tensor::new(self.value(bias).shape(), gb)?);
                }
                if wants(input) {
                    acc(input, g.clone());
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    acc(a, g.clone());
                }
                if wants(b) {
                    acc(b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    acc(a, g.clone());
                }
                if wants(b) {
                    acc(b, g.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, zip(g, self.value(b), |x, y| x * y));
                }
                if wants(b) {
                    acc(b, zip(g, self.value(a), |x, y| x * y));
                }
            }
            &Op::Scale(a, s) => acc(a, g.map(|x| x * s)),
            &Op::LeakyRelu(a, slope) => {
                acc(a, zip(g, self.value(a), |gv, x| if x > T::zero() { gv } else { gv * slope }));
            }
            &Op::Tanh(a) => acc(a, zip(g, &node.value, |gv, y| gv * (T::one() - y * y))),
            &Op::Softplus(a) => acc(a, zip(g, self.value(a), |gv, x| gv * sigmoid(x))),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    let span = shape[*axis] * inner;
                    if wants(p) {
                        let mut part = Vec::with_capacity(outer * span);
                        for o in 0..outer {
                            let start = o * total * inner + offset;
                            part.extend_from_slice(&g.data()[start..start + span]);
                        }
                        acc(p, Tensor::new(shape, part)?);
                    }
                    offset += span;
                }
            }
            &Op::ResampleNearest(a) => acc(a, resample_nearest_backward(g, self.value(a).shape())),
            &Op::Reshape(a) => acc(a, g.clone().reshape(self.value(a).shape())?),
            &Op::Warp { image, flow } => {
                let (gi, gf) = warp::warp_backward(self.value(image), self.value(flow), g)?;
                if wants(image) {
                    acc(image, gi);
                }
                if wants(flow) {
                    acc(flow, gf);
                }
            }
            &Op::Sum(a) => {
                let gv = g.item()?;
                acc(a, Tensor::full(self.value(a).shape(), gv));
            }
            &Op::Mean(a) => {
                let v = self.value(a);
                let gv = g.item()? / T::lit(v.len() as f64);
                acc(a, Tensor::full(v.shape(), gv));
            }
            &Op::RowNorm(a) => {
                let x = self.value(a);
                let n = x.shape()[0];
                let per = x.len() / n.max(1);
                let mut out = vec![T::zero(); x.len()];
                for i in 0..n {
                    let norm = node.value.data()[i];
                    // subgradient 0 at the origin
                    if norm > T::zero() {
                        let k = g.data()[i] / norm;
                        for (o, &v) in out[i * per..(i + 1) * per].iter_mut().zip(x.batch_item(i)) {
                            *o = v * k;
                        }
                    }
                }
                acc(a, Tensor::new(x.shape(), out)?);
            }
            &Op::Gram(a) => {
                let f = self.value(a);
                let (n, c, h, w) = f.dims4("gram")?;
                let p = h * w;
                let norm = T::lit((c * p) as f64);
                let mut out = vec![T::zero(); f.len()];
                for s in 0..n {
                    let gs = &g.data()[s * c * c..(s + 1) * c * c];
                    let sym: Vec<T> = (0..c * c)
                        .map(|i| (gs[i] + gs[(i % c) * c + i / c]) / norm)
                        .collect();
                    T::gemm(
                        c,
                        c,
                        p,
                        &sym,
                        (c as isize, 1),
                        f.batch_item(s),
                        (p as isize, 1),
                        T::zero(),
                        &mut out[s * c * p..(s + 1) * c * p],
                        p as isize,
                    );
                }
                acc(a, Tensor::new(f.shape(), out)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[4], 1.5));
        let y = g.param(Tensor::full(&[2], 2.0));
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.wrt(x).data(), &[0.0; 4]);
    }

    #[test]
    fn loss_without_parameters_is_rejected() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[3], 1.0));
        let s = g.sum(c).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[3], 1.0));
        assert!(matches!(g.backward(x), Err(Error::Backward(_))));
    }

    #[test]
    fn identity_one_by_one_conv() {
        let mut g = Graph::<f32>::new();
        let img = Tensor::from_fn(&[2, 1, 5, 4], |i| i as f32 * 0.25 - 3.0);
        let x = g.constant(img.clone());
        let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), &img);
    }

    #[test]
    fn all_ones_sliding_window() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[9.0; 4]);
    }

    #[test]
    fn strided_padded_conv_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let k = g.constant(Tensor::zeros(&[16, 3, 3, 3]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 16, 4, 4]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let k = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let msg = g.conv2d(x, k, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 8, 8]") && msg.contains("[4, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn concat_shapes_and_identity() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5, 4, 4]);
        let single = g.concat(&[b], 1).unwrap();
        assert_eq!(g.value(single), g.value(b));
        let bad = g.constant(Tensor::zeros(&[1, 3, 4, 5]));
        assert!(g.concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn concat_routes_ones_back() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = g.param(Tensor::from_fn(&[2, 1, 3], |i| -(i as f64)));
        let c = g.concat(&[a, b], 1).unwrap();
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(a).data().iter().all(|&v| v == 1.0));
        assert!(grads.wrt(b).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn nearest_resampling() {
        let checker = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let up = resample_nearest(&checker, 4, 4).unwrap();
        #[rustfmt::skip]
        let want = [1.0, 1.0, 0.0, 0.0,
                    1.0, 1.0, 0.0, 0.0,
                    0.0, 0.0, 1.0, 1.0,
                    0.0, 0.0, 1.0, 1.0];
        assert_eq!(up.data(), &want);
        assert_eq!(resample_nearest(&checker, 2, 2).unwrap(), checker);
        let big = Tensor::<f32>::zeros(&[1, 2, 64, 64]);
        assert_eq!(resample_nearest(&big, 8, 8).unwrap().shape(), &[1, 2, 8, 8]);
        assert!(resample_nearest(&big, 0, 8).is_err());
    }

    #[test]
    fn nan_in_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2], f32::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn gram_of_constant_map() {
        let f = Tensor::<f64>::full(&[1, 1, 3, 5], 1.0);
        assert_eq!(gram(&f).unwrap().data(), &[1.0]);
    }

    #[test]
    fn row_norm_has_zero_subgradient_at_origin() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let n = g.row_norm(x).unwrap();
        let loss = g.sum(n).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0; 6]);
    }
}

//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation is evaluated as it is recorded, so node values are always
//! available. [`Graph::grad`] records the backward pass as ordinary graph
//! nodes; the resulting gradient nodes can themselves be differentiated, which
//! is what the R1 penalty (a loss on an input gradient) needs.
//!
//! [`Graph::evaluate`] rebinds named inputs and replays every node in
//! recording order, gradient nodes included.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel for "no source element" in gather maps.
const NONE: u32 = u32::MAX;

/// Per-sample integer flip/translation applied to `[N, C, H, W]` images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PixelShift {
    pub flip: bool,
    pub dx: i32,
    pub dy: i32,
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Square(NodeId),
    Sum(NodeId),
    BroadcastScalar(NodeId, Vec<usize>),
    SumTrailing(NodeId, usize),
    ExpandTrailing(NodeId, Vec<usize>),
    SumLeading(NodeId),
    BroadcastLeading(NodeId, usize),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvInputGrad {
        g: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        h: usize,
        wd: usize,
    },
    ConvWeightGrad {
        x: NodeId,
        g: NodeId,
        stride: usize,
        pad: usize,
        kh: usize,
        kw: usize,
    },
    LeakyRelu(NodeId, f64),
    LeakyReluGrad {
        g: NodeId,
        x: NodeId,
        slope: f64,
    },
    Sigmoid(NodeId),
    Softplus(NodeId),
    Upsample2(NodeId),
    SumPool2(NodeId),
    Concat(NodeId, NodeId),
    Slice {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Pad {
        x: NodeId,
        before: usize,
        after: usize,
    },
    Gather {
        x: NodeId,
        map: Arc<Vec<u32>>,
        shape: Vec<usize>,
    },
    Scatter {
        x: NodeId,
        map: Arc<Vec<u32>>,
        shape: Vec<usize>,
    },
    SetSqDist {
        x: NodeId,
        centroids: Arc<Tensor>,
        spread: Arc<Vec<f64>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::SumTrailing(..) => "sum_trailing",
            Op::ExpandTrailing(..) => "expand_trailing",
            Op::SumLeading(..) => "sum_leading",
            Op::BroadcastLeading(..) => "broadcast_leading",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::LeakyReluGrad { .. } => "leaky_relu_grad",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Upsample2(..) => "upsample2",
            Op::SumPool2(..) => "sumpool2",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::SetSqDist { .. } => "set_sq_dist",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Concat(a, b) => {
                vec![a, b]
            }
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::ConvInputGrad { g, w, .. } => vec![g, w],
            Op::ConvWeightGrad { x, g, .. } => vec![x, g],
            Op::LeakyReluGrad { g, x, .. } => vec![g, x],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::SumTrailing(a, _)
            | Op::SumLeading(a)
            | Op::BroadcastLeading(a, _)
            | Op::Transpose(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Upsample2(a)
            | Op::SumPool2(a) => vec![a],
            Op::BroadcastScalar(a, _)
            | Op::ExpandTrailing(a, _)
            | Op::Reshape(a, _) => vec![a],
            Op::Slice { x, .. }
            | Op::Pad { x, .. }
            | Op::Gather { x, .. }
            | Op::Scatter { x, .. }
            | Op::SetSqDist { x, .. } => vec![x],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A recorded computation. Distinct graphs share nothing and may live on
/// different threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
}

fn mismatch(node: String, expected: &[usize], found: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        node,
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64, NumericsError> {
        self.nodes[id.0].value.item()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Named, differentiable leaf whose value can be rebound by [`Graph::evaluate`].
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<NodeId, NumericsError> {
        if self.inputs.contains_key(name) {
            return Err(NumericsError::DuplicateInput(name.to_string()));
        }
        if !value.is_finite() {
            return Err(NumericsError::NonFinite {
                node: format!("input `{name}`"),
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input(name.to_string()),
            value,
            requires_grad: true,
        });
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes.get(id.0)?.op {
            Op::Input(name) => Some(name),
            _ => None,
        }
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        id
    }

    fn push(&mut self, op: Op) -> Result<NodeId, NumericsError> {
        let idx = self.nodes.len();
        let value = self.compute(idx, &op)?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(idx))
    }

    fn label(idx: usize, op: &Op) -> String {
        match op {
            Op::Input(name) => format!("node #{idx} (input `{name}`)"),
            _ => format!("node #{idx} ({})", op.name()),
        }
    }

    fn compute(&self, idx: usize, op: &Op) -> Result<Tensor, NumericsError> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        let label = || Self::label(idx, op);
        let same = |a: &Tensor, b: &Tensor| -> Result<(), NumericsError> {
            if a.shape() == b.shape() {
                Ok(())
            } else {
                Err(mismatch(label(), a.shape(), b.shape()))
            }
        };
        let out = match op {
            Op::Input(_) | Op::Constant => unreachable!("leaves are never recomputed"),
            Op::Add(a, b) => {
                same(v(*a), v(*b))?;
                v(*a).zip_map(v(*b), |x, y| x + y)?
            }
            Op::Sub(a, b) => {
                same(v(*a), v(*b))?;
                v(*a).zip_map(v(*b), |x, y| x - y)?
            }
            Op::Mul(a, b) => {
                same(v(*a), v(*b))?;
                v(*a).zip_map(v(*b), |x, y| x * y)?
            }
            Op::Scale(a, c) => v(*a).map(|x| x * c),
            Op::AddScalar(a, c) => v(*a).map(|x| x + c),
            Op::Square(a) => v(*a).map(|x| x * x),
            Op::Sum(a) => Tensor::scalar(v(*a).sum()),
            Op::BroadcastScalar(a, shape) => {
                let s = v(*a).item().map_err(|_| mismatch(label(), &[1], v(*a).shape()))?;
                Tensor::full(shape, s)
            }
            Op::SumTrailing(a, keep) => {
                let t = v(*a);
                if *keep == 0 || *keep >= t.ndim() {
                    return Err(NumericsError::InvalidArgument(format!(
                        "{}: cannot keep {keep} of {} axes",
                        label(),
                        t.ndim()
                    )));
                }
                let outer: usize = t.shape()[..*keep].iter().product();
                let inner = t.numel() / outer;
                let data = t.data().chunks(inner).map(|c| c.iter().sum()).collect();
                Tensor::from_parts(t.shape()[..*keep].to_vec(), data)
            }
            Op::ExpandTrailing(a, trailing) => {
                let t = v(*a);
                let inner: usize = trailing.iter().product();
                if inner == 0 {
                    return Err(NumericsError::InvalidShape(trailing.clone()));
                }
                let mut shape = t.shape().to_vec();
                shape.extend_from_slice(trailing);
                let mut data = Vec::with_capacity(t.numel() * inner);
                for &x in t.data() {
                    data.extend(std::iter::repeat_n(x, inner));
                }
                Tensor::from_parts(shape, data)
            }
            Op::SumLeading(a) => {
                let t = v(*a);
                if t.ndim() < 2 {
                    return Err(mismatch(label(), &[0, 0], t.shape()));
                }
                let inner = t.numel() / t.shape()[0];
                let mut data = vec![0.0; inner];
                for chunk in t.data().chunks(inner) {
                    for (d, x) in data.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                Tensor::from_parts(t.shape()[1..].to_vec(), data)
            }
            Op::BroadcastLeading(a, n) => {
                let t = v(*a);
                let mut shape = vec![*n];
                shape.extend_from_slice(t.shape());
                let mut data = Vec::with_capacity(t.numel() * n);
                for _ in 0..*n {
                    data.extend_from_slice(t.data());
                }
                Tensor::from_parts(shape, data)
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
                    return Err(mismatch(label(), ta.shape(), tb.shape()));
                }
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                Tensor::from_parts(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))
            }
            Op::Transpose(a) => {
                let t = v(*a);
                if t.ndim() != 2 {
                    return Err(mismatch(label(), &[0, 0], t.shape()));
                }
                let (m, n) = (t.shape()[0], t.shape()[1]);
                Tensor::from_parts(vec![n, m], kernels::transpose(t.data(), m, n))
            }
            Op::Reshape(a, shape) => {
                let t = v(*a);
                if shape.iter().product::<usize>() != t.numel() {
                    return Err(mismatch(label(), shape, t.shape()));
                }
                Tensor::from_parts(shape.clone(), t.data().to_vec())
            }
            Op::Conv2d { x, w, stride, pad } => {
                let geom = self.conv_geom(label(), v(*x).shape(), v(*w).shape(), *stride, *pad)?;
                Tensor::from_parts(
                    vec![geom.n, geom.cout, geom.oh, geom.ow],
                    kernels::conv2d(v(*x).data(), v(*w).data(), &geom),
                )
            }
            Op::ConvInputGrad {
                g,
                w,
                stride,
                pad,
                h,
                wd,
            } => {
                let (tg, tw) = (v(*g), v(*w));
                if tg.ndim() != 4 || tw.ndim() != 4 {
                    return Err(mismatch(label(), &[0, 0, 0, 0], tg.shape()));
                }
                let xs = [tg.shape()[0], tw.shape()[1], *h, *wd];
                let geom = self.conv_geom(label(), &xs, tw.shape(), *stride, *pad)?;
                let expected = [geom.n, geom.cout, geom.oh, geom.ow];
                if tg.shape() != expected {
                    return Err(mismatch(label(), &expected, tg.shape()));
                }
                Tensor::from_parts(xs.to_vec(), kernels::conv2d_input_grad(tg.data(), tw.data(), &geom))
            }
            Op::ConvWeightGrad {
                x,
                g,
                stride,
                pad,
                kh,
                kw,
            } => {
                let (tx, tg) = (v(*x), v(*g));
                if tx.ndim() != 4 || tg.ndim() != 4 {
                    return Err(mismatch(label(), &[0, 0, 0, 0], tx.shape()));
                }
                let ws = [tg.shape()[1], tx.shape()[1], *kh, *kw];
                let geom = self.conv_geom(label(), tx.shape(), &ws, *stride, *pad)?;
                let expected = [geom.n, geom.cout, geom.oh, geom.ow];
                if tg.shape() != expected {
                    return Err(mismatch(label(), &expected, tg.shape()));
                }
                Tensor::from_parts(ws.to_vec(), kernels::conv2d_weight_grad(tx.data(), tg.data(), &geom))
            }
            Op::LeakyRelu(a, slope) => v(*a).map(|x| if x >= 0.0 { x } else { slope * x }),
            Op::LeakyReluGrad { g, x, slope } => {
                same(v(*g), v(*x))?;
                v(*g).zip_map(v(*x), |gv, xv| if xv >= 0.0 { gv } else { slope * gv })?
            }
            Op::Sigmoid(a) => v(*a).map(kernels::sigmoid),
            Op::Softplus(a) => v(*a).map(kernels::softplus),
            Op::Upsample2(a) => {
                let t = v(*a);
                if t.ndim() != 4 {
                    return Err(mismatch(label(), &[0, 0, 0, 0], t.shape()));
                }
                let s = t.shape();
                Tensor::from_parts(
                    vec![s[0], s[1], 2 * s[2], 2 * s[3]],
                    kernels::upsample2(t.data(), s[0] * s[1], s[2], s[3]),
                )
            }
            Op::SumPool2(a) => {
                let t = v(*a);
                let s = t.shape();
                if t.ndim() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
                    return Err(mismatch(label(), &[0, 0, 0, 0], s));
                }
                Tensor::from_parts(
                    vec![s[0], s[1], s[2] / 2, s[3] / 2],
                    kernels::sumpool2(t.data(), s[0] * s[1], s[2], s[3]),
                )
            }
            Op::Concat(a, b) => {
                let (ta, tb) = (v(*a), v(*b));
                if ta.ndim() < 2
                    || ta.ndim() != tb.ndim()
                    || ta.shape()[0] != tb.shape()[0]
                    || ta.shape()[2..] != tb.shape()[2..]
                {
                    return Err(mismatch(label(), ta.shape(), tb.shape()));
                }
                let n = ta.shape()[0];
                let (ba, bb) = (ta.numel() / n, tb.numel() / n);
                let mut data = Vec::with_capacity(ta.numel() + tb.numel());
                for i in 0..n {
                    data.extend_from_slice(&ta.data()[i * ba..][..ba]);
                    data.extend_from_slice(&tb.data()[i * bb..][..bb]);
                }
                let mut shape = ta.shape().to_vec();
                shape[1] += tb.shape()[1];
                Tensor::from_parts(shape, data)
            }
            Op::Slice { x, start, len } => {
                let t = v(*x);
                if t.ndim() < 2 || *len == 0 || start + len > t.shape()[1] {
                    return Err(NumericsError::InvalidArgument(format!(
                        "{}: slice {start}+{len} of axis 1 in {:?}",
                        label(),
                        t.shape()
                    )));
                }
                let n = t.shape()[0];
                let c = t.shape()[1];
                let inner = t.numel() / (n * c);
                let mut data = Vec::with_capacity(n * len * inner);
                for i in 0..n {
                    data.extend_from_slice(&t.data()[(i * c + start) * inner..][..len * inner]);
                }
                let mut shape = t.shape().to_vec();
                shape[1] = *len;
                Tensor::from_parts(shape, data)
            }
            Op::Pad { x, before, after } => {
                let t = v(*x);
                if t.ndim() < 2 {
                    return Err(mismatch(label(), &[0, 0], t.shape()));
                }
                let n = t.shape()[0];
                let c = t.shape()[1];
                let inner = t.numel() / (n * c);
                let total = c + before + after;
                let mut data = vec![0.0; n * total * inner];
                for i in 0..n {
                    data[(i * total + before) * inner..][..c * inner]
                        .copy_from_slice(&t.data()[i * c * inner..][..c * inner]);
                }
                let mut shape = t.shape().to_vec();
                shape[1] = total;
                Tensor::from_parts(shape, data)
            }
            Op::Gather { x, map, shape } => {
                let t = v(*x);
                if map.len() != shape.iter().product::<usize>()
                    || map.iter().any(|&m| m != NONE && m as usize >= t.numel())
                {
                    return Err(NumericsError::InvalidArgument(format!("{}: bad index map", label())));
                }
                let src = t.data();
                let data = map
                    .iter()
                    .map(|&m| if m == NONE { 0.0 } else { src[m as usize] })
                    .collect();
                Tensor::from_parts(shape.clone(), data)
            }
            Op::Scatter { x, map, shape } => {
                let t = v(*x);
                let n: usize = shape.iter().product();
                if map.len() != t.numel() || map.iter().any(|&m| m != NONE && m as usize >= n) {
                    return Err(NumericsError::InvalidArgument(format!("{}: bad index map", label())));
                }
                let mut data = vec![0.0; n];
                for (&m, &val) in map.iter().zip(t.data()) {
                    if m != NONE {
                        data[m as usize] += val;
                    }
                }
                Tensor::from_parts(shape.clone(), data)
            }
            Op::SetSqDist {
                x,
                centroids,
                spread,
            } => {
                let t = v(*x);
                same(t, centroids)?;
                let n = t.shape()[0];
                if spread.len() != n {
                    return Err(mismatch(label(), &[n], &[spread.len()]));
                }
                let m = t.numel() / n;
                let data = (0..n)
                    .map(|i| {
                        let a = &t.data()[i * m..][..m];
                        let c = &centroids.data()[i * m..][..m];
                        let d: f64 = a.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum();
                        (d + spread[i]) / m as f64
                    })
                    .collect();
                Tensor::from_parts(vec![n], data)
            }
        };
        if !out.is_finite() {
            return Err(NumericsError::NonFinite { node: label() });
        }
        Ok(out)
    }

    fn conv_geom(
        &self,
        label: String,
        xs: &[usize],
        ws: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom, NumericsError> {
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(mismatch(label, xs, ws));
        }
        if stride == 0 {
            return Err(NumericsError::InvalidArgument(format!("{label}: zero stride")));
        }
        let (oh, ow) = match (
            kernels::conv_out_len(xs[2], ws[2], stride, pad),
            kernels::conv_out_len(xs[3], ws[3], stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(NumericsError::KernelTooLarge {
                    node: label,
                    kernel: [ws[2], ws[3]],
                    input: [xs[2] + 2 * pad, xs[3] + 2 * pad],
                })
            }
        };
        Ok(ConvGeom {
            n: xs[0],
            cin: xs[1],
            cout: ws[0],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            oh,
            ow,
            stride,
            pad,
        })
    }

    // ---- operations -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumericsError> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumericsError> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Square(a))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        self.push(Op::BroadcastScalar(a, shape.to_vec()))
    }

    /// Sums away every axis after the first `keep`.
    pub fn sum_trailing(&mut self, a: NodeId, keep: usize) -> Result<NodeId, NumericsError> {
        self.push(Op::SumTrailing(a, keep))
    }

    /// Repeats each element over new trailing axes.
    pub fn expand_trailing(&mut self, a: NodeId, trailing: &[usize]) -> Result<NodeId, NumericsError> {
        self.push(Op::ExpandTrailing(a, trailing.to_vec()))
    }

    pub fn sum_leading(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::SumLeading(a))
    }

    pub fn broadcast_leading(&mut self, a: NodeId, n: usize) -> Result<NodeId, NumericsError> {
        self.push(Op::BroadcastLeading(a, n))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, KH, KW]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, NumericsError> {
        self.push(Op::Conv2d { x, w, stride, pad })
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, NumericsError> {
        self.push(Op::LeakyRelu(a, slope))
    }

    /// `|a|`, as a leaky ReLU with slope −1 (subgradient 1 at 0).
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.leaky_relu(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Sigmoid(a))
    }

    /// `log(1 + exp(a))`.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Softplus(a))
    }

    pub fn upsample2(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Upsample2(a))
    }

    pub fn sumpool2(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::SumPool2(a))
    }

    pub fn avgpool2(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let s = self.sumpool2(a)?;
        self.scale(s, 0.25)
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Concat(a, b))
    }

    /// `len` entries of axis 1 starting at `start`.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        self.push(Op::Slice { x, start, len })
    }

    fn pad(&mut self, x: NodeId, before: usize, after: usize) -> Result<NodeId, NumericsError> {
        self.push(Op::Pad { x, before, after })
    }

    fn gather(&mut self, x: NodeId, map: Arc<Vec<u32>>, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        self.push(Op::Gather { x, map, shape })
    }

    fn scatter(&mut self, x: NodeId, map: Arc<Vec<u32>>, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        self.push(Op::Scatter { x, map, shape })
    }

    /// Applies one flip/translation per sample to `[N, C, H, W]`; vacated pixels are zero.
    pub fn pixel_shift(&mut self, x: NodeId, shifts: &[PixelShift]) -> Result<NodeId, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || shifts.len() != s[0] {
            return Err(NumericsError::InvalidArgument(format!(
                "pixel_shift needs one shift per sample of a 4-d tensor, got {} for {s:?}",
                shifts.len()
            )));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let mut map = Vec::with_capacity(s.iter().product());
        for (n, sh) in shifts.iter().enumerate() {
            for ch in 0..c {
                let base = (n * c + ch) * h * w;
                for y in 0..h as i32 {
                    for xo in 0..w as i32 {
                        let (sy, sx) = (y - sh.dy, xo - sh.dx);
                        let sx = if sh.flip { w as i32 - 1 - sx } else { sx };
                        if sy < 0 || sy >= h as i32 || sx < 0 || sx >= w as i32 {
                            map.push(NONE);
                        } else {
                            map.push((base + sy as usize * w + sx as usize) as u32);
                        }
                    }
                }
            }
        }
        self.gather(x, Arc::new(map), s)
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of `[N, C, H, W]`.
    pub fn crop(&mut self, x: NodeId, y0: usize, x0: usize, h: usize, w: usize) -> Result<NodeId, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || h == 0 || w == 0 || y0 + h > s[2] || x0 + w > s[3] {
            return Err(NumericsError::InvalidArgument(format!(
                "crop {h}x{w} at ({y0},{x0}) outside {s:?}"
            )));
        }
        let mut map = Vec::with_capacity(s[0] * s[1] * h * w);
        for plane in 0..s[0] * s[1] {
            for y in 0..h {
                for xx in 0..w {
                    map.push((plane * s[2] * s[3] + (y0 + y) * s[3] + x0 + xx) as u32);
                }
            }
        }
        self.gather(x, Arc::new(map), vec![s[0], s[1], h, w])
    }

    /// Per-sample mean squared distance to a set of constant targets.
    ///
    /// For sample `n` with targets `t_1..t_J`, returns
    /// `(1/J) Σ_j ‖x_n − t_j‖² / m` where `m` is the per-sample element
    /// count. The set enters only through its centroid `c_n` and spread
    /// `s_n = (1/J) Σ_j ‖t_j − c_n‖²`, since
    /// `(1/J) Σ_j ‖x − t_j‖² = ‖x − c‖² + s`.
    pub fn set_sq_dist(
        &mut self,
        x: NodeId,
        centroids: Tensor,
        spread: Vec<f64>,
    ) -> Result<NodeId, NumericsError> {
        self.push(Op::SetSqDist {
            x,
            centroids: Arc::new(centroids),
            spread: Arc::new(spread),
        })
    }

    // ---- evaluation ---------------------------------------------------------

    /// Rebinds named inputs and recomputes every node; returns the value of `output`.
    pub fn evaluate(&mut self, output: NodeId, bindings: &[(&str, Tensor)]) -> Result<f64, NumericsError> {
        for (name, value) in bindings {
            let id = self
                .input_id(name)
                .ok_or_else(|| NumericsError::UnknownInput(name.to_string()))?;
            let node = &mut self.nodes[id.0];
            if node.value.shape() != value.shape() {
                return Err(mismatch(format!("input `{name}`"), node.value.shape(), value.shape()));
            }
            if !value.is_finite() {
                return Err(NumericsError::NonFinite {
                    node: format!("input `{name}`"),
                });
            }
            node.value = value.clone();
        }
        for idx in 0..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Input(_) | Op::Constant) {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let value = self.compute(idx, &op)?;
            self.nodes[idx].value = value;
        }
        self.scalar(output)
    }

    /// Sign pattern of every leaky-ReLU pre-activation. Two bindings with the
    /// same pattern lie on the same smooth piece of the graph.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let x = match node.op {
                Op::LeakyRelu(x, _) => x,
                Op::LeakyReluGrad { x, .. } => x,
                _ => continue,
            };
            out.extend(self.nodes[x.0].value.data().iter().map(|&v| v >= 0.0));
        }
        out
    }

    // ---- differentiation ----------------------------------------------------

    /// Records the gradient of scalar `output` with respect to each node in
    /// `wrt` and returns the gradient nodes. The gradient nodes are ordinary
    /// graph nodes and may be differentiated again.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, NumericsError> {
        if self.value(output).numel() != 1 {
            return Err(NumericsError::NotScalar(self.shape(output).to_vec()));
        }
        for &w in wrt {
            if !self.nodes[w.0].requires_grad {
                return Err(NumericsError::NotDifferentiable(Self::label(w.0, &self.nodes[w.0].op)));
            }
        }
        let out = output.0;
        let mut live = vec![false; out + 1];
        live[out] = self.nodes[out].requires_grad;
        for i in (0..=out).rev() {
            if live[i] {
                for p in self.nodes[i].op.parents() {
                    if self.nodes[p.0].requires_grad {
                        live[p.0] = true;
                    }
                }
            }
        }
        let mut adj: Vec<Option<NodeId>> = vec![None; out + 1];
        if live[out] {
            adj[out] = Some(self.constant(Tensor::ones(&[1])));
        }
        for i in (0..=out).rev() {
            let Some(g) = adj[i] else { continue };
            if !live[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, gp) in self.vjp(NodeId(i), &op, g, &live)? {
                adj[parent.0] = Some(match adj[parent.0] {
                    Some(prev) => self.add(prev, gp)?,
                    None => gp,
                });
            }
        }
        let mut result = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(w).to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            };
            result.push(g);
        }
        Ok(result)
    }

    /// Gradient values of scalar `output` with respect to `wrt`.
    pub fn backprop(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, NumericsError> {
        let ids = self.grad(output, wrt)?;
        Ok(ids.into_iter().map(|id| self.value(id).clone()).collect())
    }

    fn vjp(
        &mut self,
        node: NodeId,
        op: &Op,
        g: NodeId,
        live: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>, NumericsError> {
        let need = |p: NodeId| live.get(p.0).copied().unwrap_or(false);
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Input(_) | Op::Constant => {}
            Op::Add(a, b) => {
                if need(*a) {
                    out.push((*a, g));
                }
                if need(*b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    out.push((*a, g));
                }
                if need(*b) {
                    out.push((*b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, self.mul(g, *b)?));
                }
                if need(*b) {
                    out.push((*b, self.mul(g, *a)?));
                }
            }
            Op::Scale(a, c) => {
                if need(*a) {
                    out.push((*a, self.scale(g, *c)?));
                }
            }
            Op::AddScalar(a, _) => {
                if need(*a) {
                    out.push((*a, g));
                }
            }
            Op::Square(a) => {
                if need(*a) {
                    let two_a = self.scale(*a, 2.0)?;
                    out.push((*a, self.mul(g, two_a)?));
                }
            }
            Op::Sum(a) => {
                if need(*a) {
                    let shape = self.shape(*a).to_vec();
                    out.push((*a, self.broadcast_scalar(g, &shape)?));
                }
            }
            Op::BroadcastScalar(a, _) => {
                if need(*a) {
                    out.push((*a, self.sum(g)?));
                }
            }
            Op::SumTrailing(a, keep) => {
                if need(*a) {
                    let trailing = self.shape(*a)[*keep..].to_vec();
                    out.push((*a, self.expand_trailing(g, &trailing)?));
                }
            }
            Op::ExpandTrailing(a, _) => {
                if need(*a) {
                    let keep = self.shape(*a).len();
                    out.push((*a, self.sum_trailing(g, keep)?));
                }
            }
            Op::SumLeading(a) => {
                if need(*a) {
                    let n = self.shape(*a)[0];
                    out.push((*a, self.broadcast_leading(g, n)?));
                }
            }
            Op::BroadcastLeading(a, _) => {
                if need(*a) {
                    out.push((*a, self.sum_leading(g)?));
                }
            }
            Op::MatMul(a, b) => {
                if need(*a) {
                    let bt = self.transpose(*b)?;
                    out.push((*a, self.matmul(g, bt)?));
                }
                if need(*b) {
                    let at = self.transpose(*a)?;
                    out.push((*b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => {
                if need(*a) {
                    out.push((*a, self.transpose(g)?));
                }
            }
            Op::Reshape(a, _) => {
                if need(*a) {
                    let shape = self.shape(*a).to_vec();
                    out.push((*a, self.reshape(g, &shape)?));
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                if need(*x) {
                    let xs = self.shape(*x).to_vec();
                    out.push((
                        *x,
                        self.push(Op::ConvInputGrad {
                            g,
                            w: *w,
                            stride: *stride,
                            pad: *pad,
                            h: xs[2],
                            wd: xs[3],
                        })?,
                    ));
                }
                if need(*w) {
                    let ws = self.shape(*w).to_vec();
                    out.push((
                        *w,
                        self.push(Op::ConvWeightGrad {
                            x: *x,
                            g,
                            stride: *stride,
                            pad: *pad,
                            kh: ws[2],
                            kw: ws[3],
                        })?,
                    ));
                }
            }
            Op::ConvInputGrad {
                g: gy,
                w,
                stride,
                pad,
                ..
            } => {
                if need(*gy) {
                    out.push((*gy, self.conv2d(g, *w, *stride, *pad)?));
                }
                if need(*w) {
                    let ws = self.shape(*w).to_vec();
                    out.push((
                        *w,
                        self.push(Op::ConvWeightGrad {
                            x: g,
                            g: *gy,
                            stride: *stride,
                            pad: *pad,
                            kh: ws[2],
                            kw: ws[3],
                        })?,
                    ));
                }
            }
            Op::ConvWeightGrad {
                x,
                g: gy,
                stride,
                pad,
                ..
            } => {
                if need(*x) {
                    let xs = self.shape(*x).to_vec();
                    out.push((
                        *x,
                        self.push(Op::ConvInputGrad {
                            g: *gy,
                            w: g,
                            stride: *stride,
                            pad: *pad,
                            h: xs[2],
                            wd: xs[3],
                        })?,
                    ));
                }
                if need(*gy) {
                    out.push((*gy, self.conv2d(*x, g, *stride, *pad)?));
                }
            }
            Op::LeakyRelu(x, slope) => {
                if need(*x) {
                    out.push((
                        *x,
                        self.push(Op::LeakyReluGrad {
                            g,
                            x: *x,
                            slope: *slope,
                        })?,
                    ));
                }
            }
            // Piecewise linear: the derivative with respect to `x` is zero almost everywhere.
            Op::LeakyReluGrad { g: gy, x, slope } => {
                if need(*gy) {
                    out.push((
                        *gy,
                        self.push(Op::LeakyReluGrad {
                            g,
                            x: *x,
                            slope: *slope,
                        })?,
                    ));
                }
            }
            Op::Sigmoid(x) => {
                if need(*x) {
                    let neg = self.scale(node, -1.0)?;
                    let one_minus = self.add_scalar(neg, 1.0)?;
                    let d = self.mul(node, one_minus)?;
                    out.push((*x, self.mul(g, d)?));
                }
            }
            Op::Softplus(x) => {
                if need(*x) {
                    let s = self.sigmoid(*x)?;
                    out.push((*x, self.mul(g, s)?));
                }
            }
            Op::Upsample2(x) => {
                if need(*x) {
                    out.push((*x, self.sumpool2(g)?));
                }
            }
            Op::SumPool2(x) => {
                if need(*x) {
                    out.push((*x, self.upsample2(g)?));
                }
            }
            Op::Concat(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                if need(*a) {
                    out.push((*a, self.slice(g, 0, ca)?));
                }
                if need(*b) {
                    out.push((*b, self.slice(g, ca, cb)?));
                }
            }
            Op::Slice { x, start, len } => {
                if need(*x) {
                    let c = self.shape(*x)[1];
                    out.push((*x, self.pad(g, *start, c - start - len)?));
                }
            }
            Op::Pad { x, before, .. } => {
                if need(*x) {
                    let c = self.shape(*x)[1];
                    out.push((*x, self.slice(g, *before, c)?));
                }
            }
            Op::Gather { x, map, .. } => {
                if need(*x) {
                    let shape = self.shape(*x).to_vec();
                    out.push((*x, self.scatter(g, map.clone(), shape)?));
                }
            }
            Op::Scatter { x, map, .. } => {
                if need(*x) {
                    let shape = self.shape(*x).to_vec();
                    out.push((*x, self.gather(g, map.clone(), shape)?));
                }
            }
            Op::SetSqDist { x, centroids, .. } => {
                if need(*x) {
                    let shape = self.shape(*x).to_vec();
                    let m = shape[1..].iter().product::<usize>() as f64;
                    let c = self.constant(centroids.as_ref().clone());
                    let diff = self.sub(*x, c)?;
                    let d = self.scale(diff, 2.0 / m)?;
                    let ge = self.expand_trailing(g, &shape[1..])?;
                    out.push((*x, self.mul(d, ge)?));
                }
            }
        }
        Ok(out)
    }
}

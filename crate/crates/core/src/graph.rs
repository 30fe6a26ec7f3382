//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already topologically sorted. [`Graph::backward`] walks it once in
//! reverse, accumulating gradients only along paths that reach a trainable
//! leaf, and consumes the tape.
//!
//! Every forward op checks its output for NaN/Inf and fails with the op name
//! instead of letting non-finite values propagate.

use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor, TensorError, TensorResult};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    Clamp { x: Var, lo: T, hi: T },
    /// `x[N×K] · w[K×M] (+ b[M])`
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2x(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    ExpandSpatial(Var),
    Index { x: Var, index: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Norm(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Sqrt(..) => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::ExpandSpatial(..) => "expand_spatial",
            Op::Index { .. } => "index",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Norm(..) => "norm",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for constants and non-leaf nodes.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> TensorResult<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Broadcast rule for binary elementwise ops: equal shapes, or either side a
/// single element.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> TensorResult<Vec<usize>> {
    if a == b {
        Ok(a.to_vec())
    } else if numel(b) == 1 {
        Ok(a.to_vec())
    } else if numel(a) == 1 {
        Ok(b.to_vec())
    } else {
        Err(mismatch(op, a, b))
    }
}

#[inline]
fn bget<T: Copy>(data: &[T], i: usize) -> T {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

/// Sums `grad` down to `shape` (the inverse of scalar broadcasting).
fn unbroadcast<T: Scalar>(grad: Vec<T>, shape: &[usize]) -> Vec<T> {
    if numel(shape) == 1 && grad.len() != 1 {
        vec![grad.into_iter().sum()]
    } else {
        grad
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> TensorResult<Var> {
        check_finite(op.name(), &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> TensorResult<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op.name(), ta.shape(), tb.shape())?;
        let n = numel(&shape);
        let data = (0..n)
            .map(|i| f(bget(ta.data(), i), bget(tb.data(), i)))
            .collect();
        let value = Tensor::new(&shape, data)?;
        self.push(op, value, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> TensorResult<Var> {
        let value = self.value(a).map(f);
        self.push(op, value, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> TensorResult<Var> {
        let c = T::lit(c);
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> TensorResult<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> TensorResult<Var> {
        let c = T::lit(c);
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> TensorResult<Var> {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> TensorResult<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> TensorResult<Var> {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    /// Elementwise square root; negative inputs fault as non-finite.
    pub fn sqrt(&mut self, a: Var) -> TensorResult<Var> {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    /// Clips into `[lo, hi]`; the gradient passes wherever the input is
    /// inside the closed interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> TensorResult<Var> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary(a, Op::Clamp { x: a, lo, hi }, |x| if x < lo { lo } else if x > hi { hi } else { x })
    }

    pub fn square(&mut self, a: Var) -> TensorResult<Var> {
        self.mul(a, a)
    }

    /// `x[N×K] · w[K×M] + b[M]`, the bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> TensorResult<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(mismatch("linear", &sx, &sw));
        }
        let (n, k, m) = (sx[0], sx[1], sw[1]);
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [m] {
                return Err(mismatch("linear", tb.shape(), &[m]));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(tb.data());
            }
        }
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, n, k, m);
        let value = Tensor::new(&[n, m], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Op::Linear { x, w, b }, value, &inputs)
    }

    /// Matrix product `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.linear(a, b, None)
    }

    /// Convolution of a `C_in×H×W` map with `C_out×C_in×kh×kw` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> TensorResult<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] || stride == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if sx[1] + 2 * pad < sw[2] || sx[2] + 2 * pad < sw[3] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            c_in: sx[0],
            c_out: sw[0],
            h: sx[1],
            w: sx[2],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let bias = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape() != [geom.c_out] {
                    return Err(mismatch("conv2d", tb.shape(), &[geom.c_out]));
                }
                Some(tb.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), bias);
        let value = Tensor::new(&[geom.c_out, geom.out_h(), geom.out_w()], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Op::Conv2d { x, w, b, geom }, value, &inputs)
    }

    /// Pointwise convolution with a `C_out×C_in` weight matrix.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> TensorResult<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 {
            return Err(mismatch("conv1x1", &sw, &[0, 0]));
        }
        let w4 = self.reshape(w, &[sw[0], sw[1], 1, 1])?;
        self.conv2d(x, w4, b, 1, 0)
    }

    /// Nearest-neighbour ×2 upsampling of a `C×H×W` map.
    pub fn upsample2x(&mut self, x: Var) -> TensorResult<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 {
            return Err(mismatch("upsample2x", s, &[0, 0, 0]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = t.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        self.push(Op::Upsample2x(x), value, &[x])
    }

    /// ×2 upsample followed by a same-padded 3×3 convolution.
    pub fn upsample_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> TensorResult<Var> {
        let up = self.upsample2x(x)?;
        self.conv2d(up, w, b, 1, 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> TensorResult<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), value, &[x])
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> TensorResult<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(mismatch("concat", self.shape(first), t.shape()));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        self.push(Op::Concat(parts.to_vec()), value, parts)
    }

    /// Broadcasts a `D` vector to a `D×H×W` map.
    pub fn expand_spatial(&mut self, x: Var, h: usize, w: usize) -> TensorResult<Var> {
        let t = self.value(x);
        if t.rank() != 1 {
            return Err(mismatch("expand_spatial", t.shape(), &[0]));
        }
        let d = t.len();
        let mut out = Vec::with_capacity(d * h * w);
        for &v in t.data() {
            out.extend(std::iter::repeat(v).take(h * w));
        }
        let value = Tensor::new(&[d, h, w], out)?;
        self.push(Op::ExpandSpatial(x), value, &[x])
    }

    /// Slice `index` along the leading axis.
    pub fn index(&mut self, x: Var, index: usize) -> TensorResult<Var> {
        let t = self.value(x);
        if t.rank() == 0 || index >= t.shape()[0] {
            return Err(TensorError::Invalid {
                op: "index",
                msg: format!("index {index} out of range for shape {:?}", t.shape()),
            });
        }
        let value = t.index(index);
        self.push(Op::Index { x, index }, value, &[x])
    }

    pub fn sum(&mut self, x: Var) -> TensorResult<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(TensorError::Empty { op: "sum" });
        }
        let value = Tensor::scalar(t.data().iter().copied().sum());
        self.push(Op::Sum(x), value, &[x])
    }

    pub fn mean(&mut self, x: Var) -> TensorResult<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(TensorError::Empty { op: "mean" });
        }
        let n = T::lit(t.len() as f64);
        let value = Tensor::scalar(t.data().iter().copied().sum::<T>() / n);
        self.push(Op::Mean(x), value, &[x])
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> TensorResult<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for shape {:?}", t.shape()),
            });
        }
        if t.is_empty() {
            return Err(TensorError::Empty { op: "sum_axis" });
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let idx = o * inner + i;
                    out[idx] = out[idx] + t.data()[(o * len + a) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        self.push(Op::SumAxis { x, axis }, value, &[x])
    }

    /// L2 norm over all entries (Frobenius norm for matrices).
    pub fn norm(&mut self, x: Var) -> TensorResult<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(TensorError::Empty { op: "norm" });
        }
        let value = Tensor::scalar(t.data().iter().map(|&v| v * v).sum::<T>().sqrt());
        self.push(Op::Norm(x), value, &[x])
    }

    /// Sum of elementwise products.
    pub fn dot(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("dot", self.shape(a), self.shape(b)));
        }
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Mean squared difference of two equal-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mse", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Propagates `∂loss/∂·` back to every trainable leaf. Trainable leaves
    /// the loss does not reach receive zero gradients.
    pub fn backward(self, loss: Var) -> TensorResult<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NotScalar(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(TensorError::Detached);
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for idx in (0..nodes.len()).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                if matches!(nodes[idx].op, Op::Leaf) {
                    grads[idx] = Some(Tensor::zeros(nodes[idx].value.shape()));
                }
                continue;
            };
            if matches!(nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let name = nodes[idx].op.name();
            for (input, contrib) in local_grads(&nodes, idx, g) {
                if !contrib.all_finite() {
                    return Err(TensorError::NonFinite { op: name });
                }
                match grads[input.0].as_mut() {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    None => grads[input.0] = Some(contrib),
                }
            }
        }
        for (idx, node) in nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gradient contributions of node `idx` to each of its trainable inputs.
fn local_grads<T: Scalar>(nodes: &[Node<T>], idx: usize, g: Tensor<T>) -> Vec<(Var, Tensor<T>)> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let out = &nodes[idx].value;
    let mut res = Vec::with_capacity(3);
    let mut emit = |v: Var, data: Vec<T>| {
        let shape = nodes[v.0].value.shape();
        let data = unbroadcast(data, shape);
        res.push((v, Tensor::new(shape, data).expect("gradient shape")));
    };
    let gd = g.data();

    match nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[idx].op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if needs(a) {
                emit(a, gd.to_vec());
            }
            if needs(b) {
                emit(b, gd.iter().map(|&x| sign * x).collect());
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(a).data(), val(b).data());
            if needs(a) {
                emit(a, (0..gd.len()).map(|i| gd[i] * bget(tb, i)).collect());
            }
            if needs(b) {
                emit(b, (0..gd.len()).map(|i| gd[i] * bget(ta, i)).collect());
            }
        }
        Op::Div(a, b) => {
            let (ta, tb) = (val(a).data(), val(b).data());
            if needs(a) {
                emit(a, (0..gd.len()).map(|i| gd[i] / bget(tb, i)).collect());
            }
            if needs(b) {
                emit(
                    b,
                    (0..gd.len())
                        .map(|i| {
                            let d = bget(tb, i);
                            -gd[i] * bget(ta, i) / (d * d)
                        })
                        .collect(),
                );
            }
        }
        Op::Scale(a, c) => emit(a, gd.iter().map(|&x| x * c).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => emit(a, gd.to_vec()),
        Op::Relu(a) => {
            let ta = val(a).data();
            emit(
                a,
                gd.iter()
                    .zip(ta)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            );
        }
        Op::Sigmoid(a) => emit(
            a,
            gd.iter()
                .zip(out.data())
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect(),
        ),
        Op::Tanh(a) => emit(
            a,
            gd.iter()
                .zip(out.data())
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect(),
        ),
        Op::Sqrt(a) => emit(
            a,
            gd.iter()
                .zip(out.data())
                .map(|(&g, &y)| g * T::lit(0.5) / y)
                .collect(),
        ),
        Op::Clamp { x, lo, hi } => {
            let tx = val(x).data();
            emit(
                x,
                gd.iter()
                    .zip(tx)
                    .map(|(&g, &v)| if v >= lo && v <= hi { g } else { T::zero() })
                    .collect(),
            );
        }
        Op::Linear { x, w, b } => {
            let (sx, sw) = (val(x).shape(), val(w).shape());
            let (n, k, m) = (sx[0], sx[1], sw[1]);
            if needs(x) {
                let mut gx = vec![T::zero(); n * k];
                kernels::matmul_a_bt_acc(gd, val(w).data(), &mut gx, n, m, k);
                emit(x, gx);
            }
            if needs(w) {
                let mut gw = vec![T::zero(); k * m];
                kernels::matmul_at_b_acc(val(x).data(), gd, &mut gw, n, k, m);
                emit(w, gw);
            }
            if let Some(b) = b.filter(|&b| needs(b)) {
                let mut gb = vec![T::zero(); m];
                for row in gd.chunks(m) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                emit(b, gb);
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let need_b = b.is_some_and(needs);
            let (gx, gw, gb) = kernels::conv2d_backward(
                &geom,
                val(x).data(),
                val(w).data(),
                gd,
                (needs(x), needs(w), need_b),
            );
            if let Some(gx) = gx {
                emit(x, gx);
            }
            if let Some(gw) = gw {
                emit(w, gw);
            }
            if let (Some(b), Some(gb)) = (b, gb) {
                emit(b, gb);
            }
        }
        Op::Upsample2x(x) => {
            let s = val(x).shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let mut gx = vec![T::zero(); c * h * w];
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let i = (ch * h + y / 2) * w + xx / 2;
                        gx[i] = gx[i] + gd[(ch * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            emit(x, gx);
        }
        Op::Concat(ref parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if needs(p) {
                    emit(p, gd[offset..offset + n].to_vec());
                }
                offset += n;
            }
        }
        Op::ExpandSpatial(x) => {
            let d = val(x).len();
            let plane = gd.len() / d;
            emit(
                x,
                gd.chunks(plane).map(|c| c.iter().copied().sum()).collect(),
            );
        }
        Op::Index { x, index } => {
            let tx = val(x);
            let stride = tx.len() / tx.shape()[0];
            let mut gx = vec![T::zero(); tx.len()];
            gx[index * stride..(index + 1) * stride].copy_from_slice(gd);
            emit(x, gx);
        }
        Op::Sum(x) => emit(x, vec![gd[0]; val(x).len()]),
        Op::Mean(x) => {
            let n = val(x).len();
            emit(x, vec![gd[0] / T::lit(n as f64); n]);
        }
        Op::SumAxis { x, axis } => {
            let tx = val(x);
            let (outer, len, inner) = axis_split(tx.shape(), axis);
            let mut gx = vec![T::zero(); tx.len()];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        gx[(o * len + a) * inner + i] = gd[o * inner + i];
                    }
                }
            }
            emit(x, gx);
        }
        Op::Norm(x) => {
            let n = out.item();
            let tx = val(x).data();
            // Subgradient 0 at the origin.
            let gx = if n == T::zero() {
                vec![T::zero(); tx.len()]
            } else {
                tx.iter().map(|&v| gd[0] * v / n).collect()
            };
            emit(x, gx);
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4., 6.]);
        let x = g.constant(t(&[3], &[-1., 0., 2.]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
        let z = g.constant_scalar(0.0);
        let sg = g.sigmoid(z).unwrap();
        assert_eq!(g.scalar_value(sg), 0.5);
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[3], &[1., 2., 3.]));
        let c = g.param(Tensor::scalar(2.0));
        let p = g.mul(c, a).unwrap();
        assert_eq!(g.value(p).data(), &[2., 4., 6.]);
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(c).unwrap().data(), &[6.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[2., 2., 2.]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { op: "add", .. })));
        let m = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(m, m).is_err());
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[3, 2]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[3.; 4]);

        let mut rng = crate::rng::SeededRng::new(9);
        let m = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let i = g.constant(Tensor::eye(3));
        let mv = g.constant(m.clone());
        let p = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(p), &m);
    }

    #[test]
    fn conv1x1_identity_kernel() {
        let mut rng = crate::rng::SeededRng::new(2);
        let f = Tensor::<f64>::randn(&[4, 2, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let w = g.constant(Tensor::eye(4));
        let y = g.conv1x1(x, w, None).unwrap();
        assert_eq!(g.value(y), &f);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(t(&[3], &[1., 2., 3.]));
        let m = g.mean(v).unwrap();
        assert_eq!(g.scalar_value(m), 2.0);
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let n = g.norm(z).unwrap();
        assert_eq!(g.scalar_value(n), 0.0);
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let s = g.sum_axis(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[4., 6.]);
        let e = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(g.mean(e), Err(TensorError::Empty { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[5]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.; 5]);

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[2]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NotScalar(_))));

        let mut g = Graph::<f64>::new();
        let _x = g.param(Tensor::ones(&[2]));
        let c = g.constant(Tensor::ones(&[2]));
        let s = g.sum(c).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::Detached)));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[2]));
        let unused = g.param(Tensor::ones(&[3]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.; 3]);
    }

    #[test]
    fn division_by_zero_faults_with_op_name() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones(&[2]));
        let z = g.constant_scalar(0.0);
        assert_eq!(g.div(a, z), Err(TensorError::NonFinite { op: "div" }));
    }
}

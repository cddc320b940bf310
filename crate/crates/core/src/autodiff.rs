//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and `backward` is a single reverse sweep. A graph lives for one
//! forward/backward pass; parameters persist in a [`ParamStore`] and are
//! bound into each new graph with [`Graph::param`].

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{Scalar, Strides};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Divides by N.
    VarianceBiased,
    /// Divides by N - 1.
    VarianceUnbiased,
}

/// Elementwise nonlinearities usable as the `f` of a unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<'g, T: Scalar>(self, v: Var<'g, T>) -> Var<'g, T> {
        match self {
            Activation::Identity => v,
            Activation::Sigmoid => v.sigmoid(),
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.relu(),
        }
    }

    pub fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddConst(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Linear { x: usize, w: usize },
    Reduce { src: usize, axis: usize, kind: ReduceKind },
    Broadcast(usize),
    Reshape(usize),
    Slice { src: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize> },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

/// Tape of one forward pass. Confined to a single thread.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, param: Option<ParamId>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, param });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf node. Gradients still flow to it, so inputs such as an initial
    /// hidden state can be queried after `backward`.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, None)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.leaf(Tensor::scalar(value))
    }

    /// Binds a stored parameter into this graph.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        self.push(store.value(id).clone(), Op::Leaf, Some(id))
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn unary(&self, src: usize, op: Op<T>, f: impl Fn(T) -> T) -> Var<'_, T> {
        let value = self.value_ref(src).map(f);
        self.push(value, op, None)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'_, T>> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a].value.zip_with(&nodes[b].value, name, f)?
        };
        Ok(self.push(value, op, None))
    }

    /// Runs reverse-mode differentiation from a one-element root.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::ones(root_value.shape()));

        for id in (0..=root.id).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &nodes[id];
            let y = &node.value;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy.map(|g| -g));
                }
                Op::Mul(a, b) => {
                    let ga = zip(&dy, val(*b), |g, v| g * v);
                    let gb = zip(&dy, val(*a), |g, v| g * v);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let ga = zip(&dy, val(*b), |g, v| g / v);
                    let gb = zip3(&dy, y, val(*b), |g, q, d| -g * q / d);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Neg(a) => accumulate(&mut grads, *a, dy.map(|g| -g)),
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, dy.map(|g| g * c));
                }
                Op::AddConst(a) => accumulate(&mut grads, *a, dy.clone()),
                Op::Sigmoid(a) => {
                    let g = zip(&dy, y, |g, s| g * s * (T::one() - s));
                    accumulate(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let g = zip(&dy, y, |g, t| g * (T::one() - t * t));
                    accumulate(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let g = zip(&dy, val(*a), |g, x| if x > T::zero() { g } else { T::zero() });
                    accumulate(&mut grads, *a, g);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, zip(&dy, y, |g, e| g * e)),
                Op::Log(a) => accumulate(&mut grads, *a, zip(&dy, val(*a), |g, x| g / x)),
                Op::Sqrt(a) => {
                    // sqrt is not differentiable at 0; use the zero subgradient
                    // so constant inputs to a normalizer give finite gradients.
                    let half = T::lit(0.5);
                    let g = zip(&dy, y, |g, r| if r > T::zero() { g * half / r } else { T::zero() });
                    accumulate(&mut grads, *a, g);
                }
                Op::Square(a) => {
                    let two = T::lit(2.0);
                    accumulate(&mut grads, *a, zip(&dy, val(*a), |g, x| g * two * x));
                }
                Op::Linear { x, w } => {
                    let (gx, gw) = linear_backward(&dy, val(*x), val(*w));
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::Reduce { src, axis, kind } => {
                    let g = reduce_backward(&dy, val(*src), *axis, *kind);
                    accumulate(&mut grads, *src, g);
                }
                Op::Broadcast(src) => {
                    let g = unbroadcast(&dy, val(*src).shape());
                    accumulate(&mut grads, *src, g);
                }
                Op::Reshape(src) => {
                    let g = dy.reshape(val(*src).shape()).expect("reshape preserves numel");
                    accumulate(&mut grads, *src, g);
                }
                Op::Slice { src, axis, start } => {
                    let g = slice_backward(&dy, val(*src).shape(), *axis, *start);
                    accumulate(&mut grads, *src, g);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).numel();
                        let g = Tensor::new(val(p).shape().to_vec(), dy.data()[offset..offset + n].to_vec())
                            .expect("concat part");
                        offset += n;
                        accumulate(&mut grads, p, g);
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = dy.data()[0] / T::lit(labels.len() as f64);
                    let mut g = probs.clone();
                    let classes = probs.shape()[1];
                    for (n, &label) in labels.iter().enumerate() {
                        g.data_mut()[n * classes + label] -= T::one();
                    }
                    accumulate(&mut grads, *logits, g.scale(scale));
                }
            }
            grads[id] = Some(dy);
        }

        let params = nodes.iter().map(|n| n.param).collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    a.zip_with(b, "backward", f).expect("gradient shape matches value shape")
}

fn zip3<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>, f: impl Fn(T, T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Gradients produced by one `backward` call.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<Option<ParamId>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Adds every parameter leaf's gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (grad, param) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(id)) = (grad, param) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }
}

// The arithmetic methods report shape errors, which the std::ops traits
// cannot.
#[allow(clippy::should_implement_trait)]
impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_ref(self.id).shape().to_vec()
    }

    /// The single element of a one-element node.
    pub fn item(&self) -> T {
        self.graph.value_ref(self.id).data()[0]
    }

    pub fn add(self, rhs: Var<'g, T>) -> Result<Self> {
        self.graph.binary(self.id, rhs.id, "add", Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Result<Self> {
        self.graph.binary(self.id, rhs.id, "sub", Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'g, T>) -> Result<Self> {
        self.graph.binary(self.id, rhs.id, "mul", Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    pub fn div(self, rhs: Var<'g, T>) -> Result<Self> {
        self.graph.binary(self.id, rhs.id, "div", Op::Div(self.id, rhs.id), |a, b| a / b)
    }

    pub fn neg(self) -> Self {
        self.graph.unary(self.id, Op::Neg(self.id), |a| -a)
    }

    pub fn scale(self, c: T) -> Self {
        self.graph.unary(self.id, Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_scalar(self, c: T) -> Self {
        self.graph.unary(self.id, Op::AddConst(self.id), |a| a + c)
    }

    pub fn sigmoid(self) -> Self {
        self.graph.unary(self.id, Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Self {
        self.graph.unary(self.id, Op::Tanh(self.id), |a| a.tanh())
    }

    pub fn relu(self) -> Self {
        self.graph.unary(self.id, Op::Relu(self.id), |a| a.max(T::zero()))
    }

    pub fn exp(self) -> Self {
        self.graph.unary(self.id, Op::Exp(self.id), |a| a.exp())
    }

    pub fn ln(self) -> Self {
        self.graph.unary(self.id, Op::Log(self.id), |a| a.ln())
    }

    pub fn sqrt(self) -> Self {
        self.graph.unary(self.id, Op::Sqrt(self.id), |a| a.sqrt())
    }

    pub fn square(self) -> Self {
        self.graph.unary(self.id, Op::Square(self.id), |a| a * a)
    }

    /// `x W^T` for `x` of shape `[D]` or `[N, D]` and `W` of shape `[H, D]`;
    /// a 1-D `x` gives the matrix-vector product `W x` of shape `[H]`.
    pub fn linear(self, w: Var<'g, T>) -> Result<Self> {
        let value = {
            let x = self.graph.value_ref(self.id);
            let w = self.graph.value_ref(w.id);
            linear_forward(&x, &w)?
        };
        Ok(self.graph.push(value, Op::Linear { x: self.id, w: w.id }, None))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Self {
        let n = self.graph.value_ref(self.id).numel();
        self.reshape(&[n])
            .and_then(|flat| flat.reduce(0, ReduceKind::Sum))
            .expect("flattened tensor has axis 0")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(self) -> Self {
        let n = self.graph.value_ref(self.id).numel();
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Reduction along `axis`; the axis is removed from the shape.
    pub fn reduce(self, axis: usize, kind: ReduceKind) -> Result<Self> {
        let value = reduce_forward(&self.graph.value_ref(self.id), axis, kind)?;
        Ok(self.graph.push(
            value,
            Op::Reduce {
                src: self.id,
                axis,
                kind,
            },
            None,
        ))
    }

    /// Broadcasts a scalar, or a same-rank tensor with unit dimensions, to
    /// `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Self> {
        let value = broadcast_forward(&self.graph.value_ref(self.id), shape)?;
        Ok(self.graph.push(value, Op::Broadcast(self.id), None))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let value = self.graph.value_ref(self.id).reshape(shape)?;
        Ok(self.graph.push(value, Op::Reshape(self.id), None))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let value = slice_forward(&self.graph.value_ref(self.id), axis, start, len)?;
        Ok(self.graph.push(
            value,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            None,
        ))
    }

    /// Concatenates 1-D vectors.
    pub fn concat(parts: &[Var<'g, T>]) -> Result<Self> {
        let graph = parts.first().expect("at least one part").graph;
        let mut data = Vec::new();
        for p in parts {
            let v = graph.value_ref(p.id);
            if v.rank() != 1 {
                return Err(Error::InvalidAxis {
                    op: "concat",
                    axis: 0,
                    rank: v.rank(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
        };
        Ok(graph.push(Tensor::vector(data), op, None))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(self)`, for
    /// logits of shape `[N, C]`.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Self> {
        let (loss, probs) = {
            let logits = self.graph.value_ref(self.id);
            if logits.rank() != 2 || logits.shape()[0] != labels.len() {
                return Err(Error::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    lhs: logits.shape().to_vec(),
                    rhs: vec![labels.len()],
                });
            }
            let classes = logits.shape()[1];
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::IndexOutOfRange {
                    what: "class label",
                    index: bad,
                    len: classes,
                });
            }
            let probs = softmax_rows(&logits);
            let mut total = T::zero();
            for (row, &label) in logits.rows().zip(labels) {
                total += log_sum_exp(row) - row[label];
            }
            (total / T::lit(labels.len() as f64), probs)
        };
        Ok(self.graph.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            None,
        ))
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let cols = logits.shape()[1];
    for r in 0..logits.shape()[0] {
        let row = out.row_mut(r);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        debug_assert_eq!(row.len(), cols);
    }
    out
}

fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || Error::ShapeMismatch {
        op: "linear",
        lhs: w.shape().to_vec(),
        rhs: x.shape().to_vec(),
    };
    if w.rank() != 2 || x.rank() == 0 || x.rank() > 2 {
        return Err(mismatch());
    }
    let (h, d) = (w.shape()[0], w.shape()[1]);
    if *x.shape().last().unwrap() != d {
        return Err(mismatch());
    }
    let n = if x.rank() == 2 { x.shape()[0] } else { 1 };
    let mut out = vec![T::zero(); n * h];
    T::gemm(
        n,
        d,
        h,
        T::one(),
        x.data(),
        Strides::row_major(d),
        w.data(),
        Strides::transposed(d),
        T::zero(),
        &mut out,
        Strides::row_major(h),
    );
    let shape = if x.rank() == 2 { vec![n, h] } else { vec![h] };
    Tensor::new(shape, out)
}

fn linear_backward<T: Scalar>(dy: &Tensor<T>, x: &Tensor<T>, w: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (h, d) = (w.shape()[0], w.shape()[1]);
    let n = if x.rank() == 2 { x.shape()[0] } else { 1 };
    let mut gx = vec![T::zero(); n * d];
    T::gemm(
        n,
        h,
        d,
        T::one(),
        dy.data(),
        Strides::row_major(h),
        w.data(),
        Strides::row_major(d),
        T::zero(),
        &mut gx,
        Strides::row_major(d),
    );
    let mut gw = vec![T::zero(); h * d];
    T::gemm(
        h,
        n,
        d,
        T::one(),
        dy.data(),
        Strides::transposed(h),
        x.data(),
        Strides::row_major(d),
        T::zero(),
        &mut gw,
        Strides::row_major(d),
    );
    (
        Tensor::new(x.shape().to_vec(), gx).expect("gx"),
        Tensor::new(w.shape().to_vec(), gw).expect("gw"),
    )
}

/// Splits `shape` around `axis` into (outer, extent, inner) sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn reduce_forward<T: Scalar>(t: &Tensor<T>, axis: usize, kind: ReduceKind) -> Result<Tensor<T>> {
    if axis >= t.rank() {
        return Err(Error::InvalidAxis {
            op: "reduce",
            axis,
            rank: t.rank(),
        });
    }
    let (outer, extent, inner) = split_axis(t.shape(), axis);
    let divisor = match kind {
        ReduceKind::Sum => 1,
        ReduceKind::Mean | ReduceKind::VarianceBiased => extent,
        ReduceKind::VarianceUnbiased => {
            if extent < 2 {
                return Err(Error::DegenerateEstimator {
                    op: "reduce",
                    extent,
                });
            }
            extent - 1
        }
    };
    let divisor = T::lit(divisor as f64);
    let n = T::lit(extent as f64);
    let x = t.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |e: usize| x[(o * extent + e) * inner + i];
            let sum: T = (0..extent).map(at).sum();
            let v = match kind {
                ReduceKind::Sum => sum,
                ReduceKind::Mean => sum / divisor,
                ReduceKind::VarianceBiased | ReduceKind::VarianceUnbiased => {
                    let mean = sum / n;
                    (0..extent).map(|e| (at(e) - mean).powi(2)).sum::<T>() / divisor
                }
            };
            out.push(v);
        }
    }
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

fn reduce_backward<T: Scalar>(dy: &Tensor<T>, src: &Tensor<T>, axis: usize, kind: ReduceKind) -> Tensor<T> {
    let (outer, extent, inner) = split_axis(src.shape(), axis);
    let x = src.data();
    let g = dy.data();
    let n = T::lit(extent as f64);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let gi = g[o * inner + i];
            let idx = |e: usize| (o * extent + e) * inner + i;
            match kind {
                ReduceKind::Sum => (0..extent).for_each(|e| out[idx(e)] = gi),
                ReduceKind::Mean => (0..extent).for_each(|e| out[idx(e)] = gi / n),
                ReduceKind::VarianceBiased | ReduceKind::VarianceUnbiased => {
                    let divisor = if kind == ReduceKind::VarianceBiased {
                        n
                    } else {
                        n - T::one()
                    };
                    let mean = (0..extent).map(|e| x[idx(e)]).sum::<T>() / n;
                    let two = T::lit(2.0);
                    for e in 0..extent {
                        out[idx(e)] = gi * two * (x[idx(e)] - mean) / divisor;
                    }
                }
            }
        }
    }
    Tensor::new(src.shape().to_vec(), out).expect("same shape")
}

fn check_broadcast(from: &[usize], to: &[usize]) -> Result<()> {
    let ok = from.is_empty()
        || (from.len() == to.len() && from.iter().zip(to).all(|(&f, &t)| f == t || f == 1));
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op: "broadcast_to",
            lhs: from.to_vec(),
            rhs: to.to_vec(),
        })
    }
}

/// Maps an output flat index to the broadcast source flat index.
fn source_index(mut flat: usize, from: &[usize], to: &[usize]) -> usize {
    if from.is_empty() {
        return 0;
    }
    let mut src = 0;
    let mut stride = 1;
    for d in (0..to.len()).rev() {
        let coord = flat % to[d];
        flat /= to[d];
        if from[d] != 1 {
            src += coord * stride;
        }
        stride *= from[d];
    }
    src
}

fn broadcast_forward<T: Scalar>(t: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    check_broadcast(t.shape(), shape)?;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|k| t.data()[source_index(k, t.shape(), shape)])
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn unbroadcast<T: Scalar>(dy: &Tensor<T>, from: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(from);
    for (k, &g) in dy.data().iter().enumerate() {
        out.data_mut()[source_index(k, from, dy.shape())] += g;
    }
    out
}

fn slice_forward<T: Scalar>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= t.rank() {
        return Err(Error::InvalidAxis {
            op: "slice",
            axis,
            rank: t.rank(),
        });
    }
    let (outer, extent, inner) = split_axis(t.shape(), axis);
    if start + len > extent {
        return Err(Error::IndexOutOfRange {
            what: "slice end",
            index: start + len,
            len: extent,
        });
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, data)
}

fn slice_backward<T: Scalar>(dy: &Tensor<T>, src_shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let (outer, extent, inner) = split_axis(src_shape, axis);
    let len = dy.shape()[axis];
    let mut out = Tensor::zeros(src_shape);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        let src = &dy.data()[o * len * inner..(o + 1) * len * inner];
        out.data_mut()[base..base + len * inner].copy_from_slice(src);
    }
    out
}

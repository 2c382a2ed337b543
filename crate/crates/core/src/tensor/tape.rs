//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Nodes
//! are appended in evaluation order, so walking them backwards is a valid
//! reverse topological order for the backward pass. Build a fresh graph per
//! training step.
//!
//! ```
//! use dagmix::tensor::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = x.square();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[6.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use super::dense::{numel, walk_broadcast3, ElementwiseOp, ReduceOp, Tensor};
use crate::error::{contract, Result};
use crate::scalar::{sigmoid, Scalar};

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary(ElementwiseOp, usize, usize),
    Unary(ElementwiseOp, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Reduce {
        kind: ReduceOp,
        input: usize,
        axes: Vec<usize>,
    },
    MatMul(usize, usize),
    ModeContract {
        w: usize,
        v: usize,
        mode: usize,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Records operations for one forward/backward pass.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by [`Graph::backward`], keyed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
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
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Trainable leaf: gradients flow to it.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, x: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(x))
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat(&refs, axis)?;
        let tracked = parts.iter().any(|p| self.tracked(p.id));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let root = &nodes[loss.id].value;
        if root.len() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let put = |grads: &mut Vec<Option<Tensor<T>>>, to: usize, delta: Tensor<T>| -> Result<()> {
                if !nodes[to].tracked {
                    return Ok(());
                }
                match &mut grads[to] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a += *d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Binary(kind, a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (ga, gb) = binary_grads(*kind, &g, va, vb, &node.value)?;
                    if nodes[*a].tracked {
                        put(&mut grads, *a, ga.sum_to_shape(va.shape())?)?;
                    }
                    if nodes[*b].tracked {
                        put(&mut grads, *b, gb.sum_to_shape(vb.shape())?)?;
                    }
                }
                Op::Unary(kind, a) => {
                    let x = &nodes[*a].value;
                    put(&mut grads, *a, unary_grad(*kind, &g, x, &node.value))?;
                }
                Op::AddScalar(a) => put(&mut grads, *a, g)?,
                Op::MulScalar(a, c) => put(&mut grads, *a, g.scale(*c))?,
                Op::Reduce { kind, input, axes } => {
                    let x = &nodes[*input].value;
                    put(&mut grads, *input, reduce_grad(*kind, &g, x, &node.value, axes)?)?;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].tracked {
                        put(&mut grads, *a, g.matmul(&vb.transpose2()?)?)?;
                    }
                    if nodes[*b].tracked {
                        put(&mut grads, *b, va.transpose2()?.matmul(&g)?)?;
                    }
                }
                Op::ModeContract { w, v, mode } => {
                    let (vw, vv) = (&nodes[*w].value, &nodes[*v].value);
                    let shape = vw.shape();
                    let outer = numel(&shape[..*mode]);
                    let inner = numel(&shape[*mode + 1..]);
                    let c = shape[*mode];
                    if nodes[*w].tracked {
                        let mut gw = vec![T::zero(); vw.len()];
                        for o in 0..outer {
                            let go = &g.data()[o * inner..(o + 1) * inner];
                            for (k, &vk) in vv.data().iter().enumerate() {
                                let dst = &mut gw[(o * c + k) * inner..(o * c + k + 1) * inner];
                                for (d, &x) in dst.iter_mut().zip(go) {
                                    *d = x * vk;
                                }
                            }
                        }
                        put(&mut grads, *w, Tensor::new(shape.to_vec(), gw)?)?;
                    }
                    if nodes[*v].tracked {
                        let mut gv = vec![T::zero(); c];
                        for o in 0..outer {
                            let go = &g.data()[o * inner..(o + 1) * inner];
                            for (k, acc) in gv.iter_mut().enumerate() {
                                let src = &vw.data()[(o * c + k) * inner..(o * c + k + 1) * inner];
                                *acc += src.iter().zip(go).map(|(&a, &b)| a * b).sum::<T>();
                            }
                        }
                        put(&mut grads, *v, Tensor::from_vec(gv))?;
                    }
                }
                Op::Reshape(a) => {
                    put(&mut grads, *a, g.reshape(nodes[*a].value.shape())?)?;
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    put(&mut grads, *a, g.permute(&inv)?)?;
                }
                Op::Narrow { input, axis, start } => {
                    let x = &nodes[*input].value;
                    put(&mut grads, *input, scatter_narrow(&g, x.shape(), *axis, *start))?;
                }
                Op::Concat { inputs, axis } => {
                    let mut start = 0;
                    for &p in inputs {
                        let len = nodes[p].value.shape()[*axis];
                        if nodes[p].tracked {
                            put(&mut grads, p, g.narrow(*axis, start, len)?)?;
                        }
                        start += len;
                    }
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn binary_grads<T: Scalar>(
    kind: ElementwiseOp,
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = out.shape();
    let n = out.len();
    let mut ga = vec![T::zero(); n];
    let mut gb = vec![T::zero(); n];
    let (ad, bd, gd, od) = (a.data(), b.data(), g.data(), out.data());
    let mut k = 0;
    walk_broadcast3(shape, a, b, |_, ia, ib| {
        let gk = gd[k];
        let (x, y) = (ad[ia], bd[ib]);
        match kind {
            ElementwiseOp::Add => {
                ga[k] = gk;
                gb[k] = gk;
            }
            ElementwiseOp::Sub => {
                ga[k] = gk;
                gb[k] = -gk;
            }
            ElementwiseOp::Mul => {
                ga[k] = gk * y;
                gb[k] = gk * x;
            }
            ElementwiseOp::Div => {
                ga[k] = gk / y;
                gb[k] = -gk * od[k] / y;
            }
            _ => unreachable!("not a binary op"),
        }
        k += 1;
    });
    Ok((Tensor::new(shape.to_vec(), ga)?, Tensor::new(shape.to_vec(), gb)?))
}

fn unary_grad<T: Scalar>(kind: ElementwiseOp, g: &Tensor<T>, x: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let two = T::lit(2.0);
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .zip(y.data())
        .map(|((&gk, &xk), &yk)| match kind {
            ElementwiseOp::Exp => gk * yk,
            ElementwiseOp::Log => gk / xk,
            ElementwiseOp::Tanh => gk * (T::one() - yk * yk),
            ElementwiseOp::Relu => {
                if xk > T::zero() {
                    gk
                } else {
                    T::zero()
                }
            }
            ElementwiseOp::Square => gk * two * xk,
            ElementwiseOp::Sqrt => gk / (two * yk),
            ElementwiseOp::Negate => -gk,
            ElementwiseOp::Softplus => gk * sigmoid(xk),
            ElementwiseOp::Sigmoid => gk * yk * (T::one() - yk),
            ElementwiseOp::Abs => {
                if xk > T::zero() {
                    gk
                } else if xk < T::zero() {
                    -gk
                } else {
                    T::zero()
                }
            }
            _ => unreachable!("not a unary op"),
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn reduce_grad<T: Scalar>(
    kind: ReduceOp,
    g: &Tensor<T>,
    x: &Tensor<T>,
    out: &Tensor<T>,
    axes: &[usize],
) -> Result<Tensor<T>> {
    let kept = x.reduced_shape(axes, true)?;
    let g = g.reshape(&kept)?;
    let out = out.reshape(&kept)?;
    match kind {
        ReduceOp::Sum => g.broadcast_to(x.shape()),
        ReduceOp::Mean => {
            let count = T::from_usize_lossy(x.len() / numel(&kept));
            Ok(g.broadcast_to(x.shape())?.scale(T::one() / count))
        }
        ReduceOp::LogSumExp => {
            let w = x.zip_with(&out, "logsumexp", |xi, m| (xi - m).exp())?;
            w.mul(&g)
        }
        ReduceOp::Max => {
            // route to the first maximal element of each reduced slice
            let mut taken = vec![false; out.len()];
            let mut data = vec![T::zero(); x.len()];
            let mut k = 0;
            walk_broadcast3(x.shape(), x, &out, |_, _, io| {
                if !taken[io] && x.data()[k] == out.data()[io] {
                    taken[io] = true;
                    data[k] = g.data()[io];
                }
                k += 1;
            });
            Tensor::new(x.shape().to_vec(), data)
        }
    }
}

fn scatter_narrow<T: Scalar>(g: &Tensor<T>, shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    let d = shape[axis];
    let len = g.shape()[axis];
    let mut data = vec![T::zero(); numel(shape)];
    for o in 0..outer {
        let dst = o * d * inner + start * inner;
        let src = o * len * inner;
        data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::new(shape.to_vec(), data).expect("scatter shape")
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant(self.value().as_ref().clone())
    }

    fn same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if !std::ptr::eq(self.graph, other.graph) {
            return Err(contract("graph", "operands live on different graphs"));
        }
        Ok(())
    }

    pub fn elementwise(&self, kind: ElementwiseOp, other: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let a = self.value();
        match other {
            Some(b) => {
                self.same_graph(&b)?;
                let out = a.elementwise(kind, Some(b.value().as_ref()))?;
                let tracked = self.graph.tracked(self.id) || self.graph.tracked(b.id);
                Ok(self.graph.push(out, Op::Binary(kind, self.id, b.id), tracked))
            }
            None => {
                let out = a.elementwise(kind, None)?;
                Ok(self
                    .graph
                    .push(out, Op::Unary(kind, self.id), self.graph.tracked(self.id)))
            }
        }
    }

    fn unary(&self, kind: ElementwiseOp) -> Var<'g, T> {
        self.elementwise(kind, None).expect("total unary op")
    }

    pub fn add(&self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(ElementwiseOp::Add, Some(o))
    }

    pub fn sub(&self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(ElementwiseOp::Sub, Some(o))
    }

    pub fn mul(&self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(ElementwiseOp::Mul, Some(o))
    }

    pub fn div(&self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(ElementwiseOp::Div, Some(o))
    }

    pub fn exp(&self) -> Var<'g, T> {
        self.unary(ElementwiseOp::Exp)
    }

    pub fn log(&self) -> Result<Var<'g, T>> {
        self.elementwise(ElementwiseOp::Log, None)
    }

    pub fn sqrt(&self) -> Result<Var<'g, T>> {
        self.elementwise(ElementwiseOp::Sqrt, None)
    }

    pub fn tanh(&self) -> Var<'g, T> {
        self.unary(ElementwiseOp::Tanh)
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(ElementwiseOp::Relu)
    }

    pub fn square(&self) -> Var<'g, T> {
        self.unary(ElementwiseOp::Square)
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.unary(ElementwiseOp::Negate)
    }

    pub fn softplus(&self) -> Var<'g, T> {
        self.unary(ElementwiseOp::Softplus)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(ElementwiseOp::Sigmoid)
    }

    pub fn abs(&self) -> Var<'g, T> {
        self.unary(ElementwiseOp::Abs)
    }

    pub fn add_scalar(&self, c: T) -> Var<'g, T> {
        let out = self.value().map(|x| x + c);
        self.graph
            .push(out, Op::AddScalar(self.id), self.graph.tracked(self.id))
    }

    pub fn mul_scalar(&self, c: T) -> Var<'g, T> {
        let out = self.value().scale(c);
        self.graph
            .push(out, Op::MulScalar(self.id, c), self.graph.tracked(self.id))
    }

    /// `lo + relu(x - lo)`: identity above `lo`, flat below.
    pub fn clamp_min(&self, lo: T) -> Var<'g, T> {
        self.add_scalar(-lo).relu().add_scalar(lo)
    }

    pub fn reduce(&self, kind: ReduceOp, axes: &[usize], keepdims: bool) -> Result<Var<'g, T>> {
        let out = self.value().reduce(kind, axes, keepdims)?;
        Ok(self.graph.push(
            out,
            Op::Reduce {
                kind,
                input: self.id,
                axes: axes.to_vec(),
            },
            self.graph.tracked(self.id),
        ))
    }

    pub fn sum(&self, axes: &[usize], keepdims: bool) -> Result<Var<'g, T>> {
        self.reduce(ReduceOp::Sum, axes, keepdims)
    }

    pub fn mean(&self, axes: &[usize], keepdims: bool) -> Result<Var<'g, T>> {
        self.reduce(ReduceOp::Mean, axes, keepdims)
    }

    pub fn logsumexp(&self, axes: &[usize], keepdims: bool) -> Result<Var<'g, T>> {
        self.reduce(ReduceOp::LogSumExp, axes, keepdims)
    }

    /// Sum over every axis, giving a rank-0 tensor.
    pub fn sum_all(&self) -> Var<'g, T> {
        let axes: Vec<usize> = (0..self.value().ndim()).collect();
        self.sum(&axes, false).expect("all axes valid")
    }

    pub fn mean_all(&self) -> Var<'g, T> {
        let axes: Vec<usize> = (0..self.value().ndim()).collect();
        self.mean(&axes, false).expect("all axes valid")
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g, T>> {
        let lse = self.logsumexp(&[axis], true)?;
        Ok(self.sub(lse)?.exp())
    }

    pub fn matmul(&self, o: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&o)?;
        let out = self.value().matmul(o.value().as_ref())?;
        let tracked = self.graph.tracked(self.id) || self.graph.tracked(o.id);
        Ok(self.graph.push(out, Op::MatMul(self.id, o.id), tracked))
    }

    pub fn mode_contract(&self, v: Var<'g, T>, mode: usize) -> Result<Var<'g, T>> {
        self.same_graph(&v)?;
        let out = self.value().mode_contract(v.value().as_ref(), mode)?;
        let tracked = self.graph.tracked(self.id) || self.graph.tracked(v.id);
        Ok(self.graph.push(
            out,
            Op::ModeContract {
                w: self.id,
                v: v.id,
                mode,
            },
            tracked,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self
            .graph
            .push(out, Op::Reshape(self.id), self.graph.tracked(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g, T>> {
        let out = self.value().permute(perm)?;
        Ok(self.graph.push(
            out,
            Op::Permute(self.id, perm.to_vec()),
            self.graph.tracked(self.id),
        ))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let out = self.value().narrow(axis, start, len)?;
        Ok(self.graph.push(
            out,
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
            self.graph.tracked(self.id),
        ))
    }

    /// Single entry `[i, j]` of a matrix, as a rank-0 value.
    pub fn entry2(&self, i: usize, j: usize) -> Result<Var<'g, T>> {
        self.narrow(0, i, 1)?.narrow(1, j, 1)?.reshape(&[])
    }
}

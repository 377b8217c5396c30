//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`] handles in creation
//! order, which is already a topological order. [`Graph::backward`] walks
//! the tape once in reverse and returns the gradients of every node that
//! requires one. A fresh graph is built for each forward pass.

mod check;

pub use check::{grad_check, grad_check_many, GradCheckReport, GradFailure};

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, BatchStats, Conv3dSpec};
use crate::tensor::{broadcast, invert_perm, Scalar, Tensor};
use std::cell::RefCell;
use std::rc::Rc;

enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, S),
    Offset(usize),
    Relu(usize),
    Sqrt(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Conv3d {
        x: usize,
        w: usize,
        spec: Conv3dSpec,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<S>,
        inv_std: Vec<S>,
        train: bool,
    },
    LayerNorm {
        x: usize,
        axis: usize,
        xhat: Tensor<S>,
        inv_std: Vec<S>,
    },
    AvgPool {
        x: usize,
        k: usize,
        stride: usize,
    },
    /// Scalar output whose partial derivatives were computed in the forward
    /// pass (fused dynamic programs).
    Fused {
        name: &'static str,
        partials: Vec<(usize, Tensor<S>)>,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Relu(_) => "relu",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Conv3d { .. } => "conv3d",
            Op::Linear { .. } => "linear",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::AvgPool { .. } => "avg_pool_spatial",
            Op::Fused { name, .. } => name,
        }
    }
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
    label: Option<String>,
}

/// The operation tape.
pub struct Graph<S: Scalar = f32> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one recorded value.
#[derive(Clone, Copy)]
pub struct Var<'g, S: Scalar = f32> {
    id: usize,
    graph: &'g Graph<S>,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, S> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with the given running `(mean, var)`.
    Eval(&'a [S], &'a [S]),
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            label: None,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn record(&self, value: Tensor<S>, op: Op<S>, inputs: &[usize]) -> Var<'_, S> {
        let rg = self.requires(inputs);
        self.push(value, op, rg)
    }

    /// Records a scalar computed outside the tape together with its partial
    /// derivatives with respect to `inputs`.
    pub fn fused_scalar<'g>(
        &'g self,
        name: &'static str,
        value: S,
        partials: Vec<(Var<'g, S>, Tensor<S>)>,
    ) -> Result<Var<'g, S>> {
        let mut ids = Vec::with_capacity(partials.len());
        let mut stored = Vec::with_capacity(partials.len());
        for (v, p) in partials {
            if v.shape() != p.shape() {
                return Err(Error::config(format!(
                    "{name}: partial shape {:?} differs from input {:?}",
                    p.shape(),
                    v.shape()
                )));
            }
            ids.push(v.id);
            stored.push((v.id, p));
        }
        Ok(self.record(
            Tensor::scalar(value),
            Op::Fused {
                name,
                partials: stored,
            },
            &ids,
        ))
    }

    /// Label of the first node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.all_finite()).then(|| match &n.label {
                Some(l) => l.clone(),
                None => format!("{}#{i}", n.op.name()),
            })
        })
    }

    /// Values of the nodes whose label ends with `suffix`, in tape order.
    pub fn labelled(&self, suffix: &str) -> Vec<(String, Rc<Tensor<S>>)> {
        self.nodes
            .borrow()
            .iter()
            .filter_map(|n| {
                let l = n.label.as_ref()?;
                l.ends_with(suffix).then(|| (l.clone(), Rc::clone(&n.value)))
            })
            .collect()
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.id] = Some(Tensor::full(
            nodes[root.id].value.shape().to_vec(),
            S::one(),
        ));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut acc = |target: usize, contrib: Tensor<S>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                            *e += *c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            };
            let val = |i: usize| Rc::clone(&nodes[i].value);
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, broadcast::reduce_to(&g, val(*a).shape()));
                    acc(*b, broadcast::reduce_to(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, broadcast::reduce_to(&g, val(*a).shape()));
                    acc(*b, broadcast::reduce_to(&g, val(*b).shape()).map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        acc(*a, broadcast::mul_reduce(&g, &vb, va.shape()));
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, broadcast::mul_reduce(&g, &va, vb.shape()));
                    }
                }
                Op::Neg(a) => acc(*a, g.map(|v| -v)),
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.map(|v| v * c));
                }
                Op::Offset(a) | Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, g.clone().into_shape(shape)?);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    acc(
                        *a,
                        g.zip_map(&x, |gv, xv| if xv > S::zero() { gv } else { S::zero() })?,
                    );
                }
                Op::Sqrt(a) => {
                    let half = S::cast(0.5);
                    acc(
                        *a,
                        g.zip_map(&node.value, |gv, y| {
                            if y > S::zero() {
                                gv * half / y
                            } else {
                                S::zero()
                            }
                        })?,
                    );
                }
                Op::Square(a) => {
                    let two = S::cast(2.0);
                    acc(*a, g.zip_map(&val(*a), |gv, x| gv * two * x)?);
                }
                Op::Sum(a) => {
                    let x = val(*a);
                    acc(*a, Tensor::full(x.shape().to_vec(), g.item()));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let n = S::cast(x.len().max(1) as f64);
                    acc(*a, Tensor::full(x.shape().to_vec(), g.item() / n));
                }
                Op::Permute(a, perm) => acc(*a, g.permute(&invert_perm(perm))?),
                Op::Narrow { x, axis, start } => {
                    let shape = val(*x).shape().to_vec();
                    acc(*x, scatter_narrow(&g, &shape, *axis, *start));
                }
                Op::Conv3d { x, w, spec } => {
                    let (gx, gw) = kernels::conv3d_backward(
                        &val(*x),
                        &val(*w),
                        *spec,
                        &g,
                        nodes[*x].requires_grad,
                        nodes[*w].requires_grad,
                    )?;
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(*w, gw);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) =
                        kernels::linear_backward(&val(*x), &val(*w), &g, b.is_some())?;
                    acc(*x, gx);
                    acc(*w, gw);
                    if let (Some(b), Some(gb)) = (b, gb) {
                        acc(*b, gb);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (gx, gg, gb) =
                        kernels::batch_norm_backward(xhat, inv_std, &val(*gamma), &g, *train)?;
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
                Op::LayerNorm {
                    x,
                    axis,
                    xhat,
                    inv_std,
                } => acc(*x, kernels::layer_norm_backward(xhat, inv_std, *axis, &g)?),
                Op::AvgPool { x, k, stride } => {
                    let shape = val(*x).shape().to_vec();
                    acc(*x, kernels::avg_pool_backward(&shape, *k, *stride, &g)?);
                }
                Op::Fused { partials, .. } => {
                    let gs = g.item();
                    for (i, p) in partials {
                        acc(*i, p.map(|v| v * gs));
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn scatter_narrow<S: Scalar>(g: &Tensor<S>, shape: &[usize], axis: usize, start: usize) -> Tensor<S> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let (dim, len) = (shape[axis], g.shape()[axis]);
    let mut out = Tensor::zeros(shape.to_vec());
    let gd = g.data();
    let od = out.data_mut();
    for o in 0..outer {
        let dst = (o * dim + start) * inner;
        od[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

/// Gradients produced by one reverse pass, indexed by variable.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when `v` does not influence the root or needs no gradient.
    pub fn get(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it.
    pub fn get_or_zeros(&self, v: Var<'_, S>) -> Tensor<S> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Attaches a name used in non-finite diagnostics.
    pub fn named(self, label: impl Into<String>) -> Self {
        self.graph.nodes.borrow_mut()[self.id].label = Some(label.into());
        self
    }

    fn unary(self, value: Tensor<S>, op: Op<S>) -> Self {
        self.graph.record(value, op, &[self.id])
    }

    fn same_graph(&self, other: &Var<'g, S>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "variables belong to different graphs"
        );
    }

    pub fn add(self, other: Var<'g, S>) -> Result<Self> {
        self.same_graph(&other);
        let v = broadcast::binary(&self.value(), &other.value(), |a, b| a + b)?;
        Ok(self.graph.record(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'g, S>) -> Result<Self> {
        self.same_graph(&other);
        let v = broadcast::binary(&self.value(), &other.value(), |a, b| a - b)?;
        Ok(self.graph.record(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'g, S>) -> Result<Self> {
        self.same_graph(&other);
        let v = broadcast::binary(&self.value(), &other.value(), |a, b| a * b)?;
        Ok(self.graph.record(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn neg(self) -> Self {
        let v = self.value().map(|x| -x);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn scale(self, c: S) -> Self {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn offset(self, c: S) -> Self {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Offset(self.id))
    }

    pub fn relu(self) -> Self {
        let v = self.value().map(|x| if x > S::zero() { x } else { S::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sqrt(self) -> Self {
        let v = self.value().map(|x| x.sqrt());
        self.unary(v, Op::Sqrt(self.id))
    }

    pub fn square(self) -> Self {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        let v = self.value().permute(perm)?;
        Ok(self.unary(v, Op::Permute(self.id, perm.to_vec())))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let v = self.value().narrow(axis, start, len)?;
        Ok(self.unary(v, Op::Narrow { x: self.id, axis, start }))
    }

    pub fn conv3d(self, weight: Var<'g, S>, spec: Conv3dSpec) -> Result<Self> {
        self.same_graph(&weight);
        let v = kernels::conv3d_forward(&self.value(), &weight.value(), spec)?;
        Ok(self.graph.record(
            v,
            Op::Conv3d {
                x: self.id,
                w: weight.id,
                spec,
            },
            &[self.id, weight.id],
        ))
    }

    pub fn linear(self, weight: Var<'g, S>, bias: Option<Var<'g, S>>) -> Result<Self> {
        self.same_graph(&weight);
        let bv = bias.map(|b| b.value());
        let v = kernels::linear_forward(&self.value(), &weight.value(), bv.as_deref())?;
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        Ok(self.graph.record(
            v,
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
            },
            &ids,
        ))
    }

    /// Batch normalization over axis 1. In train mode also returns the batch
    /// statistics so the caller can update its running estimates.
    pub fn batch_norm(
        self,
        gamma: Var<'g, S>,
        beta: Var<'g, S>,
        mode: NormMode<'_, S>,
        eps: S,
    ) -> Result<(Self, Option<BatchStats<S>>)> {
        let running = match mode {
            NormMode::Train => None,
            NormMode::Eval(m, v) => Some((m, v)),
        };
        let out = kernels::batch_norm_forward(
            &self.value(),
            &gamma.value(),
            &beta.value(),
            running,
            eps,
        )?;
        let var = self.graph.record(
            out.y,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: out.xhat,
                inv_std: out.inv_std,
                train: running.is_none(),
            },
            &[self.id, gamma.id, beta.id],
        );
        Ok((var, out.stats))
    }

    /// Parameter-free normalization along `axis`.
    pub fn layer_norm(self, axis: usize, eps: S) -> Result<Self> {
        let (y, inv_std) = kernels::layer_norm_forward(&self.value(), axis, eps)?;
        let xhat = y.clone();
        Ok(self.unary(
            y,
            Op::LayerNorm {
                x: self.id,
                axis,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn avg_pool_spatial(self, k: usize, stride: usize) -> Result<Self> {
        let v = kernels::avg_pool_forward(&self.value(), k, stride)?;
        Ok(self.unary(v, Op::AvgPool { x: self.id, k, stride }))
    }
}

//! Reverse-mode differentiation over a recorded operator graph.
//!
//! A [`Graph`] is an append-only list of [`DiffNode`]s. Every operator
//! evaluates eagerly, records its parents and the data its backward rule
//! needs, and returns a [`Var`] handle. [`Graph::backward`] walks the list
//! in reverse and accumulates gradients into every node that requires one.
//! Nodes that do not depend on a differentiable leaf never get gradient
//! storage.

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvParams};
use crate::ops::sampling::{PoolPlan, ResizePlan};
use crate::stereo;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed per-element derivative of the class-balanced cross-entropy.
#[derive(Clone, Debug)]
pub(crate) struct BceGrad<T> {
    pub(crate) dpred: Tensor<T>,
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Conv2d(ConvParams),
    Relu,
    Sigmoid,
    Exp,
    Abs,
    Neg,
    Scale(T),
    Offset,
    Add,
    Sub,
    Mul,
    Pool(PoolPlan),
    Resize(ResizePlan),
    Concat(Vec<usize>),
    Sum,
    Mean,
    Correlation(usize),
    Warp,
    DiffX,
    DiffY,
    Bce(BceGrad<T>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d(_) => "conv2d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Abs => "abs",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Offset => "offset",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Pool(_) => "avg_pool",
            Op::Resize(_) => "bilinear_resize",
            Op::Concat(_) => "concat_channels",
            Op::Sum => "sum",
            Op::Mean => "reduce_mean",
            Op::Correlation(_) => "correlation1d",
            Op::Warp => "warp_right_to_left",
            Op::DiffX => "diff_x",
            Op::DiffY => "diff_y",
            Op::Bce(_) => "class_balanced_bce",
        }
    }
}

/// A recorded value with the rule that maps its output gradient back to
/// its parents.
#[derive(Clone, Debug)]
pub struct DiffNode<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T: Scalar> DiffNode<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn parents(&self) -> &[Var] {
        &self.parents
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<DiffNode<T>>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if the leaf does not require one or the
    /// output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &DiffNode<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(DiffNode {
            value,
            parents: Vec::new(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, op: Op<T>, parents: Vec<Var>, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(DiffNode {
            value,
            parents,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, op: Op<T>, x: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, vec![x], value)
    }

    fn binary(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f).map_err(|_| {
            Error::shape(
                op.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            )
        })?;
        self.push(op, vec![a, b], value)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, p: ConvParams) -> Result<Var> {
        let value = conv::conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            p,
        )?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(Op::Conv2d(p), parents, value)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu, x, |v| v.max(T::zero()))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, x, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp, x, T::exp)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Abs, x, T::abs)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Neg, x, |v| -v)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let c = T::of(factor);
        self.unary(Op::Scale(c), x, |v| v * c)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, amount: f64) -> Result<Var> {
        let c = T::of(amount);
        self.unary(Op::Offset, x, |v| v + c)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let [_, _, h, w] = self.value(x).dims4()?;
        let plan = PoolPlan::fixed(h, w, kernel, stride)?;
        self.pool(x, plan)
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [_, _, h, w] = self.value(x).dims4()?;
        let plan = PoolPlan::adaptive(h, w, out_h, out_w)?;
        self.pool(x, plan)
    }

    fn pool(&mut self, x: Var, plan: PoolPlan) -> Result<Var> {
        let value = plan.forward(self.value(x))?;
        self.push(Op::Pool(plan), vec![x], value)
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [_, _, h, w] = self.value(x).dims4()?;
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let plan = ResizePlan::new(h, w, out_h, out_w)?;
        let value = plan.forward(self.value(x))?;
        self.push(Op::Resize(plan), vec![x], value)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat_channels"))?;
        let [b, _, h, w] = self.value(first).dims4()?;
        let mut extents = Vec::with_capacity(xs.len());
        for &x in xs {
            let [bx, cx, hx, wx] = self.value(x).dims4()?;
            if (bx, hx, wx) != (b, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(x), self.shape(first)),
                ));
            }
            extents.push(cx);
        }
        let channels: usize = extents.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * channels * plane);
        for bi in 0..b {
            for (&x, &c) in xs.iter().zip(&extents) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[b, channels, h, w], data)?;
        self.push(Op::Concat(extents), xs.to_vec(), value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], value)
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean()?);
        self.push(Op::Mean, vec![x], value)
    }

    /// Propagates gradients from a scalar `root` and returns the gradients
    /// of every differentiable leaf that `root` depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NotScalar(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let parent_grads = self.parent_grads(node, &g)?;
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.shape(*p), "{}", node.op.name());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn parent_grads(&self, node: &DiffNode<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let pv = |k: usize| self.value(node.parents[k]);
        let needs = |k: usize| self.requires_grad(node.parents[k]);
        let zero = T::zero();
        let grads = match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d(p) => {
                let has_bias = node.parents.len() == 3;
                let r = conv::conv2d_backward(
                    pv(0),
                    pv(1),
                    g,
                    *p,
                    [needs(0), needs(1), has_bias && needs(2)],
                )?;
                let mut out = vec![r.input, r.weight];
                if has_bias {
                    out.push(r.bias);
                }
                out
            }
            Op::Relu => vec![Some(pv(0).zip_map(g, |x, g| if x > zero { g } else { zero })?)],
            Op::Sigmoid => {
                vec![Some(node.value.zip_map(g, |y, g| g * y * (T::one() - y))?)]
            }
            Op::Exp => vec![Some(node.value.zip_map(g, |y, g| g * y)?)],
            Op::Abs => vec![Some(pv(0).zip_map(g, |x, g| {
                if x > zero {
                    g
                } else if x < zero {
                    -g
                } else {
                    zero
                }
            })?)],
            Op::Neg => vec![Some(g.map(|v| -v))],
            Op::Scale(c) => vec![Some(g.map(|v| v * *c))],
            Op::Offset => vec![Some(g.clone())],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => vec![
                needs(0).then(|| pv(1).zip_map(g, |b, g| b * g)).transpose()?,
                needs(1).then(|| pv(0).zip_map(g, |a, g| a * g)).transpose()?,
            ],
            Op::Pool(plan) => vec![Some(plan.backward(pv(0).shape(), g))],
            Op::Resize(plan) => vec![Some(plan.backward(pv(0).shape(), g))],
            Op::Concat(extents) => split_channels(g, extents)?.into_iter().map(Some).collect(),
            Op::Sum => vec![Some(Tensor::full(pv(0).shape(), g.item()))],
            Op::Mean => {
                let n = T::of(pv(0).len() as f64);
                vec![Some(Tensor::full(pv(0).shape(), g.item() / n))]
            }
            Op::Correlation(max_disp) => {
                let (dl, dr) = stereo::correlation_backward(pv(0), pv(1), g, *max_disp)?;
                vec![Some(dl), Some(dr)]
            }
            Op::Warp => {
                let (dright, ddisp) = stereo::warp_backward(pv(0), pv(1), g)?;
                vec![Some(dright), Some(ddisp)]
            }
            Op::DiffX => vec![Some(stereo::diff_x_adjoint(g)?)],
            Op::DiffY => vec![Some(stereo::diff_y_adjoint(g)?)],
            Op::Bce(terms) => {
                let s = g.item();
                vec![Some(terms.dpred.map(|d| d * s))]
            }
        };
        Ok(grads)
    }
}

/// Splits a channel-concatenated gradient back into per-input pieces.
fn split_channels<T: Scalar>(g: &Tensor<T>, extents: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [b, c, h, w] = g.dims4()?;
    debug_assert_eq!(c, extents.iter().sum::<usize>());
    let plane = h * w;
    let mut pieces: Vec<Vec<T>> = extents
        .iter()
        .map(|&ci| Vec::with_capacity(b * ci * plane))
        .collect();
    for bi in 0..b {
        let mut offset = bi * c * plane;
        for (piece, &ci) in pieces.iter_mut().zip(extents) {
            piece.extend_from_slice(&g.data()[offset..offset + ci * plane]);
            offset += ci * plane;
        }
    }
    pieces
        .into_iter()
        .zip(extents)
        .map(|(data, &ci)| Tensor::new(&[b, ci, h, w], data))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new(&[2], vec![0.3, -7.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient_storage() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[2], 3.0));
        let b = g.variable(Tensor::full(&[2], 2.0));
        let p = g.mul(a, b).unwrap();
        assert!(g.requires_grad(p));
        let c2 = g.exp(a).unwrap();
        assert!(!g.requires_grad(c2));
        let s = g.reduce_mean(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::full(&[2, 2], 1.0));
        let z = g.scale(x, 0.0).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_backward_splits_exactly() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64));
        let b = g.variable(Tensor::from_fn(&[2, 3, 2, 2], |i| -(i as f64)));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 2, 2]);
        let weights = g.constant(Tensor::from_fn(&[2, 4, 2, 2], |i| i as f64 * 0.5));
        let m = g.mul(c, weights).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        // batch 1, channel 0 of the concatenation starts at offset 16
        assert_eq!(grads.get(a).unwrap().data()[4], 16.0 * 0.5);
        assert_eq!(grads.get(b).unwrap().data()[0], 4.0 * 0.5);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1], 100.0));
        let e = g.exp(x);
        assert!(matches!(e, Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::zeros(&[2]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
    }
}

//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations append nodes holding their forward value; `backward` replays the
//! tape in reverse, accumulating vector-Jacobian products. Nodes are addressed
//! by [`NodeId`] and are valid only on the tape that created them.

use crate::error::{Error, Result};
use crate::tensor::ops::{
    concat_channels, conv2d, conv2d_grad_input, conv2d_grad_kernel, downsample, slice_channels,
    upsample_zero, Padding,
};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, k: NodeId, pad: Padding, stride: usize },
    Conv2dT { x: NodeId, k: NodeId, pad: Padding, stride: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    Abs { a: NodeId },
    Down { a: NodeId, f: usize },
    Up { a: NodeId, f: usize },
    ConcatC { parts: Vec<NodeId> },
    SumAll { a: NodeId },
    Reshape { a: NodeId },
}

/// Linear Wengert tape. Cleared or dropped, it releases every stored
/// intermediate value and gradient.
pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires: bool) -> NodeId {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        NodeId(self.values.len() - 1)
    }

    /// Register an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    /// Copy a node's value onto a fresh constant leaf, cutting the gradient
    /// path through it.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.values[id.0].clone();
        self.constant(v)
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, pad: Padding, stride: usize) -> Result<NodeId> {
        let v = conv2d(&self.values[x.0], &self.values[k.0], pad, stride)?;
        let req = self.requires[x.0] || self.requires[k.0];
        Ok(self.push(v, Op::Conv2d { x, k, pad, stride }, req))
    }

    /// Transposed convolution: the adjoint of [`Tape::conv2d`] with the same
    /// kernel, mapping `[n, co, oh, ow]` up to `[n, ci, out_h, out_w]`.
    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        k: NodeId,
        pad: Padding,
        stride: usize,
        out_hw: (usize, usize),
    ) -> Result<NodeId> {
        let v = conv2d_grad_input(&self.values[x.0], &self.values[k.0], pad, stride, out_hw)?;
        let req = self.requires[x.0] || self.requires[k.0];
        Ok(self.push(v, Op::Conv2dT { x, k, pad, stride }, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].add(&self.values[b.0])?;
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(v, Op::Add { a, b }, req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].sub(&self.values[b.0])?;
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(v, Op::Sub { a, b }, req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].mul(&self.values[b.0])?;
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(v, Op::Mul { a, b }, req))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.values[a.0].scale(c);
        let req = self.requires[a.0];
        self.push(v, Op::Scale { a, c }, req)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].relu();
        let req = self.requires[a.0];
        self.push(v, Op::Relu { a }, req)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].abs();
        let req = self.requires[a.0];
        self.push(v, Op::Abs { a }, req)
    }

    pub fn downsample(&mut self, a: NodeId, f: usize) -> Result<NodeId> {
        let v = downsample(&self.values[a.0], f)?;
        let req = self.requires[a.0];
        Ok(self.push(v, Op::Down { a, f }, req))
    }

    pub fn upsample_zero(&mut self, a: NodeId, f: usize) -> Result<NodeId> {
        let v = upsample_zero(&self.values[a.0], f)?;
        let req = self.requires[a.0];
        Ok(self.push(v, Op::Up { a, f }, req))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| &self.values[p.0]).collect();
        let v = concat_channels(&tensors)?;
        let req = parts.iter().any(|p| self.requires[p.0]);
        Ok(self.push(v, Op::ConcatC { parts: parts.to_vec() }, req))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.values[a.0].reshaped(shape)?;
        let req = self.requires[a.0];
        Ok(self.push(v, Op::Reshape { a }, req))
    }

    /// Sum of all elements as a rank-1 scalar tensor.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.values[a.0].data().iter().map(|&v| v.to_f64()).sum();
        let req = self.requires[a.0];
        self.push(Tensor::scalar(T::from_f64(s)), Op::SumAll { a }, req)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a.0].numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean absolute value of `a - b`.
    pub fn mean_abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d);
        Ok(self.mean_all(ad))
    }

    /// Mean squared value of `a - b`.
    pub fn mean_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    fn acc_into(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
        match slot {
            Some(existing) => existing.add_assign(&g),
            None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Drop every node, gradient and stored intermediate.
    pub fn clear(&mut self) {
        self.values.clear();
        self.grads.clear();
        self.ops.clear();
        self.requires.clear();
    }

    /// Reverse sweep from a scalar `loss` node. Each sweep propagates through a
    /// private workspace and then adds into the persistent buffers, so repeated
    /// sweeps without [`Tape::zero_grads`] accumulate additively.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::dim(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        if !self.requires[loss.0] {
            return Err(Error::arg(
                "backward: loss does not depend on any gradient-tracked leaf",
            ));
        }
        let mut work: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        let seed = Tensor::from_vec(self.values[loss.0].shape().to_vec(), vec![T::one()])?;
        Self::acc_into(&mut work[loss.0], seed)?;

        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let gy = match &work[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.ops[i].clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, k, pad, stride } => {
                    if self.requires[x.0] {
                        let (_, _, h, w) = self.values[x.0].dims4()?;
                        let gx = conv2d_grad_input(&gy, &self.values[k.0], pad, stride, (h, w))?;
                        Self::acc_into(&mut work[x.0], gx)?;
                    }
                    if self.requires[k.0] {
                        let (co, ci, kh, kw) = self.values[k.0].dims4()?;
                        let gk = conv2d_grad_kernel(
                            &self.values[x.0],
                            &gy,
                            pad,
                            stride,
                            (co, ci, kh, kw),
                        )?;
                        Self::acc_into(&mut work[k.0], gk)?;
                    }
                }
                Op::Conv2dT { x, k, pad, stride } => {
                    if self.requires[x.0] {
                        // Forward was the adjoint, so the VJP is the plain conv.
                        let gx = conv2d(&gy, &self.values[k.0], pad, stride)?;
                        Self::acc_into(&mut work[x.0], gx)?;
                    }
                    if self.requires[k.0] {
                        let (co, ci, kh, kw) = self.values[k.0].dims4()?;
                        // Same contraction as the conv kernel gradient with the
                        // roles of input and upstream exchanged.
                        let gk = conv2d_grad_kernel(
                            &gy,
                            &self.values[x.0],
                            pad,
                            stride,
                            (co, ci, kh, kw),
                        )?;
                        Self::acc_into(&mut work[k.0], gk)?;
                    }
                }
                Op::Add { a, b } => {
                    if self.requires[a.0] {
                        Self::acc_into(&mut work[a.0], gy.clone())?;
                    }
                    if self.requires[b.0] {
                        Self::acc_into(&mut work[b.0], gy)?;
                    }
                }
                Op::Sub { a, b } => {
                    if self.requires[a.0] {
                        Self::acc_into(&mut work[a.0], gy.clone())?;
                    }
                    if self.requires[b.0] {
                        Self::acc_into(&mut work[b.0], gy.scale(-1.0))?;
                    }
                }
                Op::Mul { a, b } => {
                    if self.requires[a.0] {
                        let ga = gy.mul(&self.values[b.0])?;
                        Self::acc_into(&mut work[a.0], ga)?;
                    }
                    if self.requires[b.0] {
                        let gb = gy.mul(&self.values[a.0])?;
                        Self::acc_into(&mut work[b.0], gb)?;
                    }
                }
                Op::Scale { a, c } => {
                    if self.requires[a.0] {
                        Self::acc_into(&mut work[a.0], gy.scale(c))?;
                    }
                }
                Op::Relu { a } => {
                    if self.requires[a.0] {
                        let ga = gy.zip_map(
                            &self.values[a.0],
                            |g, x| if x > T::zero() { g } else { T::zero() },
                            "relu backward",
                        )?;
                        Self::acc_into(&mut work[a.0], ga)?;
                    }
                }
                Op::Abs { a } => {
                    if self.requires[a.0] {
                        let ga = gy.zip_map(
                            &self.values[a.0],
                            |g, x| {
                                if x > T::zero() {
                                    g
                                } else if x < T::zero() {
                                    -g
                                } else {
                                    T::zero()
                                }
                            },
                            "abs backward",
                        )?;
                        Self::acc_into(&mut work[a.0], ga)?;
                    }
                }
                Op::Down { a, f } => {
                    if self.requires[a.0] {
                        Self::acc_into(&mut work[a.0], upsample_zero(&gy, f)?)?;
                    }
                }
                Op::Up { a, f } => {
                    if self.requires[a.0] {
                        Self::acc_into(&mut work[a.0], downsample(&gy, f)?)?;
                    }
                }
                Op::ConcatC { parts } => {
                    let mut c0 = 0;
                    for p in parts {
                        let pc = self.values[p.0].shape()[1];
                        if self.requires[p.0] {
                            let gp = slice_channels(&gy, c0, c0 + pc)?;
                            Self::acc_into(&mut work[p.0], gp)?;
                        }
                        c0 += pc;
                    }
                }
                Op::SumAll { a } => {
                    if self.requires[a.0] {
                        let g = gy.data()[0];
                        let shape = self.values[a.0].shape().to_vec();
                        Self::acc_into(&mut work[a.0], Tensor::full(&shape, g))?;
                    }
                }
                Op::Reshape { a } => {
                    if self.requires[a.0] {
                        let ga = gy.reshaped(self.values[a.0].shape())?;
                        Self::acc_into(&mut work[a.0], ga)?;
                    }
                }
            }
        }
        for (slot, w) in self.grads.iter_mut().zip(work) {
            if let Some(g) = w {
                Self::acc_into(slot, g)?;
            }
        }
        Ok(())
    }
}

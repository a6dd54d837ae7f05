//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every intermediate value in evaluation order, so node
//! inputs always precede the node itself and the backward sweep is a single
//! reverse pass. Parameters enter as leaf nodes tagged with their [`ParamId`];
//! a parameter used by several leaves (weight-shared branches) receives the sum
//! of all their gradients.

use std::collections::BTreeMap;

use rand::Rng;

use super::ops::{self, ConvSpec};
use super::{ParamId, Parameters, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    },
    Relu(NodeId),
    Concat(NodeId, NodeId),
    GlobalAvgPool(NodeId),
    FullyConnected {
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Abs(NodeId),
    Sum(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Per-parameter gradients produced by a backward sweep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add_to(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.accumulate(grad),
            None => {
                self.grads.insert(id, grad.clone());
                Ok(())
            }
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) -> Result<()> {
        for (id, g) in other.iter() {
            self.add_to(id, g)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Fills in zero gradients for parameters the loss never touched.
    pub fn complete(mut self, params: &Parameters) -> Self {
        for (id, _, t) in params.iter() {
            self.grads
                .entry(id)
                .or_insert_with(|| Tensor::zeros(t.shape()));
        }
        self
    }
}

#[derive(Clone, Debug, Default)]
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Signs of every ReLU and absolute-value input, in evaluation order.
    /// Two evaluations with equal patterns lie on the same smooth piece, which
    /// is what a finite-difference check needs to know.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::Abs(x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; it receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, params: &Parameters, id: ParamId) -> NodeId {
        self.push(Op::Param(id), params.get(id).clone())
    }

    pub fn conv(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let value = ops::conv(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        Ok(self.push(
            Op::Conv {
                input,
                kernel,
                bias,
                spec,
            },
            value,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = ops::relu(self.value(input));
        self.push(Op::Relu(input), value)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat(a, b), value))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(Op::GlobalAvgPool(input), value))
    }

    pub fn fully_connected(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let value = ops::fully_connected(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
        )?;
        Ok(self.push(
            Op::FullyConnected {
                input,
                weights,
                bias,
            },
            value,
        ))
    }

    /// Inverted dropout. Outside training, or at rate 0, this is the identity
    /// and records no node.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: NodeId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let x = self.value(input);
        let mask = ops::dropout_mask(x.len(), rate, rng)?;
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { input, mask }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).scale(factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
            .expect("a tensor always matches its own shape")
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), value)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Gradients of a scalar `loss` node with respect to every parameter leaf
    /// it depends on.
    pub fn backpropagate(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backpropagate needs a scalar loss, got shape {shape:?}"
            )));
        }
        self.backward_from(loss, Tensor::full(shape, 1.0))
    }

    /// Backward sweep seeded with an arbitrary upstream gradient for `node`.
    /// This is what lets a caller chain several graphs through a scalar it
    /// combines outside the graph.
    pub fn backward_from(&self, node: NodeId, seed: Tensor) -> Result<Gradients> {
        self.value(node).expect_same_shape(&seed)?;
        let mut adjoint: Vec<Option<Tensor>> = vec![None; node.0 + 1];
        adjoint[node.0] = Some(seed);
        let mut grads = Gradients::new();

        fn push_grad(adjoint: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
            match &mut adjoint[id.0] {
                Some(acc) => acc.accumulate(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for idx in (0..=node.0).rev() {
            let Some(upstream) = adjoint[idx].take() else {
                continue;
            };
            let n = &self.nodes[idx];
            match &n.op {
                Op::Input => {}
                Op::Param(pid) => grads.add_to(*pid, &upstream)?,
                Op::Conv {
                    input,
                    kernel,
                    bias,
                    spec,
                } => {
                    let g = ops::conv_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &upstream,
                        *spec,
                    )?;
                    push_grad(&mut adjoint, *input, g.input)?;
                    push_grad(&mut adjoint, *kernel, g.kernel)?;
                    if let Some(b) = bias {
                        push_grad(&mut adjoint, *b, g.bias)?;
                    }
                }
                Op::Relu(a) => {
                    // subgradient 0 at the kink
                    let g = self
                        .value(*a)
                        .zip_map(&upstream, |x, u| if x > 0.0 { u } else { 0.0 })?;
                    push_grad(&mut adjoint, *a, g)?;
                }
                Op::Concat(a, b) => {
                    let split = self.value(*a).channels();
                    let total = upstream.channels();
                    push_grad(&mut adjoint, *a, upstream.slice_channels(0..split)?)?;
                    push_grad(&mut adjoint, *b, upstream.slice_channels(split..total)?)?;
                }
                Op::GlobalAvgPool(a) => {
                    let x = self.value(*a);
                    let plane: usize = x.spatial().iter().product();
                    let inv = 1.0 / plane as f64;
                    let g = Tensor::from_fn(x.shape(), |i| upstream.data()[i / plane] * inv);
                    push_grad(&mut adjoint, *a, g)?;
                }
                Op::FullyConnected {
                    input,
                    weights,
                    bias,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weights);
                    let cols = w.shape()[1];
                    let u = upstream.data();
                    let gw = Tensor::from_fn(w.shape(), |i| u[i / cols] * x.data()[i % cols]);
                    let gx = Tensor::from_fn(x.shape(), |c| {
                        u.iter()
                            .enumerate()
                            .map(|(r, ur)| ur * w.data()[r * cols + c])
                            .sum()
                    });
                    push_grad(&mut adjoint, *input, gx)?;
                    push_grad(&mut adjoint, *weights, gw)?;
                    if let Some(b) = bias {
                        push_grad(&mut adjoint, *b, upstream.clone())?;
                    }
                }
                Op::Dropout { input, mask } => {
                    let data = upstream
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(u, m)| u * m)
                        .collect();
                    push_grad(
                        &mut adjoint,
                        *input,
                        Tensor::new(upstream.shape().to_vec(), data)?,
                    )?;
                }
                Op::Add(a, b) => {
                    push_grad(&mut adjoint, *a, upstream.clone())?;
                    push_grad(&mut adjoint, *b, upstream)?;
                }
                Op::Sub(a, b) => {
                    push_grad(&mut adjoint, *b, upstream.scale(-1.0))?;
                    push_grad(&mut adjoint, *a, upstream)?;
                }
                Op::Mul(a, b) => {
                    let ga = upstream.zip_map(self.value(*b), |u, y| u * y)?;
                    let gb = upstream.zip_map(self.value(*a), |u, x| u * x)?;
                    push_grad(&mut adjoint, *a, ga)?;
                    push_grad(&mut adjoint, *b, gb)?;
                }
                Op::Scale(a, f) => push_grad(&mut adjoint, *a, upstream.scale(*f))?,
                Op::Abs(a) => {
                    // subgradient 0 at the kink
                    let g = self.value(*a).zip_map(&upstream, |x, u| {
                        if x > 0.0 {
                            u
                        } else if x < 0.0 {
                            -u
                        } else {
                            0.0
                        }
                    })?;
                    push_grad(&mut adjoint, *a, g)?;
                }
                Op::Sum(a) => {
                    let u = upstream.data()[0];
                    push_grad(&mut adjoint, *a, Tensor::full(self.value(*a).shape(), u))?;
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient() {
        let mut params = Parameters::new();
        let x = params.insert("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let xn = g.param(&params, x);
        let y = g.square(xn);
        let grads = g.backpropagate(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn kink_pattern_tracks_relu_and_abs_inputs() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 2.0, 0.0]));
        let r = g.relu(x);
        let d = g.sub(x, r).unwrap();
        g.abs(d);
        assert_eq!(
            g.kink_pattern(),
            vec![false, true, false, false, false, false]
        );
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut params = Parameters::new();
        let x = params.insert("x", Tensor::scalar(3.0));
        let w = params.insert("w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let wn = g.param(&params, w);
        let loss = g.square(wn);
        let grads = g.backpropagate(loss).unwrap().complete(&params);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[3]));
        assert!(g.backpropagate(a).is_err());
    }

    #[test]
    fn shared_leaf_gradients_sum() {
        // loss = sum(w * x1) + sum(w * x2) using two leaves of the same parameter
        let mut params = Parameters::new();
        let w = params.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let w1 = g.param(&params, w);
        let w2 = g.param(&params, w);
        let x1 = g.input(Tensor::vector(vec![3.0, 4.0]));
        let x2 = g.input(Tensor::vector(vec![5.0, 6.0]));
        let a = g.mul(w1, x1).unwrap();
        let b = g.mul(w2, x2).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        let grads = g.backpropagate(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[8.0, 10.0]);
    }

    #[test]
    fn dropout_backward_uses_mask() {
        let mut params = Parameters::new();
        let w = params.insert("w", Tensor::full(&[1000], 1.0));
        let mut g = Graph::new();
        let wn = g.param(&params, w);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = g.dropout(wn, 0.5, true, &mut rng).unwrap();
        let loss = g.sum(d);
        let grads = g.backpropagate(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), g.value(d));
    }
}

//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation appends a node holding its forward value. Nodes only
//! reference earlier nodes, so the tape order is a topological order and a
//! single reverse sweep visits each node once.

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a node in a [`Graph`].
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
        weights: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    },
    TransposeConv2d {
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    },
    Relu(NodeId),
    ChannelScale {
        input: NodeId,
        gains: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine {
        input: NodeId,
        scale: T,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    SumAll(NodeId),
    SumSquares(NodeId),
    Dot(NodeId, NodeId),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weights,
                bias,
                ..
            }
            | Op::TransposeConv2d {
                input,
                weights,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weights];
                v.extend(bias);
                v
            }
            Op::Relu(a)
            | Op::Upsample2(a)
            | Op::SumAll(a)
            | Op::SumSquares(a)
            | Op::Affine { input: a, .. }
            | Op::MaxPool2 { input: a, .. } => vec![*a],
            Op::ChannelScale { input, gains } => vec![*input, *gains],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat(a, b) | Op::Dot(a, b) => {
                vec![*a, *b]
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Tape of recorded operations with cached forward values.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the seeded output with respect to the leaf `id`, if `id`
    /// is a variable the output depends on.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Which element of the output seeds the backward sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Seed {
    /// The output must hold exactly one element.
    Scalar,
    /// Flat index of one output element (a Jacobian row).
    Element(usize),
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

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that gradients are not taken with respect to.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Which linear piece every ReLU and max-pool on the tape selected:
    /// one flag per ReLU input element (`> 0`) and the argmax of each pool
    /// window. Two inputs with equal patterns lie in the same linear region.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.nodes[a.0].value.data().iter().map(|&v| (v > T::zero()) as usize)),
                Op::MaxPool2 { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let v = ops::conv2d(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weights,
                bias,
                geom,
            },
            v,
        ))
    }

    pub fn transpose_conv2d(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let v = ops::transpose_conv2d(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        Ok(self.push(
            Op::TransposeConv2d {
                input,
                weights,
                bias,
                geom,
            },
            v,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = ops::relu(self.value(input));
        self.push(Op::Relu(input), v)
    }

    pub fn per_channel_scale(&mut self, input: NodeId, gains: NodeId) -> Result<NodeId> {
        let v = ops::per_channel_scale(self.value(input), self.value(gains))?;
        Ok(self.push(Op::ChannelScale { input, gains }, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// `scale * input + shift`, element-wise.
    pub fn affine(&mut self, input: NodeId, scale: T, shift: T) -> NodeId {
        let v = self.value(input).map(|x| scale * x + shift);
        self.push(
            Op::Affine { input, scale },
            v,
        )
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (v, argmax) = ops::maxpool2(self.value(input))?;
        Ok(self.push(Op::MaxPool2 { input, argmax }, v))
    }

    pub fn upsample_nearest2(&mut self, input: NodeId) -> NodeId {
        let v = ops::upsample_nearest2(self.value(input));
        self.push(Op::Upsample2(input), v)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat(a, b), v))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(input).sum());
        self.push(Op::SumAll(input), v)
    }

    /// Scalar sum of squared elements.
    pub fn sum_squares(&mut self, input: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(input).sum_squares());
        self.push(Op::SumSquares(input), v)
    }

    /// Scalar inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).dot(self.value(b))?);
        Ok(self.push(Op::Dot(a, b), v))
    }

    /// Scalar mean of squared differences.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let diff = self.sub(pred, target)?;
        let n = self.value(diff).len();
        let ss = self.sum_squares(diff);
        Ok(self.affine(ss, T::one() / T::lit(n as f64), T::zero()))
    }

    /// Reverse sweep from `output`. Returns gradients for every variable
    /// leaf the output depends on.
    pub fn backward(&self, output: NodeId, seed: Seed) -> Result<Gradients<T>> {
        let out_val = self.value(output);
        let mut seed_t = Tensor::zeros(out_val.shape());
        match seed {
            Seed::Scalar => {
                if out_val.len() != 1 {
                    return Err(Error::NonScalarOutput(out_val.shape()));
                }
                seed_t.data_mut()[0] = T::one();
            }
            Seed::Element(i) => {
                if i >= out_val.len() {
                    return Err(Error::invalid(format!(
                        "selected element {i} out of range for output of {} elements",
                        out_val.len()
                    )));
                }
                seed_t.data_mut()[i] = T::one();
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        if self.nodes[output.0].needs_grad {
            grads[output.0] = Some(seed_t);
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            // only leaf gradients are kept; intermediates are released here
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weights,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                if wants(*input) {
                    accumulate(
                        grads,
                        *input,
                        ops::conv2d_backward_input(g, w, x.shape(), *geom),
                    );
                }
                if wants(*weights) {
                    accumulate(
                        grads,
                        *weights,
                        ops::conv2d_backward_weights(g, x, w.shape(), *geom),
                    );
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    accumulate(grads, b, reshape_like(ops::channel_sums(g), self.value(b)));
                }
            }
            Op::TransposeConv2d {
                input,
                weights,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                if wants(*input) {
                    let gx = ops::conv2d(g, w, None, *geom).expect("transpose adjoint shape");
                    accumulate(grads, *input, gx);
                }
                if wants(*weights) {
                    // conv2d weight adjoint with the roles of input and output swapped
                    accumulate(
                        grads,
                        *weights,
                        ops::conv2d_backward_weights(x, g, w.shape(), *geom),
                    );
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    accumulate(grads, b, reshape_like(ops::channel_sums(g), self.value(b)));
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = self.value(*a);
                    let gx = g
                        .zip_map(x, "relu", |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                        .expect("relu shape");
                    accumulate(grads, *a, gx);
                }
            }
            Op::ChannelScale { input, gains } => {
                let x = self.value(*input);
                let gain = self.value(*gains);
                if wants(*input) {
                    accumulate(
                        grads,
                        *input,
                        ops::per_channel_scale(g, gain).expect("scale shape"),
                    );
                }
                if wants(*gains) {
                    let [n, c, _, _] = x.shape();
                    let mut gg = vec![T::zero(); c];
                    for b in 0..n {
                        for (ch, acc) in gg.iter_mut().enumerate() {
                            *acc += ops::dot(g.plane(b, ch), x.plane(b, ch));
                        }
                    }
                    accumulate(grads, *gains, reshape_like(Tensor::channel_vector(gg), gain));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let gx = g.zip_map(self.value(*b), "mul", |p, q| p * q).expect("mul");
                    accumulate(grads, *a, gx);
                }
                if wants(*b) {
                    let gx = g.zip_map(self.value(*a), "mul", |p, q| p * q).expect("mul");
                    accumulate(grads, *b, gx);
                }
            }
            Op::Affine { input, scale, .. } => {
                if wants(*input) {
                    accumulate(grads, *input, g.scale(*scale));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if wants(*input) {
                    let mut gx = Tensor::zeros(self.value(*input).shape());
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        gx.data_mut()[src] += gv;
                    }
                    accumulate(grads, *input, gx);
                }
            }
            Op::Upsample2(a) => {
                if wants(*a) {
                    accumulate(grads, *a, ops::upsample_nearest2_backward(g));
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).channels();
                let (ga, gb) = ops::split_channels(g, ca);
                if wants(*a) {
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    let s = g.item();
                    accumulate(grads, *a, Tensor::full(self.value(*a).shape(), s));
                }
            }
            Op::SumSquares(a) => {
                if wants(*a) {
                    let s = g.item() + g.item();
                    accumulate(grads, *a, self.value(*a).scale(s));
                }
            }
            Op::Dot(a, b) => {
                let s = g.item();
                if wants(*a) {
                    accumulate(grads, *a, self.value(*b).scale(s));
                }
                if wants(*b) {
                    accumulate(grads, *b, self.value(*a).scale(s));
                }
            }
        }
    }
}

fn reshape_like<T: Scalar>(t: Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(like.shape(), t.into_vec()).expect("channel vector length")
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! list once in reverse, so each node is visited exactly once and
//! contributions from every path into a node are summed before it propagates.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::kernels::{conv, image};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside this crate.
///
/// `backward` returns one entry per input, in the order the inputs were
/// recorded; `None` means no gradient flows to that input.
pub trait CustomOp<F: Real> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_output: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>>;
}

enum Op<F: Real> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, F),
    Relu(Var),
    Elu(Var, F),
    Abs(Var),
    Exp(Var),
    Log(Var),
    MaxScalar(Var, F),
    Clamp(Var, F, F),
    Sum(Var),
    Mean(Var),
    SumChannels(Var),
    ScaleChannels(Var, Vec<F>),
    BroadcastChannels(Var),
    GradX(Var),
    GradY(Var),
    UpsampleNearest(Var),
    UpsampleBilinear(Var),
    UpsampleZeros(Var),
    FlipW(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<F>>,
    },
}

impl<F: Real> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::Elu(..) => "elu",
            Op::Abs(..) => "abs",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::MaxScalar(..) => "max_scalar",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumChannels(..) => "sum_channels",
            Op::ScaleChannels(..) => "scale_channels",
            Op::BroadcastChannels(..) => "broadcast_channels",
            Op::GradX(..) => "grad_x",
            Op::GradY(..) => "grad_y",
            Op::UpsampleNearest(..) => "upsample_nearest2x",
            Op::UpsampleBilinear(..) => "upsample_bilinear2x",
            Op::UpsampleZeros(..) => "upsample_zeros2x",
            Op::FlipW(..) => "flip_w",
            Op::Concat(..) => "concat_channels",
            Op::Softmax(..) => "softmax_channels",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
///
/// A tape is single-threaded; use one tape per worker and per iteration.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value with gradient flow stopped.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_raw(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    /// Record an externally defined op whose forward value was already computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<F>, op: Box<dyn CustomOp<F>>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: F) -> Var {
        self.unary(a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -F::one())
    }

    /// `s - a`
    pub fn rsub_scalar(&mut self, s: F, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(F::zero()), Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var, alpha: F) -> Var {
        self.unary(
            a,
            |x| {
                if x > F::zero() {
                    x
                } else {
                    alpha * (x.exp() - F::one())
                }
            },
            Op::Elu(a, alpha),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, F::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, F::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, F::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Elementwise `max(a, s)`.
    pub fn max_scalar(&mut self, a: Var, s: F) -> Var {
        self.unary(a, |x| x.max(s), Op::MaxScalar(a, s))
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn sum_channels(&mut self, a: Var) -> Result<Var> {
        let value = image::sum_channels(self.value(a))?;
        Ok(self.push(value, Op::SumChannels(a), &[a]))
    }

    pub fn mean_channels(&mut self, a: Var) -> Result<Var> {
        let c = self.value(a).dims4()?[1];
        let s = self.sum_channels(a)?;
        Ok(self.mul_scalar(s, F::one() / F::from_usize(c).expect("channel count fits")))
    }

    pub fn scale_channels(&mut self, a: Var, weights: &[F]) -> Result<Var> {
        let value = image::scale_channels(self.value(a), weights)?;
        Ok(self.push(value, Op::ScaleChannels(a, weights.to_vec()), &[a]))
    }

    pub fn broadcast_channels(&mut self, a: Var, channels: usize) -> Result<Var> {
        let value = image::broadcast_channels(self.value(a), channels)?;
        Ok(self.push(value, Op::BroadcastChannels(a), &[a]))
    }

    pub fn grad_x(&mut self, a: Var) -> Result<Var> {
        let value = image::grad_x(self.value(a))?;
        Ok(self.push(value, Op::GradX(a), &[a]))
    }

    pub fn grad_y(&mut self, a: Var) -> Result<Var> {
        let value = image::grad_y(self.value(a))?;
        Ok(self.push(value, Op::GradY(a), &[a]))
    }

    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        let value = image::upsample_nearest2x(self.value(a))?;
        Ok(self.push(value, Op::UpsampleNearest(a), &[a]))
    }

    pub fn upsample_bilinear2x(&mut self, a: Var) -> Result<Var> {
        let [_, _, h, w] = self.value(a).dims4()?;
        let value = image::resize_bilinear(self.value(a), 2 * h, 2 * w)?;
        Ok(self.push(value, Op::UpsampleBilinear(a), &[a]))
    }

    pub fn upsample_zeros2x(&mut self, a: Var) -> Result<Var> {
        let value = image::upsample_zeros2x(self.value(a))?;
        Ok(self.push(value, Op::UpsampleZeros(a), &[a]))
    }

    pub fn flip_w(&mut self, a: Var) -> Result<Var> {
        let value = image::flip_w(self.value(a))?;
        Ok(self.push(value, Op::FlipW(a), &[a]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<F>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = image::concat_channels(&values)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let value = image::softmax_channels(self.value(a))?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Reverse sweep seeded with ones at `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<F>> {
        let seed = Tensor::ones(self.value(output).shape().to_vec());
        self.backward_with(output, seed)
    }

    /// Reverse sweep seeded with `seed` (same shape as `output`).
    pub fn backward_with(&self, output: Var, seed: Tensor<F>) -> Result<Gradients<F>> {
        self.value(output).expect_same_shape(&seed, "backward")?;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, contribution) in self.node_backward(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
            // Interior grads are not kept; only leaves are reported.
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let val = |v: Var| self.value(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let grads = conv::conv2d_backward(
                    val(*input),
                    val(*weight),
                    bias.is_some(),
                    *stride,
                    *padding,
                    g,
                    self.wants(*input),
                    self.wants(*weight),
                )?;
                out.extend(grads.input.map(|t| (*input, t)));
                out.extend(grads.weight.map(|t| (*weight, t)));
                if let (Some(b), Some(t)) = (bias, grads.bias) {
                    out.push((*b, t));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.zip_map(val(*b), "mul_backward", |gv, bv| gv * bv)?));
                out.push((*b, g.zip_map(val(*a), "mul_backward", |gv, av| gv * av)?));
            }
            Op::Div(a, b) => {
                out.push((*a, g.zip_map(val(*b), "div_backward", |gv, bv| gv / bv)?));
                let ratio = node
                    .value
                    .zip_map(val(*b), "div_backward", |y, bv| y / bv)?;
                out.push((*b, g.zip_map(&ratio, "div_backward", |gv, r| -gv * r)?));
            }
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::MulScalar(a, s) => out.push((*a, g.map(|v| v * *s))),
            Op::Relu(a) => out.push((
                *a,
                g.zip_map(val(*a), "relu_backward", |gv, x| {
                    if x > F::zero() {
                        gv
                    } else {
                        F::zero()
                    }
                })?,
            )),
            Op::Elu(a, alpha) => {
                let y = &node.value;
                let d = val(*a).zip_map(y, "elu_backward", |x, yv| {
                    if x > F::zero() {
                        F::one()
                    } else {
                        yv + *alpha
                    }
                })?;
                out.push((*a, g.zip_map(&d, "elu_backward", |gv, dv| gv * dv)?));
            }
            Op::Abs(a) => out.push((
                *a,
                g.zip_map(val(*a), "abs_backward", |gv, x| {
                    if x > F::zero() {
                        gv
                    } else if x < F::zero() {
                        -gv
                    } else {
                        F::zero()
                    }
                })?,
            )),
            Op::Exp(a) => out.push((*a, g.zip_map(&node.value, "exp_backward", |gv, y| gv * y)?)),
            Op::Log(a) => out.push((*a, g.zip_map(val(*a), "log_backward", |gv, x| gv / x)?)),
            Op::MaxScalar(a, s) => out.push((
                *a,
                g.zip_map(val(*a), "max_scalar_backward", |gv, x| {
                    if x > *s {
                        gv
                    } else {
                        F::zero()
                    }
                })?,
            )),
            Op::Clamp(a, lo, hi) => out.push((
                *a,
                g.zip_map(val(*a), "clamp_backward", |gv, x| {
                    if x > *lo && x < *hi {
                        gv
                    } else {
                        F::zero()
                    }
                })?,
            )),
            Op::Sum(a) => {
                let gv = g.data()[0];
                out.push((*a, Tensor::full(val(*a).shape().to_vec(), gv)));
            }
            Op::Mean(a) => {
                let n = F::from_usize(val(*a).numel().max(1)).expect("size fits");
                out.push((*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0] / n)));
            }
            Op::SumChannels(a) => {
                let c = val(*a).dims4()?[1];
                out.push((*a, image::broadcast_channels(g, c)?));
            }
            Op::ScaleChannels(a, w) => out.push((*a, image::scale_channels(g, w)?)),
            Op::BroadcastChannels(a) => out.push((*a, image::sum_channels(g)?)),
            Op::GradX(a) => out.push((*a, image::grad_x_backward(val(*a).shape(), g)?)),
            Op::GradY(a) => out.push((*a, image::grad_y_backward(val(*a).shape(), g)?)),
            Op::UpsampleNearest(a) => {
                out.push((*a, image::upsample_nearest2x_backward(val(*a).shape(), g)?))
            }
            Op::UpsampleBilinear(a) => {
                out.push((*a, image::resize_bilinear_backward(val(*a).shape(), g)?))
            }
            Op::UpsampleZeros(a) => {
                out.push((*a, image::upsample_zeros2x_backward(val(*a).shape(), g)?))
            }
            Op::FlipW(a) => out.push((*a, image::flip_w(g)?)),
            Op::Concat(parts) => {
                let channels: Vec<usize> = parts.iter().map(|&p| val(p).shape()[1]).collect();
                for (p, t) in parts.iter().zip(image::split_channels(g, &channels)?) {
                    out.push((*p, t));
                }
            }
            Op::Softmax(a) => out.push((*a, image::softmax_channels_backward(&node.value, g)?)),
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<F>> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&values, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(TensorError::InvalidArgument {
                        op: node.op.name(),
                        msg: format!(
                            "backward returned {} grads for {} inputs",
                            grads.len(),
                            inputs.len()
                        ),
                    });
                }
                for (v, t) in inputs.iter().zip(grads) {
                    if let Some(t) = t {
                        out.push((*v, t));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

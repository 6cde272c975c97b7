//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value. [`Tape::backward`]
//! walks the nodes in reverse, so inputs always precede their consumers.
//! Leaf gradients accumulate across repeated `backward` calls until
//! [`Tape::zero_grad`] is called.
//!
//! Subgradient conventions: `relu'(0) = 0`; a window max routes its whole
//! gradient to the first maximal element in row-major order.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive operations reachable through [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Relu,
    Square,
    SoftmaxChannels,
    L2NormalizeChannels,
    DownsampleBilinear { height: usize, width: usize },
    Add,
    Multiply,
    SubtractScalar(f64),
    Sum,
    Mean,
    MaxOverWindow { size: usize, stride: usize },
}

impl Primitive {
    pub fn arity(&self) -> usize {
        match self {
            Primitive::Add | Primitive::Multiply => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Relu => "relu",
            Primitive::Square => "elementwise_square",
            Primitive::SoftmaxChannels => "softmax_over_channels",
            Primitive::L2NormalizeChannels => "l2_normalize_over_channels",
            Primitive::DownsampleBilinear { .. } => "downsample_bilinear",
            Primitive::Add => "add",
            Primitive::Multiply => "multiply",
            Primitive::SubtractScalar(_) => "subtract_scalar",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::MaxOverWindow { .. } => "max_over_window",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    /// Parses the parameter-free kinds; parameterized kinds take defaults
    /// (`subtract_scalar` 0, `max_over_window` 2×2 stride 1,
    /// `downsample_bilinear` 1×1).
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "relu" => Primitive::Relu,
            "elementwise_square" => Primitive::Square,
            "softmax_over_channels" => Primitive::SoftmaxChannels,
            "l2_normalize_over_channels" => Primitive::L2NormalizeChannels,
            "downsample_bilinear" => Primitive::DownsampleBilinear { height: 1, width: 1 },
            "add" => Primitive::Add,
            "multiply" => Primitive::Multiply,
            "subtract_scalar" => Primitive::SubtractScalar(0.0),
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "max_over_window" => Primitive::MaxOverWindow { size: 2, stride: 1 },
            other => return Err(Error::InvalidArgument(format!("unknown primitive '{other}'"))),
        })
    }
}

/// An operation with a hand-written adjoint, defined outside this module.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the output gradient. Entries for
    /// inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf { requires_grad: bool },
    Conv2d { input: Var, kernel: Var, bias: Var, dilation: usize },
    Relu(Var),
    Square(Var),
    Softmax(Var),
    Normalize { x: Var, eps: f64 },
    Downsample(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Sum(Var),
    Mean(Var),
    MaxWindow { x: Var, argmax: Vec<usize> },
    AvgWindow { x: Var, size: usize, stride: usize },
    SelectChannel { x: Var, channel: usize },
    Gather { x: Var, rows: Vec<usize>, row_len: usize },
    Reshape(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Ordered record of executed operations.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves with `requires_grad` receive
    /// gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape().to_vec()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf { requires_grad },
            needs_grad: requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = &mut node.grad {
                g.data_mut().fill(T::zero());
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an externally defined op whose forward value was already
    /// computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Dispatches one of the named primitives.
    pub fn apply(&mut self, kind: Primitive, operands: &[Var]) -> Result<Var> {
        if operands.len() != kind.arity() {
            return Err(Error::Arity {
                op: kind.name(),
                expected: kind.arity(),
                got: operands.len(),
            });
        }
        let a = operands[0];
        match kind {
            Primitive::Relu => Ok(self.relu(a)),
            Primitive::Square => Ok(self.square(a)),
            Primitive::SoftmaxChannels => Ok(self.softmax_channels(a)),
            Primitive::L2NormalizeChannels => Ok(self.l2_normalize_channels(a)),
            Primitive::DownsampleBilinear { height, width } => self.downsample_bilinear(a, height, width),
            Primitive::Add => self.add(a, operands[1]),
            Primitive::Multiply => self.mul(a, operands[1]),
            Primitive::SubtractScalar(s) => Ok(self.affine(a, 1.0, -s)),
            Primitive::Sum => Ok(self.sum(a)),
            Primitive::Mean => Ok(self.mean(a)),
            Primitive::MaxOverWindow { size, stride } => self.max_over_window(a, size, stride),
        }
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, dilation: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(kernel), self.value(bias), dilation)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dilation,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = kernels::softmax_last(self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn l2_normalize_channels(&mut self, x: Var) -> Var {
        self.normalize_channels(x, kernels::L2_EPS)
    }

    /// `x / sqrt(|x|² + eps)` over channels.
    pub fn normalize_channels(&mut self, x: Var, eps: f64) -> Var {
        let out = kernels::normalize_last(self.value(x), eps);
        self.push(out, Op::Normalize { x, eps }, &[x])
    }

    pub fn downsample_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let out = kernels::downsample_bilinear(self.value(x), height, width)?;
        Ok(self.push(out, Op::Downsample(x), &[x]))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("multiply", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::lit(scale), T::lit(shift));
        let out = self.value(x).map(|v| v * s + t);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::lit(t.len().max(1) as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn max_over_window(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_over_window(self.value(x), size, stride)?;
        Ok(self.push(out, Op::MaxWindow { x, argmax }, &[x]))
    }

    pub fn avg_over_window(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let out = kernels::avg_over_window(self.value(x), size, stride)?;
        Ok(self.push(out, Op::AvgWindow { x, size, stride }, &[x]))
    }

    /// `H×W×C → H×W`, keeping one channel.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if shape.len() != 3 || channel >= shape[2] {
            return Err(Error::shape(
                "select_channel",
                format!("channel {channel} of {shape:?}"),
            ));
        }
        let c = shape[2];
        let data = t.data().iter().skip(channel).step_by(c).copied().collect();
        let out = Tensor::new([shape[0], shape[1]], data)?;
        Ok(self.push(out, Op::SelectChannel { x, channel }, &[x]))
    }

    /// Views `x` as rows of its last axis (scalars for 2-D maps) and picks
    /// `rows` in order: output `[rows.len(), row_len]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let row_len = if t.ndim() == 3 { t.channels() } else { 1 };
        let n_rows = t.len() / row_len;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n_rows}")));
        }
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * row_len..(r + 1) * row_len]);
        }
        let out = Tensor::new([rows.len(), row_len], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                x,
                rows: rows.to_vec(),
                row_len,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Populates gradients of every `requires_grad` leaf with
    /// `∂loss/∂leaf`, adding to what is already stored.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::DetachedGraph);
        }
        let mut adj: Vec<Option<Tensor<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::full(shape, T::one()));
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let needs = |v: &Var| self.nodes[v.0].needs_grad;
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        leaf_grads.push((i, g));
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    dilation,
                } => {
                    let grads = kernels::conv2d_backward(
                        val(input),
                        val(kernel),
                        val(bias),
                        *dilation,
                        &g,
                        needs(input),
                    )?;
                    if let Some(dx) = grads.input {
                        accumulate(&mut adj[input.0], dx);
                    }
                    if needs(kernel) {
                        accumulate(&mut adj[kernel.0], grads.kernel);
                    }
                    if needs(bias) {
                        accumulate(&mut adj[bias.0], grads.bias);
                    }
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(val(x).data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Square(x) => {
                    let mut dx = g;
                    let two = T::lit(2.0);
                    for (d, &v) in dx.data_mut().iter_mut().zip(val(x).data()) {
                        *d *= two * v;
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Softmax(x) => {
                    let c = node.value.channels();
                    let mut dx = g;
                    for (drow, yrow) in dx.data_mut().chunks_exact_mut(c).zip(node.value.data().chunks_exact(c)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for (d, &y) in drow.iter_mut().zip(yrow) {
                            *d = y * (*d - dot);
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Normalize { x, eps } => {
                    let c = node.value.channels();
                    let eps = T::lit(*eps);
                    let mut dx = g;
                    let rows = dx
                        .data_mut()
                        .chunks_exact_mut(c)
                        .zip(node.value.data().chunks_exact(c))
                        .zip(val(x).data().chunks_exact(c));
                    for ((drow, yrow), xrow) in rows {
                        let norm = (xrow.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
                        let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for (d, &y) in drow.iter_mut().zip(yrow) {
                            *d = (*d - y * dot) / norm;
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Downsample(x) => {
                    let dx = kernels::downsample_bilinear_backward(val(x).shape(), &g)?;
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Add(a, b) => {
                    if needs(b) {
                        accumulate(&mut adj[b.0], g.clone());
                    }
                    if needs(a) {
                        accumulate(&mut adj[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(b) {
                        accumulate(&mut adj[b.0], g.map(|v| -v));
                    }
                    if needs(a) {
                        accumulate(&mut adj[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        let mut da = g.clone();
                        for (d, &v) in da.data_mut().iter_mut().zip(val(b).data()) {
                            *d *= v;
                        }
                        accumulate(&mut adj[a.0], da);
                    }
                    if needs(b) {
                        let mut db = g;
                        for (d, &v) in db.data_mut().iter_mut().zip(val(a).data()) {
                            *d *= v;
                        }
                        accumulate(&mut adj[b.0], db);
                    }
                }
                Op::Affine { x, scale } => {
                    let s = T::lit(*scale);
                    accumulate(&mut adj[x.0], g.map(|v| v * s));
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    accumulate(&mut adj[x.0], Tensor::full(val(x).shape().to_vec(), gv));
                }
                Op::Mean(x) => {
                    let n = T::lit(val(x).len().max(1) as f64);
                    let gv = g.item() / n;
                    accumulate(&mut adj[x.0], Tensor::full(val(x).shape().to_vec(), gv));
                }
                Op::MaxWindow { x, argmax } => {
                    let mut dx = Tensor::zeros(val(x).shape().to_vec());
                    for (&idx, &gv) in argmax.iter().zip(g.data()) {
                        dx.data_mut()[idx] += gv;
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::AvgWindow { x, size, stride } => {
                    let shape = val(x).shape().to_vec();
                    let (oh, ow) = (g.shape()[0], g.shape()[1]);
                    let area = (size * size) as f64;
                    let coef: Vec<f64> = g.data().iter().map(|v| v.as_f64() / area).collect();
                    let spread =
                        kernels::scatter_window_coefficients(shape[0], shape[1], *size, *stride, oh, ow, &coef);
                    let dx = Tensor::new(shape, spread.into_iter().map(T::lit).collect())?;
                    accumulate(&mut adj[x.0], dx);
                }
                Op::SelectChannel { x, channel } => {
                    let shape = val(x).shape().to_vec();
                    let c = shape[2];
                    let mut dx = Tensor::zeros(shape);
                    for (p, &gv) in g.data().iter().enumerate() {
                        dx.data_mut()[p * c + channel] = gv;
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Gather { x, rows, row_len } => {
                    let mut dx = Tensor::zeros(val(x).shape().to_vec());
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &g.data()[k * row_len..(k + 1) * row_len];
                        for (d, &s) in dx.data_mut()[r * row_len..(r + 1) * row_len].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Reshape(x) => {
                    let dx = g.reshape(val(x).shape().to_vec())?;
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(val).collect();
                    let flags: Vec<bool> = inputs.iter().map(needs).collect();
                    let grads = op.backward(&values, &node.value, &g, &flags)?;
                    for ((v, flag), dg) in inputs.iter().zip(flags).zip(grads) {
                        if let (true, Some(dg)) = (flag, dg) {
                            if dg.shape() != val(v).shape() {
                                return Err(Error::shape(
                                    op.name(),
                                    format!("adjoint {:?} for input {:?}", dg.shape(), val(v).shape()),
                                ));
                            }
                            accumulate(&mut adj[v.0], dg);
                        }
                    }
                }
            }
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap(), true);
        let sq = tape.square(x);
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
        // Gradients accumulate until reset.
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([3], &[-1.0, 0.0, 2.5]).unwrap(), true);
        let y = tape.apply(Primitive::Relu, &[x]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.5]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn channel_ops_on_textbook_inputs() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_f64([1, 1, 2], &[3.0, 4.0]).unwrap());
        let n = tape.apply(Primitive::L2NormalizeChannels, &[v]).unwrap();
        let d = tape.value(n).data();
        assert!((d[0] - 0.6).abs() < 1e-9 && (d[1] - 0.8).abs() < 1e-9);

        let z = tape.constant(Tensor::from_f64([1, 1, 2], &[0.0, 0.0]).unwrap());
        let s = tape.apply(Primitive::SoftmaxChannels, &[z]).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let zero = tape.constant(Tensor::zeros([1, 1, 4]));
        let zn = tape.l2_normalize_channels(zero);
        assert_eq!(tape.value(zn).data(), &[0.0; 4]);
    }

    #[test]
    fn rejects_bad_backward_targets() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap(), true);
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));

        let c = tape.constant(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let s = tape.sum(c);
        assert!(matches!(tape.backward(s), Err(Error::DetachedGraph)));
    }

    #[test]
    fn arity_and_kind_are_checked() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap(), true);
        assert!(matches!(tape.apply(Primitive::Add, &[x]), Err(Error::Arity { .. })));
        assert!(matches!(tape.apply(Primitive::Relu, &[x, x]), Err(Error::Arity { .. })));
        assert!("tanh".parse::<Primitive>().is_err());
        assert_eq!("relu".parse::<Primitive>().unwrap(), Primitive::Relu);
    }
}

//! Reverse-mode differentiation over a fixed set of tensor operations.
//!
//! Operations are recorded in execution order on a [`Tape`]; [`Tape::backward`]
//! sweeps the list in reverse and accumulates adjoints. Only the ops needed by
//! the decomposition network and its losses are provided.

use crate::error::{dim_err, Result};
use crate::kernels;
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, pad: usize },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    PowSafe(Var, f64),
    Center(Var),
    ChannelMean(Var),
    BoxMean(Var, usize),
    ReflectPad(Var, usize),
    CenterCrop(Var, usize),
    Mean(Var),
    MeanSquare(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of every leaf that requires a gradient.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), pad)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv { x, w, b, pad }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str) -> Result<bool> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: {} vs {}", self.shape(a), self.shape(b)));
        }
        Ok(self.rg(a) || self.rg(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.binary(a, b, "add")?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.binary(a, b, "sub")?;
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.binary(a, b, "mul")?;
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k = T::from_f64_lossy(k);
        let out = self.value(x).scale(k);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn pow_safe(&mut self, x: Var, gamma: f64) -> Var {
        let out = kernels::pow_safe(self.value(x), gamma);
        let rg = self.rg(x);
        self.push(out, Op::PowSafe(x, gamma), rg)
    }

    pub fn center(&mut self, x: Var) -> Var {
        let out = kernels::center(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Center(x), rg)
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let out = kernels::channel_mean(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::ChannelMean(x), rg)
    }

    pub fn box_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let out = kernels::box_mean(self.value(x), k)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::BoxMean(x, k), rg))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let out = kernels::reflect_pad(self.value(x), pad)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::ReflectPad(x, pad), rg))
    }

    pub fn center_crop(&mut self, x: Var, pad: usize) -> Result<Var> {
        let out = kernels::center_crop(self.value(x), pad)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::CenterCrop(x, pad), rg))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(T::from_f64_lossy(self.value(x).mean()));
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean of squared entries, as a scalar.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(T::from_f64_lossy(self.value(x).mean_square()));
        let rg = self.rg(x);
        self.push(out, Op::MeanSquare(x), rg)
    }

    /// Mean squared difference of two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.mean_square(d))
    }

    /// Sum of a list of equally shaped values.
    pub fn sum_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return dim_err("sum_all: empty term list");
        };
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse sweep from `loss`, seeded with ones.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv { x, w, b, pad } => {
                    let need_x = self.rg(x);
                    let cg = kernels::conv2d_backward(self.value(x), self.value(w), pad, &g, need_x);
                    if let Some(gx) = cg.input {
                        self.accumulate(&mut grads, x, gx);
                    }
                    self.accumulate(&mut grads, w, cg.weight);
                    self.accumulate(&mut grads, b, cg.bias);
                }
                Op::Relu(x) => {
                    let gx = kernels::relu_backward(self.value(x), &g);
                    self.accumulate(&mut grads, x, gx);
                }
                Op::Add(a, b) => {
                    if self.rg(b) {
                        self.accumulate(&mut grads, b, g.clone());
                    }
                    self.accumulate(&mut grads, a, g);
                }
                Op::Sub(a, b) => {
                    if self.rg(b) {
                        self.accumulate(&mut grads, b, g.scale(-T::one()));
                    }
                    self.accumulate(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let ga = g.mul(self.value(b)).expect("mul grad");
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = g.mul(self.value(a)).expect("mul grad");
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::Scale(x, k) => {
                    self.accumulate(&mut grads, x, g.scale(k));
                }
                Op::PowSafe(x, gamma) => {
                    let gx = kernels::pow_safe_backward(self.value(x), gamma, &g);
                    self.accumulate(&mut grads, x, gx);
                }
                Op::Center(x) => {
                    self.accumulate(&mut grads, x, kernels::center_backward(&g));
                }
                Op::ChannelMean(x) => {
                    let gx = kernels::channel_mean_backward(&g, self.shape(x));
                    self.accumulate(&mut grads, x, gx);
                }
                Op::BoxMean(x, k) => {
                    let gx = kernels::box_mean_backward(&g, self.shape(x), k);
                    self.accumulate(&mut grads, x, gx);
                }
                Op::ReflectPad(x, pad) => {
                    let gx = kernels::reflect_pad_backward(&g, self.shape(x), pad);
                    self.accumulate(&mut grads, x, gx);
                }
                Op::CenterCrop(x, pad) => {
                    let gx = kernels::center_crop_backward(&g, self.shape(x), pad);
                    self.accumulate(&mut grads, x, gx);
                }
                Op::Mean(x) => {
                    let s = self.shape(x);
                    let v = g.item() * T::from_f64_lossy(1.0 / s.len() as f64);
                    self.accumulate(&mut grads, x, Tensor::full(s, v));
                }
                Op::MeanSquare(x) => {
                    let xv = self.value(x);
                    let k = g.item() * T::from_f64_lossy(2.0 / xv.len() as f64);
                    self.accumulate(&mut grads, x, xv.scale(k));
                }
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.accumulate(&g),
            slot => *slot = Some(g),
        }
    }
}

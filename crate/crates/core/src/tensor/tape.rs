//! Reverse-mode gradient tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Each
//! primitive appends a node holding its output and whatever it needs for the
//! backward rule; [`Tape::backward`] walks the nodes in reverse creation
//! order, which is a valid topological order by construction. A tape is
//! single-threaded and meant to be dropped after the backward pass.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::ops::{self, Activation, Padding};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of a backward rule, used as a negative control for
/// the gradient-check suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the convolution weight gradient by 1.01.
    ConvWeightGrad,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_c: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        out_c: usize,
        k: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add(Var, Var),
    Mul(Var, Var),
    /// `[C, H, W] * [C]` broadcast over the spatial plane.
    MulChannel {
        x: Var,
        w: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Concat {
        parts: Vec<Var>,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Dice {
        pred: Var,
        target: Tensor<T>,
        mask: Tensor<T>,
        num: f64,
        den: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    fault: Option<Fault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Gradient of the last [`Tape::backward`] target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ops::conv_geom(
            "conv2d",
            self.shape(x),
            self.shape(w),
            b.map(|b| self.shape(b)),
            stride,
            padding,
        )?;
        let out_c = self.shape(w)[0];
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            &geom,
            out_c,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[out_c, geom.oh, geom.ow], y)?;
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv { x, w, b, geom, out_c }, rg))
    }

    /// Stride-2 transposed convolution; see [`super::conv_transpose2d`].
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        ops::conv_transpose_check("conv_transpose2d", self.shape(x), self.shape(w), b.map(|b| self.shape(b)), 2)?;
        let (c, h, wd) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (out_c, k) = (self.shape(w)[0], self.shape(w)[2]);
        let y = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            c,
            h,
            wd,
            out_c,
            k,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[out_c, 2 * h, 2 * wd], y)?;
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::ConvTranspose { x, w, b, out_c, k }, rg))
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (value, argmax) = ops::maxpool2d(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.needs(x);
        self.push(value, Op::Act { x, kind }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        ops::same_shape("pointwise", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x[c, :, :] * w[c]`.
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Rank {
                op: "mul_channel",
                expected: 3,
                shape: xs,
            });
        }
        if self.shape(w) != [xs[0]] {
            return Err(Error::Dimension {
                op: "mul_channel",
                axis: "channels",
                expected: xs[0],
                actual: self.value(w).numel(),
            });
        }
        let plane = xs[1] * xs[2];
        let wv = self.value(w).data();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .zip(wv)
            .flat_map(|(chunk, &s)| chunk.iter().map(move |&v| v * s))
            .collect();
        let value = Tensor::new(&xs, data)?;
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::MulChannel { x, w }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::from_f64(factor);
        let value = self.value(x).map(|v| v * factor);
        let rg = self.needs(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Concatenate along the leading axis; the remaining axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::param("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 {
                return Err(Error::Rank {
                    op: "concat",
                    expected: tail.len() + 1,
                    shape: s.to_vec(),
                });
            }
            if let Some(j) = (0..tail.len()).find(|&j| s[j + 1] != tail[j]) {
                const AXES: [&str; 3] = ["height", "width", "depth"];
                return Err(Error::Dimension {
                    op: "concat",
                    axis: AXES.get(j).copied().unwrap_or("trailing"),
                    expected: tail[j],
                    actual: s[j + 1],
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Channel concatenation of two `[C, H, W]` maps (first operand first).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        ops::spatial_match("concat_channels", self.shape(a), self.shape(b))?;
        self.concat(&[a, b])
    }

    /// Sub-range `[start, start + len)` of the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow0(start, len)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Narrow { x, start }, rg))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        ops::check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask: Vec<T> = ops::dropout_mask(self.value(x).numel(), rate, rng);
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(T::from_f64(self.value(x).sum()));
        let rg = self.needs(x);
        self.push(value, Op::Sum { x }, rg)
    }

    /// Masked soft-Dice loss
    /// `1 - (2 Σ m p g + eps) / (Σ m p² + Σ m g² + eps)`.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>, mask: &Tensor<T>, eps: f64) -> Result<Var> {
        ops::same_shape("dice_loss", self.shape(pred), target.shape())?;
        ops::same_shape("dice_loss", self.shape(pred), mask.shape())?;
        let (num, den) = dice_terms(self.value(pred).data(), target.data(), mask.data(), eps);
        let value = Tensor::scalar(T::from_f64(1.0 - num / den));
        let rg = self.needs(pred);
        Ok(self.push(
            value,
            Op::Dice {
                pred,
                target: target.clone(),
                mask: mask.clone(),
                num,
                den,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar output. Gradients of leaves are kept and
    /// readable through [`Tape::grad`]; intermediate gradients are released.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::param(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(self.shape(output)));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, out_c } => {
                let need = [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))];
                let r = kernels::conv2d_backward(self.value(*x).data(), geom, *out_c, self.value(*w).data(), gd, need);
                let dw = r.dw.map(|mut dw| {
                    if self.fault == Some(Fault::ConvWeightGrad) {
                        dw.iter_mut().for_each(|v| *v = *v * T::from_f64(1.01));
                    }
                    dw
                });
                self.accumulate_opt(grads, *x, r.dx);
                self.accumulate_opt(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate_opt(grads, *b, r.db);
                }
            }
            Op::ConvTranspose { x, w, b, out_c, k } => {
                let xs = self.shape(*x);
                let need = [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))];
                let r = kernels::conv_transpose2d_backward(
                    self.value(*x).data(),
                    xs[0],
                    xs[1],
                    xs[2],
                    *out_c,
                    *k,
                    self.value(*w).data(),
                    gd,
                    need,
                );
                self.accumulate_opt(grads, *x, r.dx);
                self.accumulate_opt(grads, *w, r.dw);
                if let Some(b) = b {
                    self.accumulate_opt(grads, *b, r.db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] = dx[src] + gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Act { x, kind } => {
                let y = nodes[i].value.data();
                let dx = y
                    .iter()
                    .zip(gd)
                    .map(|(&yv, &gv)| gv * kind.derivative_from_output(yv))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::MulChannel { x, w } => {
                let xv = self.value(*x);
                let plane = xv.shape()[1] * xv.shape()[2];
                let wv = self.value(*w).data();
                if self.needs(*x) {
                    let dx = gd
                        .chunks(plane)
                        .zip(wv)
                        .flat_map(|(chunk, &s)| chunk.iter().map(move |&v| v * s))
                        .collect();
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let dw = gd
                        .chunks(plane)
                        .zip(xv.data().chunks(plane))
                        .map(|(gc, xc)| T::from_f64(gc.iter().zip(xc).map(|(a, b)| a.as_f64() * b.as_f64()).sum()))
                        .collect();
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, gd.iter().map(|&v| v * *factor).collect());
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs(p) {
                        self.accumulate(grads, p, gd[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, start } => {
                let xv = self.value(*x);
                let inner: usize = xv.shape()[1..].iter().product();
                let mut dx = vec![T::zero(); xv.numel()];
                dx[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, gd.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Dice {
                pred,
                target,
                mask,
                num,
                den,
            } => {
                let upstream = gd[0].as_f64();
                let scale = -2.0 * upstream / (den * den);
                let dp = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(mask.data())
                    .map(|((&p, &t), &m)| {
                        let (p, t, m) = (p.as_f64(), t.as_f64(), m.as_f64());
                        T::from_f64(scale * m * (t * den - num * p))
                    })
                    .collect();
                self.accumulate(grads, *pred, dp);
            }
        }
    }

    fn accumulate_opt(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Option<Vec<T>>) {
        if let Some(d) = delta {
            self.accumulate(grads, v, d);
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(&delta)
                .for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(Tensor::new(self.shape(v), delta).expect("gradient shape")),
        }
    }
}

/// Numerator and denominator of the smoothed soft-Dice ratio, accumulated in `f64`.
pub(crate) fn dice_terms<T: Real>(pred: &[T], target: &[T], mask: &[T], eps: f64) -> (f64, f64) {
    let (mut inter, mut pp, mut gg) = (0.0f64, 0.0f64, 0.0f64);
    for ((&p, &g), &m) in pred.iter().zip(target).zip(mask) {
        let (p, g, m) = (p.as_f64(), g.as_f64(), m.as_f64());
        inter += m * p * g;
        pp += m * p * p;
        gg += m * g * g;
    }
    (2.0 * inter + eps, pp + gg + eps)
}

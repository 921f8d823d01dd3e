//! Reverse-mode automatic differentiation over whole tensors.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes only reference earlier nodes, so the
//! tape order is already topological and `backward` walks it once in
//! reverse.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, NormCache, Padding};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry },
    Conv2dTranspose { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry },
    Pad { input: Var, pad: usize },
    InstanceNorm { input: Var, gamma: Var, beta: Var, cache: NormCache<T> },
    Leaky { input: Var, alpha: T },
    Tanh { input: Var },
    Dropout { input: Var, mask: Vec<T> },
    Concat { a: Var, b: Var },
    BceLogits { logits: Var, targets: Vec<T> },
    L1Mean { a: Var, b: Var },
    Mean { input: Var },
    Dot { input: Var, weights: Vec<T> },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, kept for leaves and the loss.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn reachable(&self, var: Var) -> bool {
        self.get(var).is_some()
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

fn same_dims<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn kernel4<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match t.dims() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        other => Err(Error::shape(op, format!("kernel must be rank 4, got {:?}", other))),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: false }
    }

    /// Test mode: every op output is checked for NaN/inf.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: value.detached(), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: &Tensor<T>) -> Var {
        self.leaf(value.detached(), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            let dims = self.value(b).dims();
            if dims != [channels] {
                return Err(Error::shape(op, format!("bias {:?} for {} output channels", dims, channels)));
            }
        }
        Ok(())
    }

    /// NHWC convolution with a `[kh, kw, cin, cout]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let geom = ConvGeometry::conv(x.nhwc()?, kernel4("conv2d", k)?, stride, padding)?;
        self.check_bias("conv2d", bias, geom.cout)?;
        let out = kernels::conv2d_forward(x.data(), k.data(), bias.map(|b| self.value(b).data()), &geom);
        let value = Tensor::new([geom.batch, geom.out_h, geom.out_w, geom.cout], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push("conv2d", value, Op::Conv2d { input, kernel, bias, geom }, &inputs)
    }

    /// Same-padded transposed convolution with a `[kh, kw, cout, cin]`
    /// kernel; spatial dims grow by `stride`.
    pub fn conv2d_transpose(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let y = self.value(input);
        let k = self.value(kernel);
        let geom = ConvGeometry::transposed(y.nhwc()?, kernel4("conv2d_transpose", k)?, stride)?;
        self.check_bias("conv2d_transpose", bias, geom.cin)?;
        let out = kernels::conv2d_transpose_forward(y.data(), k.data(), bias.map(|b| self.value(b).data()), &geom);
        let value = Tensor::new([geom.batch, geom.in_h, geom.in_w, geom.cin], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push("conv2d_transpose", value, Op::Conv2dTranspose { input, kernel, bias, geom }, &inputs)
    }

    /// Zero-pads height and width by `pad` on each side.
    pub fn pad_spatial(&mut self, input: Var, pad: usize) -> Result<Var> {
        if pad == 0 {
            return Ok(input);
        }
        let x = self.value(input);
        let [n, h, w, c] = x.nhwc()?;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![T::zero(); n * ph * pw * c];
        for b in 0..n {
            for y in 0..h {
                let src = &x.data()[((b * h + y) * w) * c..][..w * c];
                out[((b * ph + y + pad) * pw + pad) * c..][..w * c].copy_from_slice(src);
            }
        }
        let value = Tensor::new([n, ph, pw, c], out)?;
        self.push("pad_spatial", value, Op::Pad { input, pad }, &[input])
    }

    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(input);
        let dims = x.nhwc()?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.dims() != [dims[3]] || b.dims() != [dims[3]] {
            return Err(Error::shape(
                "instance_norm",
                format!("gamma {:?} / beta {:?} for input {:?}", g.dims(), b.dims(), dims),
            ));
        }
        let (out, cache) = kernels::instance_norm_forward(x.data(), dims, g.data(), b.data(), T::from_f64_lossy(eps));
        let value = Tensor::new(dims, out)?;
        self.push("instance_norm", value, Op::InstanceNorm { input, gamma, beta, cache }, &[input, gamma, beta])
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.leaky(input, T::zero(), "relu"),
            Activation::LeakyRelu(alpha) => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::Argument(format!("leaky slope {alpha} outside (0, 1)")));
                }
                self.leaky(input, T::from_f64_lossy(alpha), "leaky_relu")
            }
            Activation::Tanh => {
                let value = self.value(input).map(|v| v.tanh());
                self.push("tanh", value, Op::Tanh { input }, &[input])
            }
        }
    }

    fn leaky(&mut self, input: Var, alpha: T, name: &'static str) -> Result<Var> {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { alpha * v });
        self.push(name, value, Op::Leaky { input, alpha }, &[input])
    }

    /// Inverted dropout. Identity when not training or when `rate` is 0.
    pub fn dropout(&mut self, input: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.dims(), out)?;
        self.push("dropout", value, Op::Dropout { input, mask }, &[input])
    }

    /// Channel concatenation `[a | b]` of two NHWC tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, h, w, ca] = ta.nhwc()?;
        let [nb, hb, wb, cb] = tb.nhwc()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", ta.dims(), tb.dims())));
        }
        let mut out = Vec::with_capacity(n * h * w * (ca + cb));
        if ca + cb > 0 {
            for px in 0..n * h * w {
                out.extend_from_slice(&ta.data()[px * ca..][..ca]);
                out.extend_from_slice(&tb.data()[px * cb..][..cb]);
            }
        }
        let value = Tensor::new([n, h, w, ca + cb], out)?;
        self.push("concat_channels", value, Op::Concat { a, b }, &[a, b])
    }

    /// Mean binary cross-entropy on raw logits, in the overflow-free form
    /// `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        same_dims("bce_with_logits_mean", z, targets)?;
        if targets.data().iter().any(|&y| y < T::zero() || y > T::one()) {
            return Err(Error::Argument("cross-entropy targets must lie in [0, 1]".into()));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| {
                let (z, y) = (z.as_f64(), y.as_f64());
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let value = Tensor::scalar(T::from_f64_lossy(total / z.len() as f64));
        let targets = targets.data().to_vec();
        self.push("bce_with_logits_mean", value, Op::BceLogits { logits, targets }, &[logits])
    }

    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_dims("l1_mean", ta, tb)?;
        let total: f64 = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs().as_f64()).sum();
        let value = Tensor::scalar(T::from_f64_lossy(total / ta.len() as f64));
        self.push("l1_mean", value, Op::L1Mean { a, b }, &[a, b])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let total: f64 = x.data().iter().map(|v| v.as_f64()).sum();
        let value = Tensor::scalar(T::from_f64_lossy(total / x.len() as f64));
        self.push("mean", value, Op::Mean { input }, &[input])
    }

    /// `Σ input ⊙ weights` against a constant weight tensor.
    pub fn dot(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        same_dims("dot", x, weights)?;
        let total: f64 = x.data().iter().zip(weights.data()).map(|(&a, &w)| (a * w).as_f64()).sum();
        let value = Tensor::scalar(T::from_f64_lossy(total));
        let weights = weights.data().to_vec();
        self.push("dot", value, Op::Dot { input, weights }, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_dims("add", ta, tb)?;
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.dims(), out)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = T::from_f64_lossy(factor);
        let value = self.value(input).map(|v| v * factor);
        self.push("scale", value, Op::Scale { input, factor }, &[input])
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got dims {:?}",
                root.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dout) = (if idx == loss.0 { grads[idx].clone() } else { grads[idx].take() }) else {
                continue;
            };
            let wants = |v: Var| self.nodes[v.0].requires_grad;
            let mut send = |v: Var, g: Vec<T>| accumulate(&mut grads[v.0], g);

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { input, kernel, bias, geom } | Op::Conv2dTranspose { input, kernel, bias, geom } => {
                    let want = [wants(*input), wants(*kernel), bias.is_some_and(wants)];
                    let (x, k) = (self.value(*input).data(), self.value(*kernel).data());
                    let g = if matches!(node.op, Op::Conv2d { .. }) {
                        kernels::conv2d_backward(x, k, &dout, geom, want)
                    } else {
                        kernels::conv2d_transpose_backward(x, k, &dout, geom, want)
                    };
                    if let Some(dx) = g.input {
                        send(*input, dx);
                    }
                    if let Some(dk) = g.kernel {
                        send(*kernel, dk);
                    }
                    if let (Some(b), Some(db)) = (bias, g.bias) {
                        send(*b, db);
                    }
                }
                Op::Pad { input, pad } => {
                    let [n, h, w, c] = self.value(*input).nhwc()?;
                    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                    let mut dx = Vec::with_capacity(n * h * w * c);
                    for b in 0..n {
                        for y in 0..h {
                            dx.extend_from_slice(&dout[((b * ph + y + pad) * pw + pad) * c..][..w * c]);
                        }
                    }
                    send(*input, dx);
                }
                Op::InstanceNorm { input, gamma, beta, cache } => {
                    let dims = self.value(*input).nhwc()?;
                    let (dx, dg, db) = kernels::instance_norm_backward(&dout, dims, self.value(*gamma).data(), cache);
                    if wants(*input) {
                        send(*input, dx);
                    }
                    if wants(*gamma) {
                        send(*gamma, dg);
                    }
                    if wants(*beta) {
                        send(*beta, db);
                    }
                }
                Op::Leaky { input, alpha } => {
                    let x = self.value(*input).data();
                    let dx = x.iter().zip(&dout).map(|(&v, &d)| if v > T::zero() { d } else { *alpha * d }).collect();
                    send(*input, dx);
                }
                Op::Tanh { input } => {
                    let dx = node.value.data().iter().zip(&dout).map(|(&y, &d)| d * (T::one() - y * y)).collect();
                    send(*input, dx);
                }
                Op::Dropout { input, mask } => {
                    send(*input, dout.iter().zip(mask).map(|(&d, &m)| d * m).collect());
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).dims()[3];
                    let cb = self.value(*b).dims()[3];
                    let pixels = node.value.len() / (ca + cb).max(1);
                    let (mut da, mut db) = (Vec::with_capacity(pixels * ca), Vec::with_capacity(pixels * cb));
                    if ca + cb > 0 {
                        for px in dout.chunks_exact(ca + cb) {
                            da.extend_from_slice(&px[..ca]);
                            db.extend_from_slice(&px[ca..]);
                        }
                    }
                    if wants(*a) {
                        send(*a, da);
                    }
                    if wants(*b) {
                        send(*b, db);
                    }
                }
                Op::BceLogits { logits, targets } => {
                    let z = self.value(*logits).data();
                    let scale = dout[0] / T::from_usize(z.len()).unwrap();
                    let dz = z
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| {
                            let sig = if z >= T::zero() {
                                (T::one() + (-z).exp()).recip()
                            } else {
                                let e = z.exp();
                                e / (T::one() + e)
                            };
                            (sig - y) * scale
                        })
                        .collect();
                    send(*logits, dz);
                }
                Op::L1Mean { a, b } => {
                    let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                    let scale = dout[0] / T::from_usize(xa.len()).unwrap();
                    let sign: Vec<T> = xa
                        .iter()
                        .zip(xb)
                        .map(|(&x, &y)| {
                            if x > y {
                                scale
                            } else if x < y {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    if wants(*b) {
                        send(*b, sign.iter().map(|&s| -s).collect());
                    }
                    if wants(*a) {
                        send(*a, sign);
                    }
                }
                Op::Mean { input } => {
                    let n = self.value(*input).len();
                    send(*input, vec![dout[0] / T::from_usize(n).unwrap(); n]);
                }
                Op::Dot { input, weights } => {
                    send(*input, weights.iter().map(|&w| w * dout[0]).collect());
                }
                Op::Add { a, b } => {
                    if wants(*a) {
                        send(*a, dout.clone());
                    }
                    if wants(*b) {
                        send(*b, dout);
                    }
                }
                Op::Scale { input, factor } => {
                    send(*input, dout.iter().map(|&d| d * *factor).collect());
                }
            }
        }
        Ok(Gradients { grads })
    }
}

//! Downsample/upsample building blocks shared by both networks.

use std::slice;

use crate::error::Result;
use crate::kernels::Padding;
use crate::rng::Rng;
use crate::tape::{Activation, Gradients, Tape, Var};
use crate::tensor::{Element, Tensor};

pub const KERNEL_SIZE: usize = 4;
pub const STRIDE: usize = 2;
pub const INIT_STDDEV: f64 = 0.02;

/// Anything holding trainable tensors in a fixed order.
///
/// `forward` implementations consume bound vars in exactly the order
/// `params` lists them.
pub trait Module<T: Element> {
    fn params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every parameter on `tape`.
    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.detached(), trainable))
            .collect()
    }

    /// Writes the gradient of each bound parameter into its grad buffer;
    /// parameters the loss does not reach get zeros.
    fn store_grads(&mut self, grads: &Gradients<T>, bound: &[Var]) {
        for (param, &var) in self.params_mut().into_iter().zip(bound) {
            let g = grads.get(var).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); param.len()]);
            param.set_grad(g).expect("gradient shape follows the bound parameter");
        }
    }
}

pub(crate) fn next_var(bound: &mut slice::Iter<'_, Var>) -> Var {
    *bound.next().expect("parameter binding shorter than the module")
}

/// N(0, 0.02²) samples.
pub fn init_normal<T: Element>(dims: impl Into<Vec<usize>>, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::from_f64_lossy(rng.normal(0.0, INIT_STDDEV)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Element> InstanceNorm<T> {
    pub fn new(channels: usize, eps: f64, rng: &mut Rng) -> Self {
        Self {
            gamma: init_normal([channels], rng),
            beta: Tensor::zeros([channels]),
            eps,
        }
    }

    fn forward(&self, tape: &mut Tape<T>, bound: &mut slice::Iter<'_, Var>, x: Var) -> Result<Var> {
        let gamma = next_var(bound);
        let beta = next_var(bound);
        tape.instance_norm(x, gamma, beta, self.eps)
    }
}

/// conv(k4, s2, same, no bias) → optional instance norm → leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleBlock<T> {
    /// `[4, 4, cin, cout]`
    pub kernel: Tensor<T>,
    pub norm: Option<InstanceNorm<T>>,
    pub alpha: f64,
}

impl<T: Element> DownsampleBlock<T> {
    pub fn new(cin: usize, cout: usize, apply_norm: bool, alpha: f64, eps: f64, rng: &mut Rng) -> Self {
        let kernel = init_normal([KERNEL_SIZE, KERNEL_SIZE, cin, cout], rng);
        let norm = apply_norm.then(|| InstanceNorm::new(cout, eps, rng));
        Self { kernel, norm, alpha }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[3]
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &mut slice::Iter<'_, Var>, x: Var) -> Result<Var> {
        let kernel = next_var(bound);
        let mut h = tape.conv2d(x, kernel, None, STRIDE, Padding::Same)?;
        if let Some(norm) = &self.norm {
            h = norm.forward(tape, bound, h)?;
        }
        tape.activation(h, Activation::LeakyRelu(self.alpha))
    }
}

impl<T: Element> Module<T> for DownsampleBlock<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("kernel".to_string(), &self.kernel)];
        if let Some(n) = &self.norm {
            out.push(("gamma".into(), &n.gamma));
            out.push(("beta".into(), &n.beta));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.kernel];
        if let Some(n) = &mut self.norm {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out
    }
}

/// transposed conv(k4, s2, same, no bias) → instance norm → optional
/// dropout → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleBlock<T> {
    /// `[4, 4, cout, cin]`
    pub kernel: Tensor<T>,
    pub norm: InstanceNorm<T>,
    pub dropout: Option<f64>,
}

impl<T: Element> UpsampleBlock<T> {
    pub fn new(cin: usize, cout: usize, dropout: Option<f64>, eps: f64, rng: &mut Rng) -> Self {
        let kernel = init_normal([KERNEL_SIZE, KERNEL_SIZE, cout, cin], rng);
        let norm = InstanceNorm::new(cout, eps, rng);
        Self { kernel, norm, dropout }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[3]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[2]
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &mut slice::Iter<'_, Var>,
        x: Var,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Var> {
        let kernel = next_var(bound);
        let mut h = tape.conv2d_transpose(x, kernel, None, STRIDE)?;
        h = self.norm.forward(tape, bound, h)?;
        if let Some(rate) = self.dropout {
            h = tape.dropout(h, rate, rng, training)?;
        }
        tape.activation(h, Activation::Relu)
    }
}

impl<T: Element> Module<T> for UpsampleBlock<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("kernel".to_string(), &self.kernel),
            ("gamma".into(), &self.norm.gamma),
            ("beta".into(), &self.norm.beta),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.kernel, &mut self.norm.gamma, &mut self.norm.beta]
    }
}

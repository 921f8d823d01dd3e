//! Adam with bias correction, one state per network.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.dims()), Tensor::zeros(p.dims())))
            .unzip();
        Self { config, step: 0, m, v }
    }

    /// Applies one update from each parameter's grad buffer. Nothing is
    /// modified if any parameter is missing a gradient or mismatches.
    pub fn step(&mut self, mut params: Vec<&mut Tensor<T>>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters for an optimizer over {}", params.len(), self.m.len()),
            ));
        }
        for (i, (p, m)) in params.iter().zip(&self.m).enumerate() {
            if p.dims() != m.dims() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i} has dims {:?}, moments {:?}", p.dims(), m.dims()),
                ));
            }
            if p.grad().is_none() {
                return Err(Error::Argument(format!("parameter {i} has no gradient")));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::from_f64_lossy(c.lr);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let eps = T::from_f64_lossy(c.eps);
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);

        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().expect("checked above").to_vec();
            let values = p.data_mut();
            for (((x, m), v), g) in values.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

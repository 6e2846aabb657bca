use super::{Real, Tensor};
use crate::{Error, Result};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<R> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor<R>>,
    second: Vec<Tensor<R>>,
}

impl<R: Real> AdamW<R> {
    /// Moments are zero-initialised with the shapes of `params`.
    pub fn new(params: &[&Tensor<R>], lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [&mut Tensor<R>], grads: &[&[R]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "adamw",
                &[self.first.len()],
                &[params.len(), grads.len()],
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != m.shape() || g.len() != p.numel() {
                return Err(Error::dim("adamw", m.shape(), p.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (R::of(self.beta1), R::of(self.beta2));
        let bc1 = R::of(1.0 - self.beta1.powi(t));
        let bc2 = R::of(1.0 - self.beta2.powi(t));
        let (lr, eps, wd) = (R::of(self.lr), R::of(self.eps), R::of(self.weight_decay));
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = grads[i][j];
                m[j] = b1 * m[j] + (R::one() - b1) * gj;
                v[j] = b2 * v[j] + (R::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * wd * *w;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

//! AdamW with decoupled weight decay.

use crate::compute::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `params` with `grads` (same order and shapes on every
    /// call). `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Internal(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[k].len() != p.len() {
                return Err(Error::Internal(format!("parameter {k} changed shape")));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= self.lr * self.weight_decay * *x;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::row(&[1.0, -2.0]);
        let g = Tensor::row(&[0.3, -5.0]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = Tensor::row(&[1.0, -2.0]);
        let mut opt = AdamW::new(0.0, 0.01);
        opt.step(&mut [&mut p], &[Tensor::row(&[1.0, 1.0])])
            .unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn decay_without_gradient() {
        let mut p = Tensor::row(&[2.0]);
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(&mut [&mut p], &[Tensor::row(&[0.0])]).unwrap();
        assert!((p.item() - 1.9).abs() < 1e-12);
    }
}

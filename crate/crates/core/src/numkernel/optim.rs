use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::tensor::Tensor2;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Tensor2<T>>,
    v: Vec<Tensor2<T>>,
    step: i32,
}

impl<T: Real> Adam<T> {
    /// One moment buffer per parameter tensor, shaped like `shapes`.
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor2<T>], grads: &[Tensor2<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} params / {} grads for {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

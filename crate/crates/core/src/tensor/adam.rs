//! Adam optimizer state over a fixed list of parameter tensors.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam hyper-parameters. The defaults are the standard
/// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators, kept in f64 regardless of the
/// parameter dtype so the update arithmetic is identical for f32 and f64 runs.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub params: AdamParams,
}

impl AdamState {
    pub fn new<T: Scalar>(tensors: &[Tensor<T>], params: AdamParams) -> Self {
        AdamState {
            m: tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            t: 0,
            params,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update over all parameter tensors. If any gradient entry is
    /// non-finite the call fails and no parameter is touched.
    pub fn step<T: Scalar>(
        &mut self,
        tensors: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if tensors.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "adam: state tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                tensors.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in tensors.iter().zip(grads).enumerate() {
            if !p.same_shape(g) {
                return Err(Error::dim(format!(
                    "adam: param {i} shape {:?} vs grad shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "adam: non-finite gradient in tensor {i}; parameters left unchanged"
                )));
            }
        }

        self.t += 1;
        let b1 = self.params.beta1;
        let b2 = self.params.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            for ((pj, &gj), (mj, vj)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gf = gj.to_f64();
                *mj = b1 * *mj + (1.0 - b1) * gf;
                *vj = b2 * *vj + (1.0 - b2) * gf * gf;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                let upd = pj.to_f64() - lr * mhat / (vhat.sqrt() + self.params.eps);
                *pj = T::from_f64(upd);
            }
        }
        Ok(())
    }
}

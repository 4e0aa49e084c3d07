//! Finite-difference verification of tape gradients.
//!
//! Central differences in f64 against the reverse-mode result, coordinate by
//! coordinate. The error metric is relative for large gradients and absolute
//! near zero: `|ad - fd| / max(|ad|, |fd|, 1)`.

use crate::error::Result;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Worst disagreement found by [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_err: f64,
    pub input: usize,
    pub coord: usize,
    pub ad: f64,
    pub fd: f64,
}

fn eval_loss(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = build(&mut tape, &ids)?;
    Ok(tape.value(loss).data()[0])
}

/// Compare the tape gradient of a scalar loss against central differences over
/// every coordinate of every input.
///
/// `build` must construct the loss from the given leaves on the given tape;
/// it is re-invoked for each perturbed evaluation, so it must be deterministic.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
) -> Result<FdReport> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;

    let mut report = FdReport {
        max_err: 0.0,
        input: 0,
        coord: 0,
        ad: 0.0,
        fd: 0.0,
    };
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, base) in inputs.iter().enumerate() {
        let zeros;
        let ad_tensor = match tape.grad(ids[i]) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(base.shape());
                &zeros
            }
        };
        for j in 0..base.numel() {
            let x = base.data()[j];
            let h = 1e-5 * (1.0 + x.abs());
            perturbed[i].data_mut()[j] = x + h;
            let fp = eval_loss(&perturbed, build)?;
            perturbed[i].data_mut()[j] = x - h;
            let fm = eval_loss(&perturbed, build)?;
            perturbed[i].data_mut()[j] = x;
            let fd = (fp - fm) / (2.0 * h);
            let ad = ad_tensor.data()[j];
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            if err > report.max_err {
                report = FdReport {
                    max_err: err,
                    input: i,
                    coord: j,
                    ad,
                    fd,
                };
            }
        }
    }
    Ok(report)
}

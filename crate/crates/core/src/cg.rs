//! Conjugate gradient solver for symmetric positive definite linear maps.
//!
//! The map is supplied as a closure so callers can solve matrix-free systems
//! such as `(A^T A + rho I) x = b` without assembling anything. Inner products
//! accumulate in f64 regardless of the tensor dtype.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// What a conjugate gradient run achieved.
#[derive(Debug, Clone, Copy)]
pub struct CgOutcome {
    pub iterations: usize,
    /// Final residual norm divided by the right-hand-side norm.
    pub relative_residual: f64,
}

/// Solve `M x = b` for a symmetric positive definite map `M`.
///
/// Stops when the residual norm falls to `tol * ||b||`. The tolerance is
/// floored at 16 machine epsilons of the active dtype so f32 systems with an
/// f64-grade tolerance terminate instead of stagnating. A zero right-hand
/// side returns the zero solution immediately.
pub fn conjugate_gradient<T, F>(
    mut apply: F,
    b: &Tensor<T>,
    x0: Option<&Tensor<T>>,
    tol: f64,
    max_iters: usize,
) -> Result<(Tensor<T>, CgOutcome)>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    if tol <= 0.0 {
        return Err(Error::arg(format!("cg tolerance must be positive, got {tol}")));
    }
    let tol = tol.max(16.0 * T::epsilon().to_f64());
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok((
            Tensor::zeros(b.shape()),
            CgOutcome { iterations: 0, relative_residual: 0.0 },
        ));
    }

    let mut x = match x0 {
        Some(g) => {
            if !g.same_shape(b) {
                return Err(Error::dim(format!(
                    "cg initial guess shape {:?} does not match rhs {:?}",
                    g.shape(),
                    b.shape()
                )));
            }
            g.clone()
        }
        None => Tensor::zeros(b.shape()),
    };

    let mut r = b.sub(&apply(&x)?)?;
    let mut rr = r.norm_sq();
    if rr.sqrt() <= tol * b_norm {
        return Ok((x, CgOutcome { iterations: 0, relative_residual: rr.sqrt() / b_norm }));
    }
    let mut p = r.clone();

    for k in 1..=max_iters {
        let ap = apply(&p)?;
        let pap = p.dot(&ap)?;
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::Numeric(format!(
                "cg: map is not positive definite (p^T M p = {pap} at iteration {k})"
            )));
        }
        let alpha = rr / pap;
        x.axpy_assign(alpha, &p)?;
        r.axpy_assign(-alpha, &ap)?;
        let rr_next = r.norm_sq();
        if rr_next.sqrt() <= tol * b_norm {
            return Ok((
                x,
                CgOutcome { iterations: k, relative_residual: rr_next.sqrt() / b_norm },
            ));
        }
        let beta = rr_next / rr;
        rr = rr_next;
        // p = r + beta p
        let mut p_next = r.clone();
        p_next.axpy_assign(beta, &p)?;
        p = p_next;
    }

    Err(Error::NonConvergence {
        residual: rr.sqrt() / b_norm,
        iterations: max_iters,
    })
}

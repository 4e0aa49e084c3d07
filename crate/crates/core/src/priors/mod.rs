//! Regularizers for inverse problems: analytic quadratic priors with closed
//! forms (used as verification oracles) and learned network priors behind the
//! same interface.
//!
//! For a differentiable regularizer `phi`, the proximal operator
//! `prox(z, sigma) = argmin_x 1/2 ||x - z||^2 + sigma^2 phi(x)` acts as a MAP
//! Gaussian denoiser at noise level `sigma`, and the two views are linked by
//! the residual identity `sigma^2 grad(prox(z, sigma)) = z - prox(z, sigma)`.

pub mod checkpoint;
pub mod net;

use crate::cg::conjugate_gradient;
use crate::error::{Error, Result};
use crate::tensor::ops::{conv2d, Padding};
use crate::tensor::{Scalar, Tensor};

/// Common interface over regularizers. Capabilities vary: analytic priors
/// offer gradient, prox, and value; a gradient network offers only `grad`;
/// a denoiser offers only `prox`. Missing capabilities return an
/// unsupported-operation error.
pub trait Prior<T: Scalar> {
    fn has_grad(&self) -> bool {
        false
    }
    fn has_prox(&self) -> bool {
        false
    }
    fn has_value(&self) -> bool {
        false
    }

    /// Gradient of the regularizer at `x`.
    fn grad(&self, _x: &Tensor<T>) -> Result<Tensor<T>> {
        Err(Error::Unsupported("this prior does not provide a gradient".into()))
    }

    /// Proximal operator at noise level `sigma >= 0`, i.e. a MAP denoiser.
    fn prox(&self, _z: &Tensor<T>, _sigma: f64) -> Result<Tensor<T>> {
        Err(Error::Unsupported("this prior does not provide a proximal operator".into()))
    }

    /// The regularizer value `phi(x)` where a closed form exists.
    fn value(&self, _x: &Tensor<T>) -> Result<f64> {
        Err(Error::Unsupported("this prior does not provide a value".into()))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) {
        return Err(Error::arg(format!("prox noise level must be >= 0, got {sigma}")));
    }
    Ok(())
}

/// `phi(x) = 1/2 ||x||^2`. Everything is elementwise and exact.
#[derive(Debug, Clone, Copy, Default)]
pub struct TikhonovPrior;

impl<T: Scalar> Prior<T> for TikhonovPrior {
    fn has_grad(&self) -> bool {
        true
    }
    fn has_prox(&self) -> bool {
        true
    }
    fn has_value(&self) -> bool {
        true
    }

    fn grad(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.clone())
    }

    fn prox(&self, z: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        check_sigma(sigma)?;
        Ok(z.scale(1.0 / (1.0 + sigma * sigma)))
    }

    fn value(&self, x: &Tensor<T>) -> Result<f64> {
        Ok(0.5 * x.norm_sq())
    }
}

/// Apply the circular 4-neighbor discrete Laplacian to every channel.
pub fn laplacian_apply<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let taps = [0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0];
    let k = Tensor::from_vec(vec![1, 1, 3, 3], taps.iter().map(|&v| T::from_f64(v)).collect())?;
    let flat = x.reshaped(&[n * c, 1, h, w])?;
    conv2d(&flat, &k, Padding::Circular, 1)?.reshaped(&[n, c, h, w])
}

/// `phi(x) = 1/2 ||L x||^2` with `L` the circular 4-neighbor Laplacian.
/// `L` is symmetric, so `grad = L(Lx)`; the prox solves `(I + sigma^2 L^2) x = z`
/// by conjugate gradient. Requires spatial extents of at least 3.
#[derive(Debug, Clone, Copy, Default)]
pub struct LaplacianPrior;

impl LaplacianPrior {
    pub const CG_TOL: f64 = 1e-10;
    pub const CG_MAX_ITERS: usize = 500;
}

impl<T: Scalar> Prior<T> for LaplacianPrior {
    fn has_grad(&self) -> bool {
        true
    }
    fn has_prox(&self) -> bool {
        true
    }
    fn has_value(&self) -> bool {
        true
    }

    fn grad(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        laplacian_apply(&laplacian_apply(x)?)
    }

    fn prox(&self, z: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        check_sigma(sigma)?;
        if sigma == 0.0 {
            return Ok(z.clone());
        }
        let s2 = sigma * sigma;
        let (x, _) = conjugate_gradient(
            |v: &Tensor<T>| {
                let mut out = laplacian_apply(&laplacian_apply(v)?)?.scale(s2);
                out.add_assign(v)?;
                Ok(out)
            },
            z,
            None,
            Self::CG_TOL,
            Self::CG_MAX_ITERS,
        )?;
        Ok(x)
    }

    fn value(&self, x: &Tensor<T>) -> Result<f64> {
        Ok(0.5 * laplacian_apply(x)?.norm_sq())
    }
}

/// Per-pixel mean of `||sigma^2 G(D_sigma(z)) - (z - D_sigma(z))||^2`, the
/// quantity the gradient network is trained to drive to zero.
pub fn residual_identity_error<T: Scalar>(
    g: &dyn Prior<T>,
    d: &dyn Prior<T>,
    z: &Tensor<T>,
    sigma: f64,
) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::arg(format!(
            "residual identity is probed at sigma > 0, got {sigma}"
        )));
    }
    let den = d.prox(z, sigma)?;
    let grad = g.grad(&den)?;
    let s2 = sigma * sigma;
    let mut acc = 0.0;
    for i in 0..z.numel() {
        let lhs = s2 * grad.data()[i].to_f64();
        let rhs = z.data()[i].to_f64() - den.data()[i].to_f64();
        let diff = lhs - rhs;
        acc += diff * diff;
    }
    Ok(acc / z.numel() as f64)
}

//! Restoration algorithms: gradient descent with a plugged-in regularizer
//! gradient, gradient descent regularized by a denoising residual, and ADMM
//! with a plugged-in proximal step / denoiser.
//!
//! Plain gradient descent is the verification mode: for analytic priors and a
//! small enough step it decreases the objective monotonically and converges to
//! the closed-form minimizer. The Adam update rule is the production mode for
//! learned priors; `mu` is then the Adam learning rate.

pub mod dense;
pub mod unrolled;

pub use dense::{assemble_operator_matrix, assemble_prior_quadratic, map_closed_form};
pub use unrolled::{unrolled_gd_train, unrolled_loss_traced, UnrolledConfig, UnrolledLog};

use crate::cg::conjugate_gradient;
use crate::degrade::LinearOperator;
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::priors::Prior;
use crate::tensor::adam::{AdamParams, AdamState};
use crate::tensor::ops::{dihedral_apply, dihedral_inverse};
use crate::tensor::{Scalar, Tensor};

/// How an iterate is advanced from the gradient direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    /// `x <- x - mu * direction`.
    Plain,
    /// Adam on the iterate with learning rate `mu`.
    Adam,
}

/// Gradient descent configuration.
#[derive(Debug, Clone)]
pub struct GDConfig {
    /// Step size, or Adam learning rate under the adam rule.
    pub mu: f64,
    /// Regularization weight: the prior gradient enters scaled by `sigma^2`.
    pub sigma: f64,
    pub iters: usize,
    pub update: UpdateRule,
    /// Cycle the 8 dihedral transforms across iterations, evaluating the
    /// prior gradient in transformed coordinates.
    pub self_ensemble: bool,
    /// Record PSNR / objective curves (iterate MSE is always recorded).
    pub record_trace: bool,
    /// Stop once the consecutive-iterate MSE falls below this.
    pub early_stop_mse: Option<f64>,
}

impl GDConfig {
    pub fn plain(mu: f64, sigma: f64, iters: usize) -> Self {
        GDConfig {
            mu,
            sigma,
            iters,
            update: UpdateRule::Plain,
            self_ensemble: false,
            record_trace: true,
            early_stop_mse: None,
        }
    }

    pub fn adam(mu: f64, sigma: f64, iters: usize) -> Self {
        GDConfig { update: UpdateRule::Adam, ..Self::plain(mu, sigma, iters) }
    }

    fn validate(&self) -> Result<()> {
        if self.mu <= 0.0 {
            return Err(Error::arg(format!("step size must be positive, got {}", self.mu)));
        }
        if self.sigma < 0.0 {
            return Err(Error::arg(format!(
                "regularization weight must be non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Denoising-residual gradient descent configuration.
#[derive(Debug, Clone)]
pub struct REDConfig {
    /// Regularization weight `w`.
    pub weight: f64,
    /// Noise level the denoiser is evaluated at.
    pub sigma_f: f64,
    pub mu: f64,
    pub iters: usize,
    pub update: UpdateRule,
    pub record_trace: bool,
    pub early_stop_mse: Option<f64>,
}

impl REDConfig {
    pub fn plain(weight: f64, sigma_f: f64, mu: f64, iters: usize) -> Self {
        REDConfig {
            weight,
            sigma_f,
            mu,
            iters,
            update: UpdateRule::Plain,
            record_trace: true,
            early_stop_mse: None,
        }
    }

    pub fn adam(weight: f64, sigma_f: f64, mu: f64, iters: usize) -> Self {
        REDConfig { update: UpdateRule::Adam, ..Self::plain(weight, sigma_f, mu, iters) }
    }

    fn validate(&self) -> Result<()> {
        if self.weight < 0.0 {
            return Err(Error::arg(format!("weight must be non-negative, got {}", self.weight)));
        }
        if self.sigma_f <= 0.0 {
            return Err(Error::arg(format!(
                "denoiser noise level must be positive, got {}",
                self.sigma_f
            )));
        }
        if self.mu <= 0.0 {
            return Err(Error::arg(format!("step size must be positive, got {}", self.mu)));
        }
        Ok(())
    }
}

/// ADMM configuration. The problem noise weight is floored at 0.001/255 so a
/// noiseless instance still yields a positive penalty schedule.
#[derive(Debug, Clone)]
pub struct ADMMConfig {
    pub sigma: f64,
    /// Denoiser noise level at the first iteration.
    pub s_first: f64,
    /// Denoiser noise level at the last iteration.
    pub s_last: f64,
    pub iters: usize,
    pub record_trace: bool,
    pub early_stop_mse: Option<f64>,
}

impl ADMMConfig {
    pub const SIGMA_FLOOR: f64 = 0.001 / 255.0;

    pub fn new(sigma_n: f64, s_first: f64, s_last: f64, iters: usize) -> Result<Self> {
        if sigma_n < 0.0 {
            return Err(Error::arg(format!("noise level must be non-negative, got {sigma_n}")));
        }
        let cfg = ADMMConfig {
            sigma: sigma_n.max(Self::SIGMA_FLOOR),
            s_first,
            s_last,
            iters,
            record_trace: true,
            early_stop_mse: None,
        };
        cfg.schedule()?;
        Ok(cfg)
    }

    /// The derived penalty schedule `(rho_0, alpha)`.
    pub fn schedule(&self) -> Result<(f64, f64)> {
        admm_schedule(self.sigma, self.s_first, self.s_last, self.iters)
    }
}

/// Penalty schedule from the desired first and last denoiser noise levels:
/// `rho_0 = (sigma/s_first)^2` and `alpha = (s_first/s_last)^(2/N)`, so that
/// `s_k = sigma / sqrt(rho_k)` sweeps geometrically from `s_first` to
/// `s_last`.
pub fn admm_schedule(sigma: f64, s_first: f64, s_last: f64, iters: usize) -> Result<(f64, f64)> {
    if sigma <= 0.0 {
        return Err(Error::arg(format!("noise weight must be positive, got {sigma}")));
    }
    if s_last <= 0.0 || s_first < s_last {
        return Err(Error::arg(format!(
            "noise levels must satisfy s_first >= s_last > 0, got {s_first} and {s_last}"
        )));
    }
    if iters == 0 {
        return Err(Error::arg("iteration count must be at least 1"));
    }
    let rho0 = (sigma / s_first) * (sigma / s_first);
    let alpha = (s_first / s_last).powf(2.0 / iters as f64);
    Ok((rho0, alpha))
}

/// Per-iteration solver diagnostics. Iterate MSE is always filled; PSNR needs
/// a ground truth; the objective needs a prior with a value.
#[derive(Debug, Clone, Default)]
pub struct SolveTrace {
    pub psnr: Vec<f64>,
    pub iterate_mse: Vec<f64>,
    pub objective: Vec<f64>,
}

impl SolveTrace {
    pub fn new() -> Self {
        SolveTrace::default()
    }

    pub fn clear(&mut self) {
        self.psnr.clear();
        self.iterate_mse.clear();
        self.objective.clear();
    }
}

fn check_shapes<T: Scalar>(
    a: &LinearOperator<T>,
    y: &Tensor<T>,
    x_init: &Tensor<T>,
    ground_truth: Option<&Tensor<T>>,
) -> Result<()> {
    let (_, c, h, w) = y.dims4()?;
    if (c, h, w) != a.out_chw() {
        return Err(Error::dim(format!(
            "observation shape {:?} does not match operator output {:?}",
            y.shape(),
            a.out_chw()
        )));
    }
    let (_, c, h, w) = x_init.dims4()?;
    if (c, h, w) != a.in_chw() {
        return Err(Error::dim(format!(
            "initial estimate shape {:?} does not match operator input {:?}",
            x_init.shape(),
            a.in_chw()
        )));
    }
    if let Some(gt) = ground_truth {
        if !gt.same_shape(x_init) {
            return Err(Error::dim(format!(
                "ground truth shape {:?} does not match estimate {:?}",
                gt.shape(),
                x_init.shape()
            )));
        }
    }
    Ok(())
}

fn data_objective<T: Scalar>(a: &LinearOperator<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    Ok(0.5 * a.apply(x)?.sub(y)?.norm_sq())
}

/// Gradient descent on `1/2 ||Ax - y||^2 + sigma^2 phi(x)` where the prior
/// supplies `grad phi` (an analytic form or a learned gradient network).
/// Returns the final iterate; the trace accumulates per-iteration diagnostics
/// and survives divergence aborts.
pub fn pnp_gd<T: Scalar>(
    y: &Tensor<T>,
    a: &LinearOperator<T>,
    prior: &dyn Prior<T>,
    cfg: &GDConfig,
    x_init: &Tensor<T>,
    ground_truth: Option<&Tensor<T>>,
    trace: &mut SolveTrace,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_shapes(a, y, x_init, ground_truth)?;
    let s2 = cfg.sigma * cfg.sigma;
    if s2 > 0.0 && !prior.has_grad() {
        return Err(Error::Unsupported(
            "gradient descent needs a prior with a gradient".into(),
        ));
    }
    let with_objective = s2 == 0.0 || prior.has_value();

    let mut x = x_init.clone();
    let mut adam = match cfg.update {
        UpdateRule::Plain => None,
        UpdateRule::Adam => Some(AdamState::new(
            std::slice::from_ref(&x),
            AdamParams::default(),
        )),
    };

    for k in 0..cfg.iters {
        let r = a.apply(&x)?.sub(y)?;
        let mut dir = a.adjoint(&r)?;
        if s2 > 0.0 {
            let g = if cfg.self_ensemble {
                let t = k % 8;
                let gt_x = prior.grad(&dihedral_apply(&x, t))?;
                dihedral_inverse(&gt_x, t)
            } else {
                prior.grad(&x)?
            };
            dir.axpy_assign(s2, &g)?;
        }
        if !dir.is_finite() {
            return Err(Error::SolverDiverged { iteration: k });
        }

        let x_prev = x.clone();
        match adam.as_mut() {
            None => x.axpy_assign(-cfg.mu, &dir)?,
            Some(state) => {
                state.step(std::slice::from_mut(&mut x), std::slice::from_ref(&dir), cfg.mu)?
            }
        }
        if !x.is_finite() {
            return Err(Error::SolverDiverged { iteration: k });
        }

        let mse = x.mse(&x_prev)?;
        trace.iterate_mse.push(mse);
        if cfg.record_trace {
            if let Some(gt) = ground_truth {
                trace.psnr.push(psnr(&x, gt, 1.0)?);
            }
            if with_objective {
                let mut obj = data_objective(a, &x, y)?;
                if s2 > 0.0 {
                    obj += s2 * prior.value(&x)?;
                }
                trace.objective.push(obj);
            }
        }
        if let Some(threshold) = cfg.early_stop_mse {
            if mse < threshold {
                break;
            }
        }
    }
    Ok(x)
}

/// Gradient descent where the regularizer gradient is the denoising residual:
/// the direction is `A^T(Ax - y) + w (x - D_{sigma_f}(x))`.
pub fn red_gd<T: Scalar>(
    y: &Tensor<T>,
    a: &LinearOperator<T>,
    denoiser: &dyn Prior<T>,
    cfg: &REDConfig,
    x_init: &Tensor<T>,
    ground_truth: Option<&Tensor<T>>,
    trace: &mut SolveTrace,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_shapes(a, y, x_init, ground_truth)?;
    if cfg.weight > 0.0 && !denoiser.has_prox() {
        return Err(Error::Unsupported(
            "residual regularization needs a prior with a denoising/prox step".into(),
        ));
    }

    let mut x = x_init.clone();
    let mut adam = match cfg.update {
        UpdateRule::Plain => None,
        UpdateRule::Adam => Some(AdamState::new(
            std::slice::from_ref(&x),
            AdamParams::default(),
        )),
    };

    for k in 0..cfg.iters {
        let r = a.apply(&x)?.sub(y)?;
        let mut dir = a.adjoint(&r)?;
        if cfg.weight > 0.0 {
            let residual = x.sub(&denoiser.prox(&x, cfg.sigma_f)?)?;
            dir.axpy_assign(cfg.weight, &residual)?;
        }
        if !dir.is_finite() {
            return Err(Error::SolverDiverged { iteration: k });
        }

        let x_prev = x.clone();
        match adam.as_mut() {
            None => x.axpy_assign(-cfg.mu, &dir)?,
            Some(state) => {
                state.step(std::slice::from_mut(&mut x), std::slice::from_ref(&dir), cfg.mu)?
            }
        }
        if !x.is_finite() {
            return Err(Error::SolverDiverged { iteration: k });
        }

        let mse = x.mse(&x_prev)?;
        trace.iterate_mse.push(mse);
        if cfg.record_trace {
            if let Some(gt) = ground_truth {
                trace.psnr.push(psnr(&x, gt, 1.0)?);
            }
        }
        if let Some(threshold) = cfg.early_stop_mse {
            if mse < threshold {
                break;
            }
        }
    }
    Ok(x)
}

/// Solve `(A^T A + rho I) x = A^T y + rho v`, the quadratic data subproblem of
/// the splitting scheme. Identity and mask operators have elementwise closed
/// forms; everything else goes through conjugate gradient (tolerance 1e-10,
/// at most 500 iterations), warm-started when a previous solution is passed.
pub fn solve_data_subproblem<T: Scalar>(
    a: &LinearOperator<T>,
    y: &Tensor<T>,
    rho: f64,
    v: &Tensor<T>,
    warm: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if rho <= 0.0 {
        return Err(Error::arg(format!("penalty must be positive, got {rho}")));
    }
    let mut rhs = a.adjoint(y)?;
    if !rhs.same_shape(v) {
        return Err(Error::dim(format!(
            "auxiliary shape {:?} does not match operator input {:?}",
            v.shape(),
            rhs.shape()
        )));
    }
    rhs.axpy_assign(rho, v)?;

    if a.is_identity() {
        return Ok(rhs.scale(1.0 / (1.0 + rho)));
    }
    if let Some(plane) = a.mask_plane() {
        // A^T A is diagonal with the mask entries, so divide elementwise.
        let (n, c, h, w) = rhs.dims4()?;
        let hw = h * w;
        let mut x = rhs;
        for nc in 0..n * c {
            let base = nc * hw;
            for (i, m) in plane.data().iter().enumerate() {
                let denom = (*m).to_f64() + rho;
                let val = x.data()[base + i].to_f64() / denom;
                x.data_mut()[base + i] = T::from_f64(val);
            }
        }
        return Ok(x);
    }

    let (x, _) = conjugate_gradient(
        |p: &Tensor<T>| {
            let mut out = a.adjoint(&a.apply(p)?)?;
            out.axpy_assign(rho, p)?;
            Ok(out)
        },
        &rhs,
        warm,
        1e-10,
        500,
    )?;
    Ok(x)
}

/// Alternating direction method of multipliers with a plugged-in prox step:
/// per iteration an x-update through the data subproblem with
/// `v = z - l/rho`, a z-update `prox(x + l/rho, s)` at `s = sigma/sqrt(rho)`
/// (a denoiser when the prior is learned), the dual update
/// `l <- l + rho (x - z)`, and `rho <- rho * alpha`.
pub fn pnp_admm<T: Scalar>(
    y: &Tensor<T>,
    a: &LinearOperator<T>,
    prior: &dyn Prior<T>,
    cfg: &ADMMConfig,
    x_init: &Tensor<T>,
    ground_truth: Option<&Tensor<T>>,
    trace: &mut SolveTrace,
) -> Result<Tensor<T>> {
    check_shapes(a, y, x_init, ground_truth)?;
    if !prior.has_prox() {
        return Err(Error::Unsupported(
            "the splitting scheme needs a prior with a prox/denoising step".into(),
        ));
    }
    let (rho0, alpha) = cfg.schedule()?;
    let s2 = cfg.sigma * cfg.sigma;

    let mut rho = rho0;
    let mut x = x_init.clone();
    let mut z = x_init.clone();
    let mut l = Tensor::<T>::zeros(x_init.shape());

    for k in 0..cfg.iters {
        let x_prev = x.clone();

        let mut v = z.clone();
        v.axpy_assign(-1.0 / rho, &l)?;
        x = solve_data_subproblem(a, y, rho, &v, Some(&x_prev))?;

        let s_k = cfg.sigma / rho.sqrt();
        let mut zin = x.clone();
        zin.axpy_assign(1.0 / rho, &l)?;
        z = prior.prox(&zin, s_k)?;

        let diff = x.sub(&z)?;
        l.axpy_assign(rho, &diff)?;
        rho *= alpha;

        if !x.is_finite() || !z.is_finite() || !l.is_finite() {
            return Err(Error::SolverDiverged { iteration: k });
        }

        let mse = x.mse(&x_prev)?;
        trace.iterate_mse.push(mse);
        if cfg.record_trace {
            if let Some(gt) = ground_truth {
                trace.psnr.push(psnr(&x, gt, 1.0)?);
            }
            if prior.has_value() {
                let obj = data_objective(a, &x, y)? + s2 * prior.value(&x)?;
                trace.objective.push(obj);
            }
        }
        if let Some(threshold) = cfg.early_stop_mse {
            // The x iterate can repeat while the splitting is still far from
            // consensus (a masked data update returns v unchanged at missing
            // pixels), so the primal residual must be small as well.
            let primal = diff.norm_sq() / diff.numel() as f64;
            if mse < threshold && primal < threshold {
                break;
            }
        }
    }
    Ok(x)
}

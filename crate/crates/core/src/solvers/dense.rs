//! Closed-form minimizer of the quadratic objective, used as a ground-truth
//! oracle for the iterative solvers. Everything here is dense and capped at
//! 4096 unknowns.

use nalgebra::{DMatrix, DVector};

use crate::degrade::LinearOperator;
use crate::error::{Error, Result};
use crate::priors::Prior;
use crate::tensor::{Scalar, Tensor};

const MAX_UNKNOWNS: usize = 4096;

fn flat_len(chw: (usize, usize, usize)) -> usize {
    chw.0 * chw.1 * chw.2
}

/// Materialize the operator as a dense matrix by applying it to every basis
/// vector.
pub fn assemble_operator_matrix<T: Scalar>(a: &LinearOperator<T>) -> Result<DMatrix<f64>> {
    let n_in = flat_len(a.in_chw());
    let n_out = flat_len(a.out_chw());
    if n_in > MAX_UNKNOWNS || n_out > MAX_UNKNOWNS {
        return Err(Error::Unsupported(format!(
            "dense assembly is capped at {MAX_UNKNOWNS} unknowns, got {n_in}x{n_out}"
        )));
    }
    let (ci, hi, wi) = a.in_chw();
    let mut m = DMatrix::zeros(n_out, n_in);
    let mut e = Tensor::<T>::zeros(&[1, ci, hi, wi]);
    for j in 0..n_in {
        e.data_mut()[j] = T::from_f64(1.0);
        let col = a.apply(&e)?;
        for (i, v) in col.data().iter().enumerate() {
            m[(i, j)] = (*v).to_f64();
        }
        e.data_mut()[j] = T::from_f64(0.0);
    }
    Ok(m)
}

/// Materialize the prior gradient as a dense matrix, valid for quadratic
/// priors whose gradient is linear in the input.
pub fn assemble_prior_quadratic<T: Scalar>(
    prior: &dyn Prior<T>,
    chw: (usize, usize, usize),
) -> Result<DMatrix<f64>> {
    if !prior.has_grad() {
        return Err(Error::Unsupported(
            "dense assembly needs a prior with a gradient".into(),
        ));
    }
    let n = flat_len(chw);
    if n > MAX_UNKNOWNS {
        return Err(Error::Unsupported(format!(
            "dense assembly is capped at {MAX_UNKNOWNS} unknowns, got {n}"
        )));
    }
    let (c, h, w) = chw;
    let mut q = DMatrix::zeros(n, n);
    let mut e = Tensor::<T>::zeros(&[1, c, h, w]);
    for j in 0..n {
        e.data_mut()[j] = T::from_f64(1.0);
        let col = prior.grad(&e)?;
        for (i, v) in col.data().iter().enumerate() {
            q[(i, j)] = (*v).to_f64();
        }
        e.data_mut()[j] = T::from_f64(0.0);
    }
    Ok(q)
}

/// Solve `(A^T A + sigma^2 Q) x = A^T y` exactly by dense LU factorization,
/// where `Q` is the (linear) gradient of a quadratic prior. Single-image
/// batches only. The normal-equation residual of the returned solution is
/// checked against 1e-10 relative.
pub fn map_closed_form<T: Scalar>(
    a: &LinearOperator<T>,
    y: &Tensor<T>,
    prior: &dyn Prior<T>,
    sigma: f64,
) -> Result<Tensor<T>> {
    if sigma < 0.0 {
        return Err(Error::arg(format!("noise level must be non-negative, got {sigma}")));
    }
    let (n_batch, c, h, w) = y.dims4()?;
    if n_batch != 1 {
        return Err(Error::Unsupported(
            "the dense solver handles one image at a time".into(),
        ));
    }
    if (c, h, w) != a.out_chw() {
        return Err(Error::dim(format!(
            "observation shape {:?} does not match operator output {:?}",
            y.shape(),
            a.out_chw()
        )));
    }

    let amat = assemble_operator_matrix(a)?;
    let mut m = amat.transpose() * &amat;
    if sigma > 0.0 {
        let q = assemble_prior_quadratic(prior, a.in_chw())?;
        m += q * (sigma * sigma);
    }
    let rhs = amat.transpose() * DVector::from_iterator(y.numel(), y.data().iter().map(|v| (*v).to_f64()));

    let x = m
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("normal equations are singular".into()))?;

    let residual = (&m * &x - &rhs).norm() / rhs.norm().max(1.0);
    if residual > 1e-10 {
        return Err(Error::Numeric(format!(
            "normal-equation residual {residual:.3e} exceeds 1e-10"
        )));
    }

    let (ci, hi, wi) = a.in_chw();
    Ok(Tensor::from_fn(&[1, ci, hi, wi], |i| T::from_f64(x[i])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{build_operator, BlurSpec, DegradationSpec};
    use crate::priors::{LaplacianPrior, TikhonovPrior};
    use crate::solvers::{pnp_gd, GDConfig, SolveTrace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_task_with_tikhonov_shrinks_by_the_exact_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let a = build_operator(&DegradationSpec::Identity, (1, 8, 8)).unwrap();
        let y: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
        let sigma = 0.7;
        let x = map_closed_form(&a, &y, &TikhonovPrior, sigma).unwrap();
        let expect = y.scale(1.0 / (1.0 + sigma * sigma));
        assert!(x.sub(&expect).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn long_plain_gd_agrees_with_the_dense_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = DegradationSpec::Blur(BlurSpec::gaussian(3, 0.8).unwrap());
        let a: LinearOperator<f64> = build_operator(&spec, (1, 8, 8)).unwrap();
        let x_gt: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
        let y = a.apply(&x_gt).unwrap();
        let sigma = 0.3;
        let oracle = map_closed_form(&a, &y, &LaplacianPrior, sigma).unwrap();

        let mut cfg = GDConfig::plain(0.1, sigma, 100000);
        cfg.record_trace = false;
        cfg.early_stop_mse = Some(1e-30);
        let mut trace = SolveTrace::new();
        let x = pnp_gd(&y, &a, &LaplacianPrior, &cfg, &y, None, &mut trace).unwrap();
        let rel = x.sub(&oracle).unwrap().norm() / oracle.norm();
        assert!(rel <= 1e-6, "relative gap {rel}");
    }

    #[test]
    fn sigma_zero_falls_back_to_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let spec = DegradationSpec::Blur(BlurSpec::gaussian(3, 0.6).unwrap());
        let a: LinearOperator<f64> = build_operator(&spec, (1, 6, 6)).unwrap();
        let x_gt: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 6, 6], 0.0, 1.0, &mut rng);
        let y = a.apply(&x_gt).unwrap();
        // Noiseless and invertible: the least-squares solution is the truth.
        let x = map_closed_form(&a, &y, &TikhonovPrior, 0.0).unwrap();
        assert!(x.sub(&x_gt).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn oversized_problems_are_rejected() {
        let a = build_operator(&DegradationSpec::Identity, (3, 64, 64)).unwrap();
        let y = Tensor::<f64>::zeros(&[1, 3, 64, 64]);
        assert!(matches!(
            map_closed_form(&a, &y, &TikhonovPrior, 0.1),
            Err(Error::Unsupported(_))
        ));
        let a = build_operator(&DegradationSpec::Identity, (1, 8, 8)).unwrap();
        let y = Tensor::<f64>::zeros(&[2, 1, 8, 8]);
        assert!(map_closed_form(&a, &y, &TikhonovPrior, 0.1).is_err());
    }
}

//! Image quality metrics.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Peak signal-to-noise ratio in dB, computed over all channels jointly.
/// Identical inputs return `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::dim(format!(
            "psnr operands differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if peak <= 0.0 {
        return Err(Error::arg(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_inputs_hit_the_infinity_sentinel() {
        let a = Tensor::<f64>::full(&[1, 3, 4, 4], 0.25);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn constant_offset_gives_textbook_value() {
        let a = Tensor::<f64>::zeros(&[1, 1, 10, 10]);
        let b = Tensor::<f64>::full(&[1, 1, 10, 10], 0.1);
        let db = psnr(&a, &b, 1.0).unwrap();
        assert!((db - 20.0).abs() < 1e-12, "{db}");
    }

    #[test]
    fn matches_scalar_loop_reference_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let a: Tensor<f64> = Tensor::rand_uniform(&[1, 3, 9, 7], 0.0, 1.0, &mut rng);
            let b: Tensor<f64> = Tensor::rand_uniform(&[1, 3, 9, 7], 0.0, 1.0, &mut rng);
            let mut acc = 0.0;
            for i in 0..a.numel() {
                let d = a.data()[i] - b.data()[i];
                acc += d * d;
            }
            let reference = 10.0 * (1.0 / (acc / a.numel() as f64)).log10();
            let got = psnr(&a, &b, 1.0).unwrap();
            assert!((got - reference).abs() < 1e-9);
            assert_eq!(got, psnr(&b, &a, 1.0).unwrap());
        }
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_peak() {
        let a = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let b = Tensor::<f64>::zeros(&[1, 1, 4, 5]);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(psnr(&a, &a, 0.0).is_err());
    }
}

//! PNG input and output for `[0,1]`-valued image tensors. Grayscale files
//! map to one channel, everything else to three; saving quantizes to 8 bits,
//! so a round trip is exact to half a quantum.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Load a PNG as `[1, c, h, w]` with values in `[0, 1]`; `c` is 1 for
/// grayscale files and 3 otherwise.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)?;
    Ok(match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let (w, h) = (w as usize, h as usize);
            Tensor::from_fn(&[1, 1, h, w], |i| {
                let (y, x) = (i / w, i % w);
                T::from_f64(g.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0)
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let (w, h) = (w as usize, h as usize);
            let hw = h * w;
            Tensor::from_fn(&[1, 3, h, w], |i| {
                let c = i / hw;
                let (y, x) = ((i % hw) / w, i % w);
                T::from_f64(rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
            })
        }
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a single `[1, c, h, w]` tensor with one or three channels, clamping
/// to `[0, 1]` and rounding to 8 bits.
pub fn save_png<T: Scalar>(path: &Path, x: &Tensor<T>) -> Result<()> {
    let (n, c, h, w) = x.dims4()?;
    if n != 1 {
        return Err(Error::dim(format!("can only save single images, got batch {n}")));
    }
    let hw = h * w;
    match c {
        1 => {
            let img = ImageBuffer::from_fn(w as u32, h as u32, |px, py| {
                Luma([quantize(x.data()[py as usize * w + px as usize].to_f64())])
            });
            img.save(path)?;
        }
        3 => {
            let img = ImageBuffer::from_fn(w as u32, h as u32, |px, py| {
                let at = py as usize * w + px as usize;
                Rgb([
                    quantize(x.data()[at].to_f64()),
                    quantize(x.data()[hw + at].to_f64()),
                    quantize(x.data()[2 * hw + at].to_f64()),
                ])
            });
            img.save(path)?;
        }
        other => {
            return Err(Error::Unsupported(format!(
                "PNG output needs 1 or 3 channels, got {other}"
            )))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rgb_round_trip_stays_within_half_a_quantum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.png");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = Tensor::rand_uniform(&[1, 3, 9, 13], 0.0, 1.0, &mut rng);
        save_png(&path, &x).unwrap();
        let back: Tensor<f64> = load_png(&path).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert!(back.sub(&x).unwrap().max_abs() <= 1.0 / 510.0 + 1e-12);
    }

    #[test]
    fn grayscale_round_trip_keeps_one_channel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f32> = Tensor::rand_uniform(&[1, 1, 7, 5], 0.0, 1.0, &mut rng);
        save_png(&path, &x).unwrap();
        let back: Tensor<f32> = load_png(&path).unwrap();
        assert_eq!(back.shape(), &[1, 1, 7, 5]);
        assert!(back.sub(&x).unwrap().max_abs() <= 1.0 / 510.0 + 1e-6);
    }

    #[test]
    fn out_of_range_values_clamp_and_bad_shapes_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clamp.png");
        let x = Tensor::<f64>::from_vec(vec![1, 1, 1, 2], vec![-0.5, 1.5]).unwrap();
        save_png(&path, &x).unwrap();
        let back: Tensor<f64> = load_png(&path).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0]);

        let batch = Tensor::<f64>::zeros(&[2, 1, 4, 4]);
        assert!(save_png(&dir.path().join("b.png"), &batch).is_err());
        let four = Tensor::<f64>::zeros(&[1, 4, 4, 4]);
        assert!(save_png(&dir.path().join("c.png"), &four).is_err());
        assert!(load_png::<f64>(&dir.path().join("missing.png")).is_err());
    }
}

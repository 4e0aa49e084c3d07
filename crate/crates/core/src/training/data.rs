//! Training data: a procedural image generator (smooth gradients, edges and
//! oscillating textures, so no external corpus is needed) and a seeded patch
//! sampler with optional dihedral augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::dihedral_apply;
use crate::tensor::{Scalar, Tensor};

/// Generate `count` procedural images of shape `[1, channels, h, w]` with
/// values in `[0, 1]`. Each image mixes a linear ramp, a low-frequency wave,
/// an optional half-plane edge and an optional high-frequency texture, with
/// per-channel variation.
pub fn synthetic_images<T: Scalar>(
    count: usize,
    channels: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<Tensor<T>>> {
    if count == 0 || channels == 0 || h == 0 || w == 0 {
        return Err(Error::arg("image counts and extents must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let mut img = Tensor::<T>::zeros(&[1, channels, h, w]);
        let with_edge = rng.gen_bool(0.7);
        let with_texture = rng.gen_bool(0.5);
        // Shared geometry across channels, channel-specific amplitudes.
        let (gx, gy): (f64, f64) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let (f1, f2): (f64, f64) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (nx, ny): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let cut: f64 = rng.gen_range(0.3..0.7) * (nx + ny);
        let (t1, t2): (f64, f64) = (rng.gen_range(3.0..8.0), rng.gen_range(3.0..8.0));
        for c in 0..channels {
            let offset: f64 = rng.gen_range(0.2..0.8);
            let wave_amp: f64 = rng.gen_range(0.05..0.25);
            let edge_amp: f64 = if with_edge { rng.gen_range(0.15..0.45) } else { 0.0 };
            let tex_amp: f64 = if with_texture { rng.gen_range(0.03..0.12) } else { 0.0 };
            for i in 0..h {
                let v = i as f64 / h as f64;
                for j in 0..w {
                    let u = j as f64 / w as f64;
                    let mut val = offset + gx * u + gy * v;
                    val += wave_amp
                        * (std::f64::consts::TAU * (f1 * u + f2 * v) + phase).sin();
                    if nx * u + ny * v > cut {
                        val += edge_amp;
                    }
                    val += tex_amp
                        * (std::f64::consts::TAU * t1 * u).sin()
                        * (std::f64::consts::TAU * t2 * v).sin();
                    img.data_mut()[(c * h + i) * w + j] = T::from_f64(val.clamp(0.0, 1.0));
                }
            }
        }
        images.push(img);
    }
    Ok(images)
}

/// A pool of source images with a seeded patch sampler.
#[derive(Debug, Clone)]
pub struct PatchDataset<T: Scalar> {
    images: Vec<Tensor<T>>,
    patch: usize,
    augment: bool,
}

impl<T: Scalar> PatchDataset<T> {
    /// Every image must be `[1, c, h, w]` with a shared channel count and
    /// extents at least the patch size.
    pub fn new(images: Vec<Tensor<T>>, patch: usize, augment: bool) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::arg("dataset needs at least one image"));
        }
        if patch == 0 {
            return Err(Error::arg("patch size must be positive"));
        }
        let (_, c0, _, _) = images[0].dims4()?;
        for img in &images {
            let (n, c, h, w) = img.dims4()?;
            if n != 1 {
                return Err(Error::dim("dataset images must be single, got a batch"));
            }
            if c != c0 {
                return Err(Error::dim(format!(
                    "mixed channel counts in dataset: {c0} and {c}"
                )));
            }
            if h < patch || w < patch {
                return Err(Error::dim(format!(
                    "image {h}x{w} is smaller than the {patch}x{patch} patch"
                )));
            }
        }
        Ok(PatchDataset { images, patch, augment })
    }

    /// Procedural dataset: `count` images of `hw x hw`.
    pub fn synthetic(
        count: usize,
        channels: usize,
        hw: usize,
        patch: usize,
        augment: bool,
        seed: u64,
    ) -> Result<Self> {
        Self::new(synthetic_images(count, channels, hw, hw, seed)?, patch, augment)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images[0].shape()[1]
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn images(&self) -> &[Tensor<T>] {
        &self.images
    }

    /// Draw one random patch `[1, c, p, p]`, with a random dihedral transform
    /// when augmentation is on.
    pub fn sample_patch(&self, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let img = &self.images[rng.gen_range(0..self.images.len())];
        let (_, c, h, w) = img.dims4()?;
        let p = self.patch;
        let top = rng.gen_range(0..=h - p);
        let left = rng.gen_range(0..=w - p);
        let mut crop = Tensor::<T>::zeros(&[1, c, p, p]);
        for ch in 0..c {
            for i in 0..p {
                let src = (ch * h + top + i) * w + left;
                let dst = (ch * p + i) * p;
                crop.data_mut()[dst..dst + p].copy_from_slice(&img.data()[src..src + p]);
            }
        }
        if self.augment {
            let t = rng.gen_range(0..8);
            crop = dihedral_apply(&crop, t);
        }
        Ok(crop)
    }

    /// Draw a patch batch `[batch, c, p, p]`.
    pub fn sample_batch(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        if batch == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        let c = self.channels();
        let p = self.patch;
        let plane = c * p * p;
        let mut out = Tensor::<T>::zeros(&[batch, c, p, p]);
        for b in 0..batch {
            let patch = self.sample_patch(rng)?;
            out.data_mut()[b * plane..(b + 1) * plane].copy_from_slice(patch.data());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_images_are_bounded_and_deterministic() {
        let a: Vec<Tensor<f64>> = synthetic_images(6, 3, 24, 20, 42).unwrap();
        let b: Vec<Tensor<f64>> = synthetic_images(6, 3, 24, 20, 42).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.shape(), &[1, 3, 24, 20]);
            assert_eq!(x.data(), y.data());
            for &v in x.data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let c: Vec<Tensor<f64>> = synthetic_images(6, 3, 24, 20, 43).unwrap();
        assert_ne!(a[0].data(), c[0].data());
        // Not degenerate: images vary within themselves.
        for x in &a {
            let mean = x.mean();
            let spread = x.data().iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
            assert!(spread > 0.01, "image is nearly constant");
        }
    }

    #[test]
    fn patch_sampler_respects_bounds_and_seeds() {
        let ds: PatchDataset<f64> = PatchDataset::synthetic(4, 1, 16, 8, false, 7).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p1 = ds.sample_patch(&mut r1).unwrap();
            let p2 = ds.sample_patch(&mut r2).unwrap();
            assert_eq!(p1.shape(), &[1, 1, 8, 8]);
            assert_eq!(p1.data(), p2.data());
        }
        let batch = ds.sample_batch(5, &mut r1).unwrap();
        assert_eq!(batch.shape(), &[5, 1, 8, 8]);
    }

    #[test]
    fn augmentation_still_yields_patch_shaped_crops() {
        let ds: PatchDataset<f64> = PatchDataset::synthetic(2, 3, 20, 10, true, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..16 {
            let p = ds.sample_patch(&mut rng).unwrap();
            assert_eq!(p.shape(), &[1, 3, 10, 10]);
        }
    }

    #[test]
    fn dataset_validation_catches_bad_inputs() {
        let imgs = vec![Tensor::<f64>::zeros(&[1, 1, 8, 8])];
        assert!(PatchDataset::new(imgs.clone(), 9, false).is_err());
        assert!(PatchDataset::new(imgs.clone(), 0, false).is_err());
        assert!(PatchDataset::<f64>::new(vec![], 4, false).is_err());
        let mixed = vec![
            Tensor::<f64>::zeros(&[1, 1, 8, 8]),
            Tensor::<f64>::zeros(&[1, 2, 8, 8]),
        ];
        assert!(PatchDataset::new(mixed, 4, false).is_err());
        let batched = vec![Tensor::<f64>::zeros(&[2, 1, 8, 8])];
        assert!(PatchDataset::new(batched, 4, false).is_err());
        assert!(synthetic_images::<f64>(0, 1, 8, 8, 0).is_err());
    }
}

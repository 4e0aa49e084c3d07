//! Bias-free convolutional networks built on a miniature residual U-Net:
//! a noise-conditioned denoiser (image plus a constant noise-level channel in,
//! image out) and a regularizer-gradient network (image in, image out).
//!
//! No layer carries an additive bias, so both networks map zero to zero and
//! are positively homogeneous: scaling every input channel by `a > 0` scales
//! the output by `a`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::priors::Prior;
use crate::tensor::ops::Padding;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Largest noise level the denoiser is conditioned on (50/255 on the usual
/// 8-bit scale).
pub const SIGMA_MAX: f64 = 50.0 / 255.0;

/// Architecture descriptor: enough to rebuild the parameter list exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchDesc {
    pub in_channels: usize,
    pub out_channels: usize,
    pub scales: usize,
    pub base_channels: usize,
    pub blocks_per_scale: usize,
}

impl ArchDesc {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.scales == 0
            || self.base_channels == 0
            || self.blocks_per_scale == 0
        {
            return Err(Error::arg(format!("architecture fields must be positive: {self:?}")));
        }
        if self.scales > 6 {
            return Err(Error::arg(format!("at most 6 scales supported, got {}", self.scales)));
        }
        Ok(())
    }

    fn channels_at(&self, scale: usize) -> usize {
        self.base_channels << scale
    }
}

/// Canonical parameter order: head conv, encoder blocks and downsampling per
/// scale, bottom blocks, transposed-conv upsampling and decoder blocks per
/// scale, tail conv. Kernels are all 3x3.
fn layout(arch: &ArchDesc) -> Vec<(String, [usize; 4])> {
    let mut v = Vec::new();
    v.push(("head".to_string(), [arch.base_channels, arch.in_channels, 3, 3]));
    for s in 0..arch.scales - 1 {
        let c = arch.channels_at(s);
        for r in 0..arch.blocks_per_scale {
            v.push((format!("enc{s}b{r}c0"), [c, c, 3, 3]));
            v.push((format!("enc{s}b{r}c1"), [c, c, 3, 3]));
        }
        v.push((format!("down{s}"), [arch.channels_at(s + 1), c, 3, 3]));
    }
    let cb = arch.channels_at(arch.scales - 1);
    for r in 0..arch.blocks_per_scale {
        v.push((format!("mid{r}c0"), [cb, cb, 3, 3]));
        v.push((format!("mid{r}c1"), [cb, cb, 3, 3]));
    }
    for s in (0..arch.scales - 1).rev() {
        let c = arch.channels_at(s);
        v.push((format!("up{s}"), [arch.channels_at(s + 1), c, 3, 3]));
        for r in 0..arch.blocks_per_scale {
            v.push((format!("dec{s}b{r}c0"), [c, c, 3, 3]));
            v.push((format!("dec{s}b{r}c1"), [c, c, 3, 3]));
        }
    }
    v.push(("tail".to_string(), [arch.out_channels, arch.base_channels, 3, 3]));
    v
}

/// The shared network body: an ordered list of named conv kernels plus the
/// forward pass walking them.
#[derive(Debug, Clone)]
pub struct UNet<T: Scalar> {
    arch: ArchDesc,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> UNet<T> {
    /// Fresh network with Kaiming-scaled Gaussian weights drawn from `seed`.
    pub fn new(arch: ArchDesc, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, sh) in layout(&arch) {
            let fan_in = (sh[1] * sh[2] * sh[3]) as f64;
            let std = (2.0 / fan_in).sqrt();
            names.push(name);
            params.push(Tensor::randn(&sh, std, &mut rng));
        }
        Ok(UNet { arch, names, params })
    }

    /// Rebuild from stored tensors, validating names and shapes against the
    /// canonical layout.
    pub fn from_params(arch: ArchDesc, names: Vec<String>, params: Vec<Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let expected = layout(&arch);
        if names.len() != expected.len() || params.len() != expected.len() {
            return Err(Error::arg(format!(
                "architecture expects {} parameter tensors, got {} names / {} tensors",
                expected.len(),
                names.len(),
                params.len()
            )));
        }
        for (i, (name, shape)) in expected.iter().enumerate() {
            if &names[i] != name {
                return Err(Error::arg(format!(
                    "parameter {i} should be named {name:?}, found {:?}",
                    names[i]
                )));
            }
            if params[i].shape() != shape {
                return Err(Error::dim(format!(
                    "parameter {name:?} should have shape {:?}, found {:?}",
                    shape,
                    params[i].shape()
                )));
            }
        }
        Ok(UNet { arch, names, params })
    }

    pub fn arch(&self) -> &ArchDesc {
        &self.arch
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Insert all parameters as gradient-tracked leaves, in canonical order.
    pub fn insert_leaves(&self, tape: &mut Tape<T>) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.leaf(p.clone(), true)).collect()
    }

    /// Insert all parameters as constants (inference).
    pub fn insert_constants(&self, tape: &mut Tape<T>) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Forward pass on a tape. `params` must come from `insert_leaves` or
    /// `insert_constants` (canonical order).
    pub fn forward_traced(
        &self,
        tape: &mut Tape<T>,
        params: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId> {
        if params.len() != self.params.len() {
            return Err(Error::arg(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.arch.in_channels {
            return Err(Error::dim(format!(
                "network takes {} input channels, image has {c}",
                self.arch.in_channels
            )));
        }

        let mut idx = 0usize;
        let mut take = || {
            let id = params[idx];
            idx += 1;
            id
        };

        fn resblock<T: Scalar>(
            tape: &mut Tape<T>,
            h: NodeId,
            k0: NodeId,
            k1: NodeId,
        ) -> Result<NodeId> {
            let a = tape.conv2d(h, k0, Padding::Zero, 1)?;
            let a = tape.relu(a);
            let a = tape.conv2d(a, k1, Padding::Zero, 1)?;
            tape.add(h, a)
        }

        let mut h = tape.conv2d(x, take(), Padding::Zero, 1)?;
        let mut skips: Vec<(NodeId, (usize, usize))> = Vec::new();
        for _s in 0..self.arch.scales - 1 {
            for _r in 0..self.arch.blocks_per_scale {
                let (k0, k1) = (take(), take());
                h = resblock(tape, h, k0, k1)?;
            }
            let (_, _, hh, ww) = tape.value(h).dims4()?;
            skips.push((h, (hh, ww)));
            h = tape.conv2d(h, take(), Padding::Zero, 2)?;
        }
        for _r in 0..self.arch.blocks_per_scale {
            let (k0, k1) = (take(), take());
            h = resblock(tape, h, k0, k1)?;
        }
        while let Some((skip, hw)) = skips.pop() {
            h = tape.conv2d_transpose(h, take(), Padding::Zero, 2, hw)?;
            h = tape.add(h, skip)?;
            for _r in 0..self.arch.blocks_per_scale {
                let (k0, k1) = (take(), take());
                h = resblock(tape, h, k0, k1)?;
            }
        }
        tape.conv2d(h, take(), Padding::Zero, 1)
    }

    /// Pure forward pass: builds a scratch tape, no gradients.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.insert_constants(&mut tape);
        let xi = tape.constant(x.clone());
        let y = self.forward_traced(&mut tape, &params, xi)?;
        Ok(tape.value(y).clone())
    }
}

/// Noise-conditioned denoiser: the image plus one constant channel holding the
/// noise level go in, the denoised image comes out.
#[derive(Debug, Clone)]
pub struct DenoiserNet<T: Scalar> {
    unet: UNet<T>,
}

impl<T: Scalar> DenoiserNet<T> {
    pub fn new(
        image_channels: usize,
        scales: usize,
        base_channels: usize,
        blocks_per_scale: usize,
        seed: u64,
    ) -> Result<Self> {
        let arch = ArchDesc {
            in_channels: image_channels + 1,
            out_channels: image_channels,
            scales,
            base_channels,
            blocks_per_scale,
        };
        Ok(DenoiserNet { unet: UNet::new(arch, seed)? })
    }

    /// Desk-scale default: 2 scales, 8 base channels, 2 blocks per scale.
    pub fn desk_default(image_channels: usize, seed: u64) -> Result<Self> {
        Self::new(image_channels, 2, 8, 2, seed)
    }

    /// Wrap an existing body; its input width must be one more than its output
    /// width (the noise-level channel).
    pub fn from_unet(unet: UNet<T>) -> Result<Self> {
        if unet.arch().in_channels != unet.arch().out_channels + 1 {
            return Err(Error::arg(format!(
                "a denoiser body needs in_channels = out_channels + 1, got {:?}",
                unet.arch()
            )));
        }
        Ok(DenoiserNet { unet })
    }

    pub fn unet(&self) -> &UNet<T> {
        &self.unet
    }

    pub fn unet_mut(&mut self) -> &mut UNet<T> {
        &mut self.unet
    }

    pub fn image_channels(&self) -> usize {
        self.unet.arch().out_channels
    }

    /// Clamp the conditioning level into the trained range, warning once per
    /// call when it falls outside.
    fn clamp_sigma(sigma: f64) -> f64 {
        if !(0.0..=SIGMA_MAX).contains(&sigma) {
            log::warn!("noise level {sigma} outside [0, {SIGMA_MAX}], clamping");
            sigma.clamp(0.0, SIGMA_MAX)
        } else {
            sigma
        }
    }

    /// Denoise on a tape; gradients flow into the parameter nodes (and the
    /// input node if it is gradient-tracked).
    pub fn denoise_traced(
        &self,
        tape: &mut Tape<T>,
        params: &[NodeId],
        z: NodeId,
        sigma: f64,
    ) -> Result<NodeId> {
        let s = Self::clamp_sigma(sigma);
        let (n, c, h, w) = tape.value(z).dims4()?;
        if c != self.image_channels() {
            return Err(Error::dim(format!(
                "denoiser expects {} image channels, got {c}",
                self.image_channels()
            )));
        }
        let map = tape.constant(Tensor::full(&[n, 1, h, w], T::from_f64(s)));
        let zin = tape.concat_channels(&[z, map])?;
        self.unet.forward_traced(tape, params, zin)
    }

    /// Pure denoising pass.
    pub fn denoise(&self, z: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.unet.insert_constants(&mut tape);
        let zi = tape.constant(z.clone());
        let y = self.denoise_traced(&mut tape, &params, zi, sigma)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Scalar> Prior<T> for DenoiserNet<T> {
    fn has_prox(&self) -> bool {
        true
    }

    fn prox(&self, z: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        if !(sigma >= 0.0) {
            return Err(Error::arg(format!("prox noise level must be >= 0, got {sigma}")));
        }
        self.denoise(z, sigma)
    }
}

/// Regularizer-gradient network: learns to output the gradient of an implicit
/// regularizer directly. Takes the bare image, no noise-level channel.
#[derive(Debug, Clone)]
pub struct RegGradNet<T: Scalar> {
    unet: UNet<T>,
}

impl<T: Scalar> RegGradNet<T> {
    pub fn new(
        image_channels: usize,
        scales: usize,
        base_channels: usize,
        blocks_per_scale: usize,
        seed: u64,
    ) -> Result<Self> {
        let arch = ArchDesc {
            in_channels: image_channels,
            out_channels: image_channels,
            scales,
            base_channels,
            blocks_per_scale,
        };
        Ok(RegGradNet { unet: UNet::new(arch, seed)? })
    }

    /// Desk-scale default: 2 scales, 8 base channels, 2 blocks per scale.
    pub fn desk_default(image_channels: usize, seed: u64) -> Result<Self> {
        Self::new(image_channels, 2, 8, 2, seed)
    }

    /// Wrap an existing body; input and output widths must match.
    pub fn from_unet(unet: UNet<T>) -> Result<Self> {
        if unet.arch().in_channels != unet.arch().out_channels {
            return Err(Error::arg(format!(
                "a gradient-network body needs in_channels = out_channels, got {:?}",
                unet.arch()
            )));
        }
        Ok(RegGradNet { unet })
    }

    pub fn unet(&self) -> &UNet<T> {
        &self.unet
    }

    pub fn unet_mut(&mut self) -> &mut UNet<T> {
        &mut self.unet
    }

    pub fn image_channels(&self) -> usize {
        self.unet.arch().in_channels
    }

    /// Gradient field on a tape.
    pub fn grad_traced(&self, tape: &mut Tape<T>, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        self.unet.forward_traced(tape, params, x)
    }
}

impl<T: Scalar> Prior<T> for RegGradNet<T> {
    fn has_grad(&self) -> bool {
        true
    }

    fn grad(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unet.forward(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_has_expected_parameter_count_and_unique_names() {
        let arch = ArchDesc {
            in_channels: 4,
            out_channels: 3,
            scales: 2,
            base_channels: 8,
            blocks_per_scale: 2,
        };
        let l = layout(&arch);
        // head + (4 enc convs + down) + 4 mid convs + (up + 4 dec convs) + tail
        assert_eq!(l.len(), 16);
        let mut names: Vec<&str> = l.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 16);
        assert_eq!(l[0].1, [8, 4, 3, 3]);
        assert_eq!(l[15].1, [3, 8, 3, 3]);
        // Single-scale nets have no resampling stages.
        let flat = ArchDesc { scales: 1, ..arch };
        assert_eq!(layout(&flat).len(), 1 + 2 * 2 + 1);
    }

    #[test]
    fn zero_input_maps_to_exactly_zero() {
        let d = DenoiserNet::<f64>::desk_default(3, 11).unwrap();
        let z = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
        let out = d.denoise(&z, 0.0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let g = RegGradNet::<f64>::desk_default(3, 12).unwrap();
        let out = Prior::grad(&g, &z).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positive_homogeneity_under_joint_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = DenoiserNet::<f64>::desk_default(1, 21).unwrap();
        let z: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 12, 12], 0.0, 1.0, &mut rng);
        let sigma = 0.05;
        let alpha = 2.5;
        let base = d.denoise(&z, sigma).unwrap();
        let scaled = d.denoise(&z.scale(alpha), alpha * sigma).unwrap();
        let rel = scaled.sub(&base.scale(alpha)).unwrap().norm() / base.scale(alpha).norm();
        assert!(rel <= 1e-6, "denoiser rel {rel}");

        let g = RegGradNet::<f64>::desk_default(1, 22).unwrap();
        let gb = Prior::grad(&g, &z).unwrap();
        let gs = Prior::grad(&g, &z.scale(alpha)).unwrap();
        let rel = gs.sub(&gb.scale(alpha)).unwrap().norm() / gb.scale(alpha).norm();
        assert!(rel <= 1e-6, "gradient net rel {rel}");
    }

    #[test]
    fn odd_spatial_sizes_are_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> = Tensor::randn(&[1, 3, 17, 23], 1.0, &mut rng);
        let g = RegGradNet::<f64>::desk_default(3, 31).unwrap();
        assert_eq!(Prior::grad(&g, &x).unwrap().shape(), x.shape());
        let d = DenoiserNet::<f64>::desk_default(3, 32).unwrap();
        assert_eq!(d.denoise(&x, 0.1).unwrap().shape(), x.shape());
    }

    #[test]
    fn forward_is_pure_and_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = Tensor::randn(&[2, 1, 9, 9], 1.0, &mut rng);
        let a = DenoiserNet::<f64>::new(1, 2, 4, 1, 99).unwrap();
        let b = DenoiserNet::<f64>::new(1, 2, 4, 1, 99).unwrap();
        assert_eq!(a.denoise(&x, 0.1).unwrap(), a.denoise(&x, 0.1).unwrap());
        assert_eq!(a.denoise(&x, 0.1).unwrap(), b.denoise(&x, 0.1).unwrap());
        let c = DenoiserNet::<f64>::new(1, 2, 4, 1, 100).unwrap();
        assert_ne!(a.denoise(&x, 0.1).unwrap(), c.denoise(&x, 0.1).unwrap());
    }

    #[test]
    fn sigma_outside_training_range_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z: Tensor<f64> = Tensor::rand_uniform(&[1, 1, 6, 6], 0.0, 1.0, &mut rng);
        let d = DenoiserNet::<f64>::new(1, 2, 4, 1, 50).unwrap();
        assert_eq!(d.denoise(&z, 2.0).unwrap(), d.denoise(&z, SIGMA_MAX).unwrap());
        assert_eq!(d.denoise(&z, -0.3).unwrap(), d.denoise(&z, 0.0).unwrap());
    }

    #[test]
    fn backward_reaches_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Tensor<f64> = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut rng);
        let d = DenoiserNet::<f64>::new(2, 2, 4, 2, 60).unwrap();
        let mut tape = Tape::new();
        let params = d.unet().insert_leaves(&mut tape);
        let zi = tape.constant(x);
        let out = d.denoise_traced(&mut tape, &params, zi, 0.08).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.mean_all(sq);
        tape.backward(loss).unwrap();
        let mut total = 0.0;
        for &p in &params {
            let g = tape.grad(p).expect("every parameter should receive a gradient");
            total += g.norm_sq();
        }
        assert!(total > 0.0);
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = RegGradNet::<f64>::new(1, 1, 2, 1, 70).unwrap();
        let x: Tensor<f64> = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        let inputs: Vec<Tensor<f64>> = g.unet().params().to_vec();
        let report = crate::fdcheck::grad_check(&inputs, &|tape, ids| {
            let xi = tape.constant(x.clone());
            let out = g.unet().forward_traced(tape, ids, xi)?;
            let zero = tape.constant(Tensor::zeros(x.shape()));
            tape.mean_sq_diff(out, zero)
        })
        .unwrap();
        assert!(report.max_err <= 1e-5, "{report:?}");
    }

    #[test]
    fn from_unet_checks_channel_contracts() {
        let arch = ArchDesc {
            in_channels: 3,
            out_channels: 3,
            scales: 1,
            base_channels: 2,
            blocks_per_scale: 1,
        };
        let u = UNet::<f64>::new(arch, 1).unwrap();
        assert!(RegGradNet::from_unet(u.clone()).is_ok());
        assert!(DenoiserNet::from_unet(u).is_err());
        let arch_d = ArchDesc { in_channels: 4, ..arch };
        let u = UNet::<f64>::new(arch_d, 1).unwrap();
        assert!(DenoiserNet::from_unet(u.clone()).is_ok());
        assert!(RegGradNet::from_unet(u).is_err());
    }

    #[test]
    fn from_params_validates_names_and_shapes() {
        let arch = ArchDesc {
            in_channels: 1,
            out_channels: 1,
            scales: 1,
            base_channels: 2,
            blocks_per_scale: 1,
        };
        let u = UNet::<f64>::new(arch, 8).unwrap();
        let names = u.param_names().to_vec();
        let params = u.params().to_vec();
        assert!(UNet::from_params(arch, names.clone(), params.clone()).is_ok());

        let mut wrong_names = names.clone();
        wrong_names[0] = "bogus".to_string();
        assert!(UNet::from_params(arch, wrong_names, params.clone()).is_err());

        let mut wrong_shape = params.clone();
        wrong_shape[1] = Tensor::zeros(&[2, 2, 5, 5]);
        assert!(UNet::from_params(arch, names.clone(), wrong_shape).is_err());

        assert!(UNet::from_params(arch, names, params[1..].to_vec()).is_err());
    }
}

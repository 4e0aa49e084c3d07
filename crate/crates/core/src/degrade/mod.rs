//! Linear degradation operators and measurement noise.
//!
//! Every operator knows its exact adjoint, can be applied to plain tensors or
//! traced onto an autodiff tape, and is batch-agnostic: shapes are checked on
//! channels and spatial extents only. Blur convolutions use circular boundary
//! conditions throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::ops::{conv2d, conv2d_grad_input, downsample, upsample_zero, Padding};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Isotropic Gaussian blur kernel, normalized to sum exactly 1.
pub fn make_gaussian_kernel(size: usize, sigma: f64) -> Result<Tensor<f64>> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::arg(format!("gaussian kernel size must be odd, got {size}")));
    }
    if sigma <= 0.0 {
        return Err(Error::arg(format!("gaussian kernel sigma must be positive, got {sigma}")));
    }
    let c = (size / 2) as f64;
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            data.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = data.iter().sum();
    for v in &mut data {
        *v /= sum;
    }
    Tensor::from_vec(vec![1, 1, size, size], data)
}

/// Gaussian blur with principal-axis standard deviations `(sx, sy)` rotated by
/// `theta` radians; normalized to sum exactly 1.
pub fn make_anisotropic_gaussian_kernel(
    size: usize,
    sx: f64,
    sy: f64,
    theta: f64,
) -> Result<Tensor<f64>> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::arg(format!("kernel size must be odd, got {size}")));
    }
    if sx <= 0.0 || sy <= 0.0 {
        return Err(Error::arg("anisotropic sigmas must be positive"));
    }
    let c = (size / 2) as f64;
    let (sin, cos) = theta.sin_cos();
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            data.push((-(u * u / (2.0 * sx * sx) + v * v / (2.0 * sy * sy))).exp());
        }
    }
    let sum: f64 = data.iter().sum();
    for v in &mut data {
        *v /= sum;
    }
    Tensor::from_vec(vec![1, 1, size, size], data)
}

fn cubic_weight(x: f64) -> f64 {
    // Keys cubic interpolation kernel with a = -0.5.
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0)
    } else {
        0.0
    }
}

/// Separable anti-aliasing kernel for bicubic downsampling by `factor`.
/// Size is `4 * factor - 1`; each separable factor sums exactly to 1.
pub fn make_bicubic_kernel(factor: usize) -> Result<Tensor<f64>> {
    if factor == 0 {
        return Err(Error::arg("bicubic kernel factor must be at least 1"));
    }
    let size = 4 * factor - 1;
    let c = (size / 2) as f64;
    let t = factor as f64;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| cubic_weight((i as f64 - c) / t) / t)
        .collect();
    let sum: f64 = taps.iter().sum();
    for v in &mut taps {
        *v /= sum;
    }
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            data.push(taps[i] * taps[j]);
        }
    }
    Tensor::from_vec(vec![1, 1, size, size], data)
}

/// Blur specification: a validated convolution kernel.
#[derive(Debug, Clone)]
pub struct BlurSpec {
    kernel: Tensor<f64>,
}

impl BlurSpec {
    /// Wrap an arbitrary kernel; extents must be odd and the taps must sum to
    /// 1 within 1e-12.
    pub fn from_kernel(kernel: Tensor<f64>) -> Result<Self> {
        let (co, ci, kh, kw) = kernel.dims4()?;
        if co != 1 || ci != 1 {
            return Err(Error::dim(format!(
                "blur kernel must be [1, 1, kh, kw], got {:?}",
                kernel.shape()
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim(format!("blur kernel extents must be odd, got {kh}x{kw}")));
        }
        let sum: f64 = kernel.data().iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::arg(format!(
                "blur kernel must sum to 1 within 1e-12, got {sum}"
            )));
        }
        Ok(BlurSpec { kernel })
    }

    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        BlurSpec::from_kernel(make_gaussian_kernel(size, sigma)?)
    }

    pub fn anisotropic_gaussian(size: usize, sx: f64, sy: f64, theta: f64) -> Result<Self> {
        BlurSpec::from_kernel(make_anisotropic_gaussian_kernel(size, sx, sy, theta)?)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let t: Tensor<f64> = crate::tensor::io::read_tensor_as(path)?;
        let t = match t.shape() {
            [kh, kw] => t.reshaped(&[1, 1, *kh, *kw])?,
            _ => t,
        };
        BlurSpec::from_kernel(t)
    }

    pub fn kernel(&self) -> &Tensor<f64> {
        &self.kernel
    }
}

/// Anti-aliasing filter family for downscaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrKernel {
    Bicubic,
    /// Gaussian with standard deviation tied to the factor: `0.5 * factor`.
    Gaussian,
}

/// Downscaling specification: blur then keep every `factor`-th pixel.
#[derive(Debug, Clone)]
pub struct SRSpec {
    pub factor: usize,
    pub kernel: SrKernel,
}

impl SRSpec {
    pub fn new(factor: usize, kernel: SrKernel) -> Result<Self> {
        if factor < 2 {
            return Err(Error::arg(format!("downscaling factor must be at least 2, got {factor}")));
        }
        Ok(SRSpec { factor, kernel })
    }

    pub fn build_kernel(&self) -> Result<Tensor<f64>> {
        match self.kernel {
            SrKernel::Bicubic => make_bicubic_kernel(self.factor),
            SrKernel::Gaussian => {
                let sigma = 0.5 * self.factor as f64;
                let size = 2 * (3.0 * sigma).ceil() as usize + 1;
                make_gaussian_kernel(size, sigma)
            }
        }
    }
}

/// Pixel-wise binary mask with an exact kept-pixel count of
/// `round(keep_prob * pixels)`.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub keep_prob: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(keep_prob: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep_prob) {
            return Err(Error::arg(format!("keep probability must be in [0, 1], got {keep_prob}")));
        }
        Ok(MaskSpec { keep_prob, seed })
    }

    /// Sample the mask plane `[1, 1, h, w]`. The same pixels are masked in
    /// every channel.
    pub fn build_mask(&self, h: usize, w: usize) -> Tensor<f64> {
        let n = h * w;
        let keep = (self.keep_prob * n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // Partial Fisher-Yates: the first `keep` entries become the kept set.
        for i in 0..keep.min(n) {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        let mut data = vec![0.0; n];
        for &i in &idx[..keep.min(n)] {
            data[i] = 1.0;
        }
        Tensor::from_vec(vec![1, 1, h, w], data).expect("mask shape")
    }
}

/// Task families the harness knows how to build.
#[derive(Debug, Clone)]
pub enum DegradationSpec {
    Identity,
    Blur(BlurSpec),
    Downscale(SRSpec),
    Inpaint(MaskSpec),
}

enum OpKind<T> {
    Identity,
    /// Circular convolution with one spatial kernel applied per channel.
    Blur { kernel: Tensor<T> },
    /// Circular blur followed by decimation by `factor`.
    Downscale { kernel: Tensor<T>, factor: usize },
    /// Pixel-wise multiplication by a binary plane shared across channels.
    Mask { plane: Tensor<T> },
}

/// A linear measurement operator `A` with its exact adjoint.
pub struct LinearOperator<T: Scalar> {
    kind: OpKind<T>,
    in_chw: (usize, usize, usize),
    out_chw: (usize, usize, usize),
}

fn chw_of<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (_, c, h, w) = x.dims4()?;
    Ok((c, h, w))
}

/// Apply a `[1, 1, kh, kw]` kernel to every channel of `x` independently.
fn conv_per_channel<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshaped(&[n * c, 1, h, w])?;
    let y = conv2d(&flat, kernel, Padding::Circular, 1)?;
    y.reshaped(&[n, c, h, w])
}

fn conv_per_channel_adjoint<T: Scalar>(y: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = y.dims4()?;
    let flat = y.reshaped(&[n * c, 1, h, w])?;
    let x = conv2d_grad_input(&flat, kernel, Padding::Circular, 1, (h, w))?;
    x.reshaped(&[n, c, h, w])
}

/// Multiply every channel of every batch entry by the mask plane.
fn mul_mask_plane<T: Scalar>(x: &Tensor<T>, plane: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (_, _, mh, mw) = plane.dims4()?;
    if (mh, mw) != (h, w) {
        return Err(Error::dim(format!(
            "mask plane is {mh}x{mw}, image is {h}x{w}"
        )));
    }
    let mut out = x.clone();
    let pd = plane.data();
    let hw = h * w;
    for nc in 0..n * c {
        let base = nc * hw;
        for (i, m) in pd.iter().enumerate() {
            out.data_mut()[base + i] = out.data()[base + i] * *m;
        }
    }
    Ok(out)
}

impl<T: Scalar> LinearOperator<T> {
    /// Input signature `(channels, height, width)`; any batch size is accepted.
    pub fn in_chw(&self) -> (usize, usize, usize) {
        self.in_chw
    }

    /// Output signature `(channels, height, width)`.
    pub fn out_chw(&self) -> (usize, usize, usize) {
        self.out_chw
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, OpKind::Identity)
    }

    pub fn is_mask(&self) -> bool {
        matches!(self.kind, OpKind::Mask { .. })
    }

    /// Downscaling factor for decimating operators, 1 otherwise.
    pub fn factor(&self) -> usize {
        match &self.kind {
            OpKind::Downscale { factor, .. } => *factor,
            _ => 1,
        }
    }

    /// The mask plane `[1, 1, h, w]` for masking operators.
    pub fn mask_plane(&self) -> Option<&Tensor<T>> {
        match &self.kind {
            OpKind::Mask { plane } => Some(plane),
            _ => None,
        }
    }

    fn check_in(&self, x: &Tensor<T>) -> Result<()> {
        if chw_of(x)? != self.in_chw {
            return Err(Error::dim(format!(
                "operator input signature {:?}, got image shape {:?}",
                self.in_chw,
                x.shape()
            )));
        }
        Ok(())
    }

    fn check_out(&self, y: &Tensor<T>) -> Result<()> {
        if chw_of(y)? != self.out_chw {
            return Err(Error::dim(format!(
                "operator output signature {:?}, got image shape {:?}",
                self.out_chw,
                y.shape()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_in(x)?;
        match &self.kind {
            OpKind::Identity => Ok(x.clone()),
            OpKind::Blur { kernel } => conv_per_channel(x, kernel),
            OpKind::Downscale { kernel, factor } => {
                downsample(&conv_per_channel(x, kernel)?, *factor)
            }
            OpKind::Mask { plane } => mul_mask_plane(x, plane),
        }
    }

    pub fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_out(y)?;
        match &self.kind {
            OpKind::Identity => Ok(y.clone()),
            OpKind::Blur { kernel } => conv_per_channel_adjoint(y, kernel),
            OpKind::Downscale { kernel, factor } => {
                conv_per_channel_adjoint(&upsample_zero(y, *factor)?, kernel)
            }
            OpKind::Mask { plane } => mul_mask_plane(y, plane),
        }
    }

    /// Apply on an autodiff tape so gradients flow through the operator.
    pub fn apply_traced(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        self.check_in(tape.value(x))?;
        let (n, c, h, w) = tape.value(x).dims4()?;
        match &self.kind {
            OpKind::Identity => Ok(tape.scale(x, 1.0)),
            OpKind::Blur { kernel } => {
                let k = tape.constant(kernel.clone());
                let flat = tape.reshape(x, &[n * c, 1, h, w])?;
                let y = tape.conv2d(flat, k, Padding::Circular, 1)?;
                tape.reshape(y, &[n, c, h, w])
            }
            OpKind::Downscale { kernel, factor } => {
                let k = tape.constant(kernel.clone());
                let flat = tape.reshape(x, &[n * c, 1, h, w])?;
                let y = tape.conv2d(flat, k, Padding::Circular, 1)?;
                let y = tape.reshape(y, &[n, c, h, w])?;
                tape.downsample(y, *factor)
            }
            OpKind::Mask { plane } => {
                let mut expanded = Tensor::zeros(&[n, c, h, w]);
                let hw = h * w;
                for nc in 0..n * c {
                    expanded.data_mut()[nc * hw..(nc + 1) * hw].copy_from_slice(plane.data());
                }
                let m = tape.constant(expanded);
                tape.mul(x, m)
            }
        }
    }

    /// Adjoint on an autodiff tape.
    pub fn adjoint_traced(&self, tape: &mut Tape<T>, y: NodeId) -> Result<NodeId> {
        self.check_out(tape.value(y))?;
        match &self.kind {
            OpKind::Identity => Ok(tape.scale(y, 1.0)),
            OpKind::Blur { kernel } => {
                let (n, c, h, w) = tape.value(y).dims4()?;
                let k = tape.constant(kernel.clone());
                let flat = tape.reshape(y, &[n * c, 1, h, w])?;
                let x = tape.conv2d_transpose(flat, k, Padding::Circular, 1, (h, w))?;
                tape.reshape(x, &[n, c, h, w])
            }
            OpKind::Downscale { kernel, factor } => {
                let up = tape.upsample_zero(y, *factor)?;
                let (n, c, h, w) = tape.value(up).dims4()?;
                let k = tape.constant(kernel.clone());
                let flat = tape.reshape(up, &[n * c, 1, h, w])?;
                let x = tape.conv2d_transpose(flat, k, Padding::Circular, 1, (h, w))?;
                tape.reshape(x, &[n, c, h, w])
            }
            OpKind::Mask { .. } => self.apply_traced(tape, y),
        }
    }
}

/// Build the measurement operator for an image signature
/// `(channels, height, width)`.
pub fn build_operator<T: Scalar>(
    spec: &DegradationSpec,
    chw: (usize, usize, usize),
) -> Result<LinearOperator<T>> {
    let (c, h, w) = chw;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!("empty image signature {chw:?}")));
    }
    match spec {
        DegradationSpec::Identity => Ok(LinearOperator {
            kind: OpKind::Identity,
            in_chw: chw,
            out_chw: chw,
        }),
        DegradationSpec::Blur(b) => {
            let (_, _, kh, kw) = b.kernel.dims4()?;
            if kh > h || kw > w {
                return Err(Error::dim(format!(
                    "{kh}x{kw} blur kernel exceeds {h}x{w} image"
                )));
            }
            Ok(LinearOperator {
                kind: OpKind::Blur { kernel: b.kernel.cast() },
                in_chw: chw,
                out_chw: chw,
            })
        }
        DegradationSpec::Downscale(s) => {
            if h % s.factor != 0 || w % s.factor != 0 {
                return Err(Error::dim(format!(
                    "factor {} does not divide {h}x{w}",
                    s.factor
                )));
            }
            let kernel = s.build_kernel()?;
            let (_, _, kh, kw) = kernel.dims4()?;
            if kh > h || kw > w {
                return Err(Error::dim(format!(
                    "{kh}x{kw} anti-aliasing kernel exceeds {h}x{w} image"
                )));
            }
            Ok(LinearOperator {
                kind: OpKind::Downscale { kernel: kernel.cast(), factor: s.factor },
                in_chw: chw,
                out_chw: (c, h / s.factor, w / s.factor),
            })
        }
        DegradationSpec::Inpaint(m) => Ok(LinearOperator {
            kind: OpKind::Mask { plane: m.build_mask(h, w).cast() },
            in_chw: chw,
            out_chw: chw,
        }),
    }
}

/// Additive white Gaussian noise drawn from a dedicated seeded generator.
/// A zero sigma returns the input bit-for-bit and consumes no randomness.
pub fn add_awgn<T: Scalar>(x: &Tensor<T>, sigma: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_awgn_with(x, sigma, &mut rng)
}

/// Additive white Gaussian noise advancing the caller's generator.
pub fn add_awgn_with<T: Scalar>(x: &Tensor<T>, sigma: f64, rng: &mut impl Rng) -> Tensor<T> {
    if sigma == 0.0 {
        return x.clone();
    }
    let noise: Tensor<T> = Tensor::from_fn(x.shape(), |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64(v * sigma)
    });
    x.add(&noise).expect("same shape")
}

/// Measurement model `y = A x + eta`.
pub struct DegradationPipeline<T: Scalar> {
    pub operator: LinearOperator<T>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl<T: Scalar> DegradationPipeline<T> {
    pub fn degrade(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.noise_sigma < 0.0 {
            return Err(Error::arg(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(add_awgn(&self.operator.apply(x)?, self.noise_sigma, self.seed))
    }
}

/// Bicubic interpolation upsampling by an integer factor with circular
/// boundary handling; exact on grid points (`out[i * f] = x[i]`).
pub fn bicubic_upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::arg("upsampling factor must be at least 1"));
    }
    let (n, c, h, w) = x.dims4()?;
    let t = factor as f64;

    // Per-phase weights over the four neighboring source samples.
    let weights: Vec<[f64; 4]> = (0..factor)
        .map(|q| {
            let frac = q as f64 / t;
            let mut ws = [
                cubic_weight(frac + 1.0),
                cubic_weight(frac),
                cubic_weight(frac - 1.0),
                cubic_weight(frac - 2.0),
            ];
            let s: f64 = ws.iter().sum();
            for v in &mut ws {
                *v /= s;
            }
            ws
        })
        .collect();

    let interp_axis = |src: &[f64], len: usize| -> Vec<f64> {
        let mut out = vec![0.0; len * factor];
        for (o, item) in out.iter_mut().enumerate() {
            let base = o / factor;
            let ws = &weights[o % factor];
            let mut acc = 0.0;
            for (di, wv) in ws.iter().enumerate() {
                let i = (base as isize + di as isize - 1).rem_euclid(len as isize) as usize;
                acc += wv * src[i];
            }
            *item = acc;
        }
        out
    };

    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let plane = &x.data()[nc * h * w..(nc + 1) * h * w];
        // Rows first, then columns.
        let mut rows = vec![0.0; h * ow];
        let mut buf = vec![0.0; w];
        for y in 0..h {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = plane[y * w + i].to_f64();
            }
            rows[y * ow..(y + 1) * ow].copy_from_slice(&interp_axis(&buf, w));
        }
        let mut col = vec![0.0; h];
        for xq in 0..ow {
            for (y, cv) in col.iter_mut().enumerate() {
                *cv = rows[y * ow + xq];
            }
            let up = interp_axis(&col, h);
            for (y, v) in up.iter().enumerate() {
                out[nc * oh * ow + y * ow + xq] = T::from_f64(*v);
            }
        }
    }
    Tensor::from_vec(vec![n, c, oh, ow], out)
}

/// Task-dependent starting point for iterative solvers: the observation for
/// deblurring and identity, a bicubic upsampling for downscaling, and the
/// observation with unknown pixels set to mid-gray for inpainting.
pub fn initial_estimate<T: Scalar>(op: &LinearOperator<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    op.check_out(y)?;
    match &op.kind {
        OpKind::Identity | OpKind::Blur { .. } => Ok(y.clone()),
        OpKind::Downscale { factor, .. } => bicubic_upsample(y, *factor),
        OpKind::Mask { plane } => {
            let known = mul_mask_plane(y, plane)?;
            let (n, c, h, w) = y.dims4()?;
            let mut out = known;
            let hw = h * w;
            let half = T::from_f64(0.5);
            for nc in 0..n * c {
                let base = nc * hw;
                for (i, m) in plane.data().iter().enumerate() {
                    if *m == T::zero() {
                        out.data_mut()[base + i] = half;
                    }
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_kernel_is_normalized_symmetric_positive() {
        let k = make_gaussian_kernel(25, 1.6).unwrap();
        let sum: f64 = k.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(k.data().iter().all(|&v| v > 0.0));
        let d = k.data();
        for i in 0..25 * 25 {
            assert_eq!(d[i], d[25 * 25 - 1 - i]); // centrosymmetric
        }
        assert_eq!(make_gaussian_kernel(1, 0.5).unwrap().data(), &[1.0]);
        assert!(make_gaussian_kernel(4, 1.0).is_err());
        assert!(make_gaussian_kernel(5, 0.0).is_err());
    }

    #[test]
    fn anisotropic_kernel_rotation_swaps_axes() {
        let k0 = make_anisotropic_gaussian_kernel(9, 2.0, 0.5, 0.0).unwrap();
        let k90 = make_anisotropic_gaussian_kernel(9, 2.0, 0.5, std::f64::consts::FRAC_PI_2).unwrap();
        // Rotating the covariance by 90 degrees transposes the kernel.
        for i in 0..9 {
            for j in 0..9 {
                let a = k0.data()[i * 9 + j];
                let b = k90.data()[j * 9 + i];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bicubic_kernel_sizes_and_sums() {
        for t in [2usize, 3] {
            let k = make_bicubic_kernel(t).unwrap();
            let size = 4 * t - 1;
            assert_eq!(k.shape(), &[1, 1, size, size]);
            let sum: f64 = k.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            // The kernel is the outer product of a 1-sum tap vector with
            // itself, so row i sums to tap_i = k[i][c] / sqrt(k[c][c]).
            let c = size / 2;
            let tap_c = k.data()[c * size + c].sqrt();
            for i in 0..size {
                let row_sum: f64 = (0..size).map(|j| k.data()[i * size + j]).sum();
                let tap_i = k.data()[i * size + c] / tap_c;
                assert!((row_sum - tap_i).abs() < 1e-12, "row {i}: {row_sum} vs {tap_i}");
            }
        }
        // Factor 1 degenerates to the identity tap.
        let k1 = make_bicubic_kernel(1).unwrap();
        assert_eq!(k1.shape(), &[1, 1, 3, 3]);
        assert!((k1.data()[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn downscaling_constant_image_preserves_the_constant() {
        for (factor, kernel) in [(2, SrKernel::Bicubic), (3, SrKernel::Bicubic), (2, SrKernel::Gaussian)] {
            let spec = DegradationSpec::Downscale(SRSpec::new(factor, kernel).unwrap());
            let op: LinearOperator<f64> = build_operator(&spec, (1, 12, 12)).unwrap();
            let x = Tensor::full(&[1, 1, 12, 12], 0.7);
            let y = op.apply(&x).unwrap();
            assert_eq!(y.shape(), &[1, 1, 12 / factor, 12 / factor]);
            for &v in y.data() {
                assert!((v - 0.7).abs() < 1e-12, "{kernel:?} x{factor}: {v}");
            }
        }
    }

    #[test]
    fn downscale_operator_equals_blur_then_decimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x: Tensor<f64> = Tensor::randn(&[2, 3, 12, 8], 1.0, &mut rng);
        let sr = SRSpec::new(2, SrKernel::Bicubic).unwrap();
        let op: LinearOperator<f64> = build_operator(
            &DegradationSpec::Downscale(sr.clone()),
            (3, 12, 8),
        )
        .unwrap();
        let blur: LinearOperator<f64> = build_operator(
            &DegradationSpec::Blur(BlurSpec::from_kernel(sr.build_kernel().unwrap()).unwrap()),
            (3, 12, 8),
        )
        .unwrap();
        let composed = downsample(&blur.apply(&x).unwrap(), 2).unwrap();
        assert_eq!(op.apply(&x).unwrap(), composed);
    }

    #[test]
    fn mask_has_exact_count_and_is_idempotent_projection() {
        let spec = MaskSpec::new(0.1, 42).unwrap();
        let m = spec.build_mask(20, 20);
        let ones = m.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 40); // round(0.1 * 400)
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));

        let op: LinearOperator<f64> = build_operator(
            &DegradationSpec::Inpaint(spec),
            (3, 20, 20),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Tensor<f64> = Tensor::randn(&[1, 3, 20, 20], 1.0, &mut rng);
        let once = op.apply(&x).unwrap();
        let twice = op.apply(&once).unwrap();
        assert_eq!(once, twice);
        // Self-adjoint.
        let y: Tensor<f64> = Tensor::randn(&[1, 3, 20, 20], 1.0, &mut rng);
        let lhs = op.apply(&x).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&op.adjoint(&y).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(MaskSpec::new(1.3, 0).is_err());
    }

    #[test]
    fn operators_have_exact_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let specs: Vec<(&str, DegradationSpec)> = vec![
            ("identity", DegradationSpec::Identity),
            ("blur", DegradationSpec::Blur(BlurSpec::gaussian(7, 1.6).unwrap())),
            (
                "sr2-bicubic",
                DegradationSpec::Downscale(SRSpec::new(2, SrKernel::Bicubic).unwrap()),
            ),
            (
                "sr3-gaussian",
                DegradationSpec::Downscale(SRSpec::new(3, SrKernel::Gaussian).unwrap()),
            ),
            ("mask", DegradationSpec::Inpaint(MaskSpec::new(0.2, 7).unwrap())),
        ];
        for (name, spec) in specs {
            let op: LinearOperator<f64> = build_operator(&spec, (3, 24, 24)).unwrap();
            for _ in 0..5 {
                let x: Tensor<f64> = Tensor::randn(&[1, 3, 24, 24], 1.0, &mut rng);
                let (oc, oh, ow) = op.out_chw();
                let y: Tensor<f64> = Tensor::randn(&[1, oc, oh, ow], 1.0, &mut rng);
                let lhs = op.apply(&x).unwrap().dot(&y).unwrap();
                let rhs = x.dot(&op.adjoint(&y).unwrap()).unwrap();
                let scale = 1.0 + lhs.abs();
                assert!(
                    (lhs - rhs).abs() / scale < 1e-12,
                    "{name}: <Ax,y>={lhs} vs <x,Aty>={rhs}"
                );
            }
        }
    }

    #[test]
    fn traced_apply_matches_plain_apply_and_is_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for spec in [
            DegradationSpec::Blur(BlurSpec::gaussian(5, 1.2).unwrap()),
            DegradationSpec::Downscale(SRSpec::new(2, SrKernel::Bicubic).unwrap()),
            DegradationSpec::Inpaint(MaskSpec::new(0.3, 3).unwrap()),
        ] {
            let op: LinearOperator<f64> = build_operator(&spec, (2, 8, 8)).unwrap();
            let x: Tensor<f64> = Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng);
            let plain = op.apply(&x).unwrap();

            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone(), true);
            let yi = op.apply_traced(&mut tape, xi).unwrap();
            assert_eq!(tape.value(yi), &plain);

            // d/dx sum(A x) = A^T 1.
            let s = tape.sum_all(yi);
            tape.backward(s).unwrap();
            let ones = Tensor::full(&[2, op.out_chw().0, op.out_chw().1, op.out_chw().2], 1.0);
            let expect = op.adjoint(&ones).unwrap();
            assert!(tape.grad(xi).unwrap().linf_diff(&expect).unwrap() < 1e-12);

            // Traced adjoint agrees with the plain adjoint.
            let (oc, oh, ow) = op.out_chw();
            let y: Tensor<f64> = Tensor::randn(&[2, oc, oh, ow], 1.0, &mut rng);
            let mut tape2 = Tape::new();
            let yi2 = tape2.leaf(y.clone(), false);
            let ai = op.adjoint_traced(&mut tape2, yi2).unwrap();
            assert_eq!(tape2.value(ai), &op.adjoint(&y).unwrap());
        }
    }

    #[test]
    fn operator_shape_validation() {
        let op: LinearOperator<f64> = build_operator(
            &DegradationSpec::Blur(BlurSpec::gaussian(5, 1.0).unwrap()),
            (3, 16, 16),
        )
        .unwrap();
        let wrong = Tensor::<f64>::zeros(&[1, 3, 16, 8]);
        assert!(op.apply(&wrong).is_err());
        // Kernel larger than the image is rejected at build time.
        let big = DegradationSpec::Blur(BlurSpec::gaussian(25, 1.6).unwrap());
        assert!(build_operator::<f64>(&big, (3, 16, 16)).is_err());
        // Factor must divide the extents.
        let sr = DegradationSpec::Downscale(SRSpec::new(3, SrKernel::Bicubic).unwrap());
        assert!(build_operator::<f64>(&sr, (3, 16, 16)).is_err());
        assert!(SRSpec::new(1, SrKernel::Bicubic).is_err());
    }

    #[test]
    fn awgn_statistics_and_zero_sigma_identity() {
        let x = Tensor::<f64>::zeros(&[1, 1, 1000, 1000]);
        let sigma = 0.1;
        let y = add_awgn(&x, sigma, 123);
        let mean = y.mean();
        let std = (y.norm_sq() / y.numel() as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((std - sigma).abs() / sigma < 0.01, "std {std}");

        let z = add_awgn(&x, 0.0, 123);
        assert_eq!(x, z);
        // Same seed, same noise.
        assert_eq!(add_awgn(&x, sigma, 9), add_awgn(&x, sigma, 9));
    }

    #[test]
    fn bicubic_upsample_interpolates_grid_points_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let x: Tensor<f64> = Tensor::randn(&[1, 2, 6, 5], 1.0, &mut rng);
        for f in [2, 3] {
            let up = bicubic_upsample(&x, f).unwrap();
            assert_eq!(up.shape(), &[1, 2, 6 * f, 5 * f]);
            let picked = downsample(&up, f).unwrap();
            assert!(picked.linf_diff(&x).unwrap() < 1e-12);
        }
        // Constant stays constant.
        let c = Tensor::<f64>::full(&[1, 1, 4, 4], 0.3);
        let up = bicubic_upsample(&c, 2).unwrap();
        for &v in up.data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_estimates_follow_task_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = Tensor::randn(&[1, 1, 8, 8], 0.2, &mut rng);

        let blur: LinearOperator<f64> =
            build_operator(&DegradationSpec::Blur(BlurSpec::gaussian(3, 0.8).unwrap()), (1, 8, 8))
                .unwrap();
        let y = blur.apply(&x).unwrap();
        assert_eq!(initial_estimate(&blur, &y).unwrap(), y);

        let sr: LinearOperator<f64> = build_operator(
            &DegradationSpec::Downscale(SRSpec::new(2, SrKernel::Bicubic).unwrap()),
            (1, 8, 8),
        )
        .unwrap();
        let ylo = sr.apply(&x).unwrap();
        let init = initial_estimate(&sr, &ylo).unwrap();
        assert_eq!(init.shape(), &[1, 1, 8, 8]);
        assert_eq!(init, bicubic_upsample(&ylo, 2).unwrap());

        let mask_spec = MaskSpec::new(0.5, 11).unwrap();
        let plane = mask_spec.build_mask(8, 8);
        let inp: LinearOperator<f64> =
            build_operator(&DegradationSpec::Inpaint(mask_spec), (1, 8, 8)).unwrap();
        let ym = inp.apply(&x).unwrap();
        let init = initial_estimate(&inp, &ym).unwrap();
        for i in 0..64 {
            if plane.data()[i] == 1.0 {
                assert_eq!(init.data()[i], ym.data()[i]);
            } else {
                assert_eq!(init.data()[i], 0.5);
            }
        }
    }

    #[test]
    fn pipeline_composes_operator_and_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Tensor<f64> = Tensor::randn(&[1, 1, 8, 8], 0.2, &mut rng);
        let op: LinearOperator<f64> =
            build_operator(&DegradationSpec::Blur(BlurSpec::gaussian(3, 0.8).unwrap()), (1, 8, 8))
                .unwrap();
        let blurred = op.apply(&x).unwrap();
        let pipe = DegradationPipeline { operator: op, noise_sigma: 0.05, seed: 77 };
        let y = pipe.degrade(&x).unwrap();
        assert_eq!(y, add_awgn(&blurred, 0.05, 77));
        let bad = DegradationPipeline {
            operator: build_operator(&DegradationSpec::Identity, (1, 8, 8)).unwrap(),
            noise_sigma: -1.0,
            seed: 0,
        };
        assert!(bad.degrade(&x).is_err());
    }
}

//! Pure numeric kernels shared by forward evaluation and the autodiff tape.
//!
//! `conv2d` follows the cross-correlation convention (no kernel flip) used by
//! deep-learning frameworks. Its adjoint with respect to the input is exactly
//! `conv2d_grad_input`, which doubles as the transposed convolution forward.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Boundary handling for spatial kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Out-of-range taps read zero; output size is `ceil(extent / stride)`.
    Zero,
    /// Taps wrap around; requires the stride to divide each spatial extent.
    Circular,
}

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    pad: Padding,
    stride: usize,
) -> Result<ConvDims> {
    let (n, cix, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = k.dims4()?;
    if cix != ci {
        return Err(Error::dim(format!(
            "conv2d: input has {cix} channels, kernel expects {ci}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim(format!("conv2d: kernel extents must be odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::arg("conv2d: stride must be at least 1"));
    }
    let (oh, ow) = match pad {
        Padding::Circular => {
            if kh > h || kw > w {
                return Err(Error::dim(format!(
                    "conv2d: {kh}x{kw} kernel exceeds {h}x{w} image under circular padding"
                )));
            }
            if h % stride != 0 || w % stride != 0 {
                return Err(Error::dim(format!(
                    "conv2d: stride {stride} must divide {h}x{w} under circular padding"
                )));
            }
            (h / stride, w / stride)
        }
        Padding::Zero => (h.div_ceil(stride), w.div_ceil(stride)),
    };
    Ok(ConvDims {
        n,
        ci,
        h,
        w,
        co,
        kh,
        kw,
        ph: (kh - 1) / 2,
        pw: (kw - 1) / 2,
        oh,
        ow,
    })
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], wt: T) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += wt * *s;
    }
}

#[inline]
fn dot_acc<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Row segments `(dst_start, src_start, len)` realizing `dst[j] op= src[j + shift]`
/// over width `w` with the given padding; `shift` may wrap at most once.
fn row_segments(w: usize, shift: isize, pad: Padding) -> [(usize, usize, usize); 2] {
    let mut segs = [(0, 0, 0); 2];
    // Main segment: j + shift stays inside [0, w).
    let lo = (-shift).max(0) as usize;
    let hi = ((w as isize - shift).min(w as isize)).max(0) as usize;
    if hi > lo {
        segs[0] = (lo, (lo as isize + shift) as usize, hi - lo);
    }
    if pad == Padding::Circular {
        if shift < 0 {
            // j in [0, -shift): source wraps to the right edge.
            let len = (-shift) as usize;
            segs[1] = (0, (w as isize + shift) as usize, len.min(w));
        } else if shift > 0 {
            // j in [w - shift, w): source wraps to the left edge.
            let start = w.saturating_sub(shift as usize);
            segs[1] = (start, 0, w - start);
        }
    }
    segs
}

/// 2-D convolution of `x: [n, ci, h, w]` with `k: [co, ci, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    pad: Padding,
    stride: usize,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, k, pad, stride)?;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::zero(); d.n * d.co * d.oh * d.ow];

    if stride == 1 {
        for n in 0..d.n {
            for co in 0..d.co {
                let obase = (n * d.co + co) * d.oh * d.ow;
                for ci in 0..d.ci {
                    let xbase = (n * d.ci + ci) * d.h * d.w;
                    let kbase = (co * d.ci + ci) * d.kh * d.kw;
                    for dy in 0..d.kh {
                        let sy = dy as isize - d.ph as isize;
                        for dx in 0..d.kw {
                            let wt = kd[kbase + dy * d.kw + dx];
                            let sx = dx as isize - d.pw as isize;
                            let segs = row_segments(d.w, sx, pad);
                            for oy in 0..d.oh {
                                let iy = oy as isize + sy;
                                let iy = match pad {
                                    Padding::Circular => wrap(iy, d.h),
                                    Padding::Zero => {
                                        if iy < 0 || iy >= d.h as isize {
                                            continue;
                                        }
                                        iy as usize
                                    }
                                };
                                let orow = obase + oy * d.ow;
                                let xrow = xbase + iy * d.w;
                                for &(ds, ss, len) in &segs {
                                    if len > 0 {
                                        axpy(
                                            &mut out[orow + ds..orow + ds + len],
                                            &xd[xrow + ss..xrow + ss + len],
                                            wt,
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        for n in 0..d.n {
            for co in 0..d.co {
                for oy in 0..d.oh {
                    for ox in 0..d.ow {
                        let mut acc = T::zero();
                        for ci in 0..d.ci {
                            let xbase = (n * d.ci + ci) * d.h * d.w;
                            let kbase = (co * d.ci + ci) * d.kh * d.kw;
                            for dy in 0..d.kh {
                                let iy = (oy * stride + dy) as isize - d.ph as isize;
                                let iy = match pad {
                                    Padding::Circular => wrap(iy, d.h),
                                    Padding::Zero => {
                                        if iy < 0 || iy >= d.h as isize {
                                            continue;
                                        }
                                        iy as usize
                                    }
                                };
                                for dx in 0..d.kw {
                                    let ix = (ox * stride + dx) as isize - d.pw as isize;
                                    let ix = match pad {
                                        Padding::Circular => wrap(ix, d.w),
                                        Padding::Zero => {
                                            if ix < 0 || ix >= d.w as isize {
                                                continue;
                                            }
                                            ix as usize
                                        }
                                    };
                                    acc += xd[xbase + iy * d.w + ix] * kd[kbase + dy * d.kw + dx];
                                }
                            }
                        }
                        out[((n * d.co + co) * d.oh + oy) * d.ow + ox] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![d.n, d.co, d.oh, d.ow], out)
}

/// Adjoint of [`conv2d`] with respect to its input: maps `gy: [n, co, oh, ow]`
/// back to the input domain `[n, ci, in_h, in_w]`. Also the forward pass of the
/// transposed convolution used for upsampling.
pub fn conv2d_grad_input<T: Scalar>(
    gy: &Tensor<T>,
    k: &Tensor<T>,
    pad: Padding,
    stride: usize,
    in_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let (h, w) = in_hw;
    let (n, cog, oh, ow) = gy.dims4()?;
    let (co, ci, kh, kw) = k.dims4()?;
    if cog != co {
        return Err(Error::dim(format!(
            "conv2d_grad_input: upstream has {cog} channels, kernel produces {co}"
        )));
    }
    // Validate against the forward geometry for this input size.
    let probe = Tensor::<T>::zeros(&[1, ci, h, w]);
    let d = conv_dims(&probe, k, pad, stride)?;
    if (d.oh, d.ow) != (oh, ow) {
        return Err(Error::dim(format!(
            "conv2d_grad_input: upstream {oh}x{ow} does not match forward output {}x{} for input {h}x{w}",
            d.oh, d.ow
        )));
    }
    let gyd = gy.data();
    let kd = k.data();
    let mut gx = vec![T::zero(); n * ci * h * w];

    if stride == 1 {
        for ni in 0..n {
            for co_i in 0..co {
                let gybase = (ni * co + co_i) * oh * ow;
                for ci_i in 0..ci {
                    let gxbase = (ni * ci + ci_i) * h * w;
                    let kbase = (co_i * ci + ci_i) * kh * kw;
                    for dy in 0..kh {
                        let sy = dy as isize - d.ph as isize;
                        for dx in 0..kw {
                            let wt = kd[kbase + dy * kw + dx];
                            let sx = dx as isize - d.pw as isize;
                            let segs = row_segments(w, sx, pad);
                            for oy in 0..oh {
                                let iy = oy as isize + sy;
                                let iy = match pad {
                                    Padding::Circular => wrap(iy, h),
                                    Padding::Zero => {
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        iy as usize
                                    }
                                };
                                let gyrow = gybase + oy * ow;
                                let gxrow = gxbase + iy * w;
                                for &(ds, ss, len) in &segs {
                                    if len > 0 {
                                        // Scatter: gx[j + shift] += wt * gy[j].
                                        axpy(
                                            &mut gx[gxrow + ss..gxrow + ss + len],
                                            &gyd[gyrow + ds..gyrow + ds + len],
                                            wt,
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        for ni in 0..n {
            for co_i in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gyd[((ni * co + co_i) * oh + oy) * ow + ox];
                        for ci_i in 0..ci {
                            let gxbase = (ni * ci + ci_i) * h * w;
                            let kbase = (co_i * ci + ci_i) * kh * kw;
                            for dy in 0..kh {
                                let iy = (oy * stride + dy) as isize - d.ph as isize;
                                let iy = match pad {
                                    Padding::Circular => wrap(iy, h),
                                    Padding::Zero => {
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        iy as usize
                                    }
                                };
                                for dx in 0..kw {
                                    let ix = (ox * stride + dx) as isize - d.pw as isize;
                                    let ix = match pad {
                                        Padding::Circular => wrap(ix, w),
                                        Padding::Zero => {
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            ix as usize
                                        }
                                    };
                                    gx[gxbase + iy * w + ix] += g * kd[kbase + dy * kw + dx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![n, ci, h, w], gx)
}

/// Gradient of [`conv2d`] with respect to the kernel.
pub fn conv2d_grad_kernel<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    pad: Padding,
    stride: usize,
    k_shape: (usize, usize, usize, usize),
) -> Result<Tensor<T>> {
    let (co, ci, kh, kw) = k_shape;
    let probe = Tensor::<T>::zeros(&[co, ci, kh, kw]);
    let d = conv_dims(x, &probe, pad, stride)?;
    let (ng, cog, oh, ow) = gy.dims4()?;
    if ng != d.n || cog != co || (oh, ow) != (d.oh, d.ow) {
        return Err(Error::dim(format!(
            "conv2d_grad_kernel: upstream shape {:?} does not match output [{}, {}, {}, {}]",
            gy.shape(),
            d.n,
            co,
            d.oh,
            d.ow
        )));
    }
    let xd = x.data();
    let gyd = gy.data();
    let mut gk = vec![T::zero(); co * ci * kh * kw];

    if stride == 1 {
        for n in 0..d.n {
            for co_i in 0..co {
                let gybase = (n * co + co_i) * oh * ow;
                for ci_i in 0..ci {
                    let xbase = (n * ci + ci_i) * d.h * d.w;
                    let kbase = (co_i * ci + ci_i) * kh * kw;
                    for dy in 0..kh {
                        let sy = dy as isize - d.ph as isize;
                        for dx in 0..kw {
                            let sx = dx as isize - d.pw as isize;
                            let segs = row_segments(d.w, sx, pad);
                            let mut acc = T::zero();
                            for oy in 0..oh {
                                let iy = oy as isize + sy;
                                let iy = match pad {
                                    Padding::Circular => wrap(iy, d.h),
                                    Padding::Zero => {
                                        if iy < 0 || iy >= d.h as isize {
                                            continue;
                                        }
                                        iy as usize
                                    }
                                };
                                let gyrow = gybase + oy * ow;
                                let xrow = xbase + iy * d.w;
                                for &(ds, ss, len) in &segs {
                                    if len > 0 {
                                        acc += dot_acc(
                                            &gyd[gyrow + ds..gyrow + ds + len],
                                            &xd[xrow + ss..xrow + ss + len],
                                        );
                                    }
                                }
                            }
                            gk[kbase + dy * kw + dx] += acc;
                        }
                    }
                }
            }
        }
    } else {
        for n in 0..d.n {
            for co_i in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gyd[((n * co + co_i) * oh + oy) * ow + ox];
                        for ci_i in 0..ci {
                            let xbase = (n * ci + ci_i) * d.h * d.w;
                            let kbase = (co_i * ci + ci_i) * kh * kw;
                            for dy in 0..kh {
                                let iy = (oy * stride + dy) as isize - d.ph as isize;
                                let iy = match pad {
                                    Padding::Circular => wrap(iy, d.h),
                                    Padding::Zero => {
                                        if iy < 0 || iy >= d.h as isize {
                                            continue;
                                        }
                                        iy as usize
                                    }
                                };
                                for dx in 0..kw {
                                    let ix = (ox * stride + dx) as isize - d.pw as isize;
                                    let ix = match pad {
                                        Padding::Circular => wrap(ix, d.w),
                                        Padding::Zero => {
                                            if ix < 0 || ix >= d.w as isize {
                                                continue;
                                            }
                                            ix as usize
                                        }
                                    };
                                    gk[kbase + dy * kw + dx] += g * xd[xbase + iy * d.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![co, ci, kh, kw], gk)
}

/// Keep every `factor`-th pixel starting at index 0; extents must divide.
pub fn downsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(Error::arg("downsample: factor must be at least 1"));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::dim(format!(
            "downsample: factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let xb = nc * h * w;
        let ob = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                out[ob + oy * ow + ox] = xd[xb + oy * factor * w + ox * factor];
            }
        }
    }
    Tensor::from_vec(vec![n, c, oh, ow], out)
}

/// Adjoint of [`downsample`]: place values on the coarse grid, zeros elsewhere.
pub fn upsample_zero<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(Error::arg("upsample_zero: factor must be at least 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let xb = nc * h * w;
        let ob = nc * oh * ow;
        for iy in 0..h {
            for ix in 0..w {
                out[ob + iy * factor * ow + ix * factor] = xd[xb + iy * w + ix];
            }
        }
    }
    Tensor::from_vec(vec![n, c, oh, ow], out)
}

/// Concatenate along the channel axis; batches and spatial extents must agree.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::arg("concat_channels: need at least one part"));
    }
    let (n, _, h, w) = parts[0].dims4()?;
    let mut c_total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::dim(format!(
                "concat_channels: part shape {:?} incompatible with [{n}, _, {h}, {w}]",
                p.shape()
            )));
        }
        c_total += pc;
    }
    let mut out = vec![T::zero(); n * c_total * h * w];
    let plane = h * w;
    for ni in 0..n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape()[1];
            let src = &p.data()[ni * pc * plane..(ni + 1) * pc * plane];
            let dst_start = (ni * c_total + c_off) * plane;
            out[dst_start..dst_start + pc * plane].copy_from_slice(src);
            c_off += pc;
        }
    }
    Tensor::from_vec(vec![n, c_total, h, w], out)
}

/// Copy channels `c0..c1` into a new tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, c0: usize, c1: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if c0 >= c1 || c1 > c {
        return Err(Error::dim(format!(
            "slice_channels: range {c0}..{c1} invalid for {c} channels"
        )));
    }
    let plane = h * w;
    let oc = c1 - c0;
    let mut out = vec![T::zero(); n * oc * plane];
    for ni in 0..n {
        let src = (ni * c + c0) * plane;
        let dst = ni * oc * plane;
        out[dst..dst + oc * plane].copy_from_slice(&x.data()[src..src + oc * plane]);
    }
    Tensor::from_vec(vec![n, oc, h, w], out)
}

fn rot90cw<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("rank-4");
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for nc in 0..n * c {
        let xb = nc * h * w;
        let ob = nc * w * h;
        for oy in 0..w {
            for ox in 0..h {
                out[ob + oy * h + ox] = xd[xb + (h - 1 - ox) * w + oy];
            }
        }
    }
    Tensor::from_vec(vec![n, c, w, h], out).expect("shape preserved")
}

fn flip_h<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("rank-4");
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for nc in 0..n * c {
        let b = nc * h * w;
        for y in 0..h {
            for xq in 0..w {
                out[b + y * w + xq] = xd[b + y * w + (w - 1 - xq)];
            }
        }
    }
    Tensor::from_vec(vec![n, c, h, w], out).expect("shape preserved")
}

/// Apply element `idx` of the dihedral group of the square (8 elements:
/// horizontal flip optionally followed by `idx % 4` clockwise rotations).
pub fn dihedral_apply<T: Scalar>(x: &Tensor<T>, idx: usize) -> Tensor<T> {
    let r = idx % 4;
    let f = (idx / 4) % 2 == 1;
    let mut t = if f { flip_h(x) } else { x.clone() };
    for _ in 0..r {
        t = rot90cw(&t);
    }
    t
}

/// Inverse of [`dihedral_apply`] for the same `idx`.
pub fn dihedral_inverse<T: Scalar>(x: &Tensor<T>, idx: usize) -> Tensor<T> {
    let r = idx % 4;
    let f = (idx / 4) % 2 == 1;
    let mut t = x.clone();
    for _ in 0..(4 - r) % 4 {
        t = rot90cw(&t);
    }
    if f {
        t = flip_h(&t);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(vals: &[f64], h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(vec![1, 1, h, w], vals.to_vec()).unwrap()
    }

    #[test]
    fn circular_mean_kernel_averages_whole_image() {
        let x = img(&[1., 2., 3., 4., 5., 6., 7., 8., 9.], 3, 3);
        let k = Tensor::from_vec(vec![1, 1, 3, 3], vec![1.0 / 9.0; 9]).unwrap();
        let y = conv2d(&x, &k, Padding::Circular, 1).unwrap();
        for &v in y.data() {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pad_ones_kernel_counts_coverage() {
        let x = img(&[1.0; 9], 3, 3);
        let k = Tensor::from_vec(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &k, Padding::Zero, 1).unwrap();
        // Corner windows cover 4 pixels, edges 6, center 9.
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
        assert_eq!(y.data()[4], 9.0);
    }

    #[test]
    fn delta_kernel_is_identity_under_both_paddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f64> = Tensor::randn(&[2, 3, 5, 7], 1.0, &mut rng);
        let mut kd = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            kd[(c * 3 + c) * 9 + 4] = 1.0; // center tap, diagonal channels
        }
        let k = Tensor::from_vec(vec![3, 3, 3, 3], kd).unwrap();
        for pad in [Padding::Circular, Padding::Zero] {
            let y = conv2d(&x, &k, pad, 1).unwrap();
            assert!(y.linf_diff(&x).unwrap() < 1e-15);
        }
    }

    #[test]
    fn strided_circular_conv_matches_downsampled_dense_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f64> = Tensor::randn(&[1, 2, 6, 4], 1.0, &mut rng);
        let k: Tensor<f64> = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let strided = conv2d(&x, &k, Padding::Circular, 2).unwrap();
        let dense = conv2d(&x, &k, Padding::Circular, 1).unwrap();
        let picked = downsample(&dense, 2).unwrap();
        assert!(strided.linf_diff(&picked).unwrap() < 1e-12);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let even = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(conv2d(&x, &even, Padding::Zero, 1).is_err());
        let big = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &big, Padding::Circular, 1).is_err());
        assert!(conv2d(&x, &big, Padding::Zero, 1).is_ok());
        let k = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &k, Padding::Circular, 3).is_err()); // 3 does not divide 4
        assert!(conv2d(&x, &k, Padding::Zero, 0).is_err());
        let wrong_c = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        assert!(conv2d(&x, &wrong_c, Padding::Zero, 1).is_err());
    }

    /// The input-gradient kernel must be the exact adjoint of the forward map.
    #[test]
    fn conv_grad_input_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (pad, stride, h, w) in [
            (Padding::Circular, 1, 6, 6),
            (Padding::Circular, 2, 6, 4),
            (Padding::Zero, 1, 5, 7),
            (Padding::Zero, 2, 5, 7),
        ] {
            let x: Tensor<f64> = Tensor::randn(&[2, 3, h, w], 1.0, &mut rng);
            let k: Tensor<f64> = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng);
            let ax = conv2d(&x, &k, pad, stride).unwrap();
            let y: Tensor<f64> = Tensor::randn(ax.shape(), 1.0, &mut rng);
            let aty = conv2d_grad_input(&y, &k, pad, stride, (h, w)).unwrap();
            let lhs = ax.dot(&y).unwrap();
            let rhs = x.dot(&aty).unwrap();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()),
                "adjoint mismatch for {pad:?} stride {stride}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn resample_pair_is_adjoint_and_inverse_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = Tensor::randn(&[1, 2, 6, 8], 1.0, &mut rng);
        let d = downsample(&x, 2).unwrap();
        assert_eq!(d.shape(), &[1, 2, 3, 4]);
        let u = upsample_zero(&d, 2).unwrap();
        // Down after up-zero-fill restores the coarse image exactly.
        assert!(downsample(&u, 2).unwrap().linf_diff(&d).unwrap() == 0.0);
        // Adjoint identity <down(x), y> = <x, up(y)>.
        let y: Tensor<f64> = Tensor::randn(&[1, 2, 3, 4], 1.0, &mut rng);
        let lhs = d.dot(&y).unwrap();
        let rhs = x.dot(&upsample_zero(&y, 2).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(downsample(&x, 4).is_err()); // 4 does not divide 6
    }

    #[test]
    fn concat_then_slice_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Tensor<f64> = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let b: Tensor<f64> = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 4, 4, 4]);
        assert!(slice_channels(&cat, 0, 3).unwrap().linf_diff(&a).unwrap() == 0.0);
        assert!(slice_channels(&cat, 3, 4).unwrap().linf_diff(&b).unwrap() == 0.0);
        let c = Tensor::<f64>::zeros(&[2, 1, 5, 4]);
        assert!(concat_channels(&[&a, &c]).is_err());
        assert!(slice_channels(&cat, 2, 2).is_err());
    }

    #[test]
    fn dihedral_transforms_invert_and_cover_eight_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Tensor<f64> = Tensor::randn(&[1, 2, 3, 5], 1.0, &mut rng);
        let mut seen = Vec::new();
        for idx in 0..8 {
            let t = dihedral_apply(&x, idx);
            let back = dihedral_inverse(&t, idx);
            assert!(back.linf_diff(&x).unwrap() == 0.0, "idx {idx} does not invert");
            let key: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            assert!(!seen.contains(&key), "idx {idx} duplicates an earlier variant");
            seen.push(key);
        }
    }
}

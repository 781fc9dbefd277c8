//! The fixed operator set: convolutions, resampling, activations,
//! softmax/cross-entropy and the finite-difference helpers used by the
//! diffusion baselines.
//!
//! Every window that reaches past the border reads the nearest edge pixel
//! (replicate padding). Reductions accumulate in `f64`.

use crate::error::{Error, Result};
use crate::gemm::{gemm, Mat};
use crate::maps::LabelMap;
use crate::tensor::{GridShape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Replicate padding, output extent `ceil(H / stride)`.
    #[default]
    Same,
    /// No padding, output extent `(H - K) / stride + 1`.
    Valid,
}

/// Index arithmetic shared by the forward and adjoint convolution kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: GridShape,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pad_top: isize,
    pad_left: isize,
}

impl ConvGeometry {
    pub fn new(input: GridShape, kernel_shape: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let [cout, cin, kh, kw] = match *kernel_shape {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(Error::Shape(format!(
                    "kernels must be [Cout, Cin, Kh, Kw], got {kernel_shape:?}"
                )))
            }
        };
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be at least 1".into()));
        }
        if cin != input.channels {
            return Err(Error::Shape(format!(
                "kernel expects {cin} input channels, map has {}",
                input.channels
            )));
        }
        if cout == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape(format!("empty kernel {kernel_shape:?}")));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                if stride == 1 && (kh % 2 == 0 || kw % 2 == 0) {
                    return Err(Error::Shape(format!(
                        "same padding at stride 1 needs odd kernels, got {kh}x{kw}"
                    )));
                }
                let oh = input.height.div_ceil(stride);
                let ow = input.width.div_ceil(stride);
                let th = ((oh - 1) * stride + kh).saturating_sub(input.height);
                let tw = ((ow - 1) * stride + kw).saturating_sub(input.width);
                (oh, ow, (th / 2) as isize, (tw / 2) as isize)
            }
            Padding::Valid => {
                if kh > input.height || kw > input.width {
                    return Err(Error::Shape(format!(
                        "{kh}x{kw} kernel does not fit a {}x{} map",
                        input.height, input.width
                    )));
                }
                (
                    (input.height - kh) / stride + 1,
                    (input.width - kw) / stride + 1,
                    0,
                    0,
                )
            }
        };
        Ok(ConvGeometry {
            input,
            out_channels: cout,
            kh,
            kw,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    /// Length of one unrolled receptive field, `Cin * Kh * Kw`.
    pub fn patch_len(&self) -> usize {
        self.input.channels * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_h, self.out_w, self.out_channels]
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> (usize, usize) {
        let iy = (oy * self.stride + ky) as isize - self.pad_top;
        let ix = (ox * self.stride + kx) as isize - self.pad_left;
        (
            iy.clamp(0, self.input.height as isize - 1) as usize,
            ix.clamp(0, self.input.width as isize - 1) as usize,
        )
    }

    /// Unrolls receptive fields into a `[out_pixels, Cin*Kh*Kw]` matrix whose
    /// column order matches the `[Cin, Kh, Kw]` kernel layout.
    pub fn im2col(&self, input: &[f32]) -> Vec<f32> {
        let cin = self.input.channels;
        let plen = self.patch_len();
        let khw = self.kh * self.kw;
        let mut cols = vec![0.0f32; self.out_pixels() * plen];
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut cols[(oy * self.out_w + ox) * plen..][..plen];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let (iy, ix) = self.source(oy, ox, ky, kx);
                        let px = &input[(iy * self.input.width + ix) * cin..][..cin];
                        let tap = ky * self.kw + kx;
                        for (ci, &v) in px.iter().enumerate() {
                            row[ci * khw + tap] = v;
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatters columns back onto the
    /// input grid, summing contributions that replicate padding aliased.
    pub fn col2im(&self, cols: &[f32]) -> Vec<f32> {
        let cin = self.input.channels;
        let plen = self.patch_len();
        let khw = self.kh * self.kw;
        let mut out = vec![0.0f32; self.input.pixels() * cin];
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &cols[(oy * self.out_w + ox) * plen..][..plen];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let (iy, ix) = self.source(oy, ox, ky, kx);
                        let px = &mut out[(iy * self.input.width + ix) * cin..][..cin];
                        let tap = ky * self.kw + kx;
                        for (ci, v) in px.iter_mut().enumerate() {
                            *v += row[ci * khw + tap];
                        }
                    }
                }
            }
        }
        out
    }

    /// `cols * kernelsᵀ`, giving the channels-last output map.
    pub fn apply_cols(&self, cols: &[f32], kernels: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.out_pixels() * self.out_channels];
        gemm(
            Mat::new(cols, self.out_pixels(), self.patch_len()),
            Mat::new(kernels, self.out_channels, self.patch_len()).t(),
            &mut out,
            0.0,
        );
        out
    }
}

/// 2-D convolution (cross-correlation) of an `[H, W, Cin]` map with
/// `[Cout, Cin, Kh, Kw]` kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new(input.grid()?, kernels.shape(), stride, padding)?;
    let cols = g.im2col(input.data());
    Tensor::new(&g.output_shape(), g.apply_cols(&cols, kernels.data()))
}

/// Per-pixel affine map `x Wᵀ + b` over the trailing channel axis, i.e. a
/// 1x1 convolution. `weights` is `[Cout, Cin]`, `bias` is `[Cout]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, cin, cout) = dense_dims(input, weights, bias)?;
    let mut out = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    gemm(
        Mat::new(input.data(), rows, cin),
        Mat::new(weights.data(), cout, cin).t(),
        &mut out,
        1.0,
    );
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("checked rank") = cout;
    Tensor::new(&shape, out)
}

pub(crate) fn dense_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (cout, cin) = match *weights.shape() {
        [o, i] => (o, i),
        _ => {
            return Err(Error::Shape(format!(
                "dense weights must be [Cout, Cin], got {:?}",
                weights.shape()
            )))
        }
    };
    if input.shape().last() != Some(&cin) {
        return Err(Error::Shape(format!(
            "dense layer expects {cin} input channels, got {:?}",
            input.shape()
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }
    Ok((input.len() / cin, cin, cout))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Bilinear upsampling by an integer factor with the half-pixel
/// (align-corners-false) convention; samples outside the grid clamp.
pub fn upsample_bilinear(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsampling factor must be at least 1".into()));
    }
    let g = input.grid()?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let taps = |n: usize, len: usize| -> Vec<(usize, usize, f32)> {
        (0..n)
            .map(|o| {
                let src = (o as f64 + 0.5) / factor as f64 - 0.5;
                let lo = src.floor();
                let frac = (src - lo) as f32;
                let clampi = |v: f64| v.clamp(0.0, (len - 1) as f64) as usize;
                (clampi(lo), clampi(lo + 1.0), frac)
            })
            .collect()
    };
    let (oh, ow) = (g.height * factor, g.width * factor);
    let ys = taps(oh, g.height);
    let xs = taps(ow, g.width);
    let c = g.channels;
    let mut out = Vec::with_capacity(oh * ow * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let a = input.at3(y0, x0, ch);
                let b = input.at3(y0, x1, ch);
                let top = a + (b - a) * fx;
                let a = input.at3(y1, x0, ch);
                let b = input.at3(y1, x1, ch);
                let bottom = a + (b - a) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// Index arithmetic of the learned (transposed-convolution) upsampler.
///
/// The input is replicate-padded, scattered through `[Cout, Cin, ks, ks]`
/// kernels at stride `factor`, and cropped to `factor` times the input
/// extent. With [`bilinear_upsample_kernels`] this reproduces
/// [`upsample_bilinear`] exactly up to rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpsampleGeometry {
    pub input: GridShape,
    pub out_channels: usize,
    pub ksize: usize,
    pub factor: usize,
    pad_before: usize,
    padded_h: usize,
    padded_w: usize,
    crop: usize,
}

impl UpsampleGeometry {
    pub fn new(input: GridShape, kernel_shape: &[usize], factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsampling factor must be at least 1".into()));
        }
        let [cout, cin, kh, kw] = match *kernel_shape {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(Error::Shape(format!(
                    "upsampling kernels must be [Cout, Cin, K, K], got {kernel_shape:?}"
                )))
            }
        };
        if cin != input.channels || kh != kw || kh < factor || (kh - factor) % 2 != 0 || cout == 0 {
            return Err(Error::Shape(format!(
                "kernels {kernel_shape:?} incompatible with {} channels at factor {factor}",
                input.channels
            )));
        }
        let offset = (kh - factor) / 2;
        let pad_before = (kh - 1 - offset) / factor;
        let pad_after = (factor - 1 + offset) / factor;
        Ok(UpsampleGeometry {
            input,
            out_channels: cout,
            ksize: kh,
            factor,
            pad_before,
            padded_h: input.height + pad_before + pad_after,
            padded_w: input.width + pad_before + pad_after,
            crop: offset + factor * pad_before,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [
            self.input.height * self.factor,
            self.input.width * self.factor,
            self.out_channels,
        ]
    }

    /// Calls `f(src_pixel, out_pixel, ky, kx)` for every input/output pair
    /// linked by a kernel tap.
    pub(crate) fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (oh, ow) = (self.input.height * self.factor, self.input.width * self.factor);
        for jp in 0..self.padded_h {
            let sy = (jp as isize - self.pad_before as isize).clamp(0, self.input.height as isize - 1) as usize;
            for ip in 0..self.padded_w {
                let sx = (ip as isize - self.pad_before as isize).clamp(0, self.input.width as isize - 1) as usize;
                let src = sy * self.input.width + sx;
                for ky in 0..self.ksize {
                    let y = (jp * self.factor + ky) as isize - self.crop as isize;
                    if y < 0 || y >= oh as isize {
                        continue;
                    }
                    for kx in 0..self.ksize {
                        let x = (ip * self.factor + kx) as isize - self.crop as isize;
                        if x < 0 || x >= ow as isize {
                            continue;
                        }
                        f(src, y as usize * ow + x as usize, ky, kx);
                    }
                }
            }
        }
    }

    pub(crate) fn kernel_index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.input.channels + ci) * self.ksize + ky) * self.ksize + kx
    }
}

/// Learned upsampling (transposed convolution) of an `[h, w, Cin]` map to
/// `[h*factor, w*factor, Cout]`.
pub fn upsample_learned(input: &Tensor, kernels: &Tensor, factor: usize) -> Result<Tensor> {
    let g = UpsampleGeometry::new(input.grid()?, kernels.shape(), factor)?;
    let [oh, ow, cout] = g.output_shape();
    let cin = g.input.channels;
    let k = kernels.data();
    let x = input.data();
    let mut out = vec![0.0f32; oh * ow * cout];
    g.for_each_tap(|src, dst, ky, kx| {
        let xs = &x[src * cin..][..cin];
        let ys = &mut out[dst * cout..][..cout];
        for (co, y) in ys.iter_mut().enumerate() {
            for (ci, &v) in xs.iter().enumerate() {
                *y += v * k[g.kernel_index(co, ci, ky, kx)];
            }
        }
    });
    Tensor::new(&[oh, ow, cout], out)
}

/// Kernels that make [`upsample_learned`] perform per-channel bilinear
/// interpolation: size `2*factor - factor % 2`, identity across channels.
pub fn bilinear_upsample_kernels(channels: usize, factor: usize) -> Tensor {
    let ks = 2 * factor - factor % 2;
    let center = (ks as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..ks)
        .map(|i| 1.0 - (i as f64 - center).abs() / factor as f64)
        .collect();
    let mut t = Tensor::zeros(&[channels, channels, ks, ks]);
    let data = t.data_mut();
    for c in 0..channels {
        for ky in 0..ks {
            for kx in 0..ks {
                data[((c * channels + c) * ks + ky) * ks + kx] = (w[ky] * w[kx]) as f32;
            }
        }
    }
    t
}

/// Per-pixel softmax over the channel axis with max subtraction.
pub fn softmax_channels(scores: &Tensor) -> Result<Tensor> {
    let g = scores.grid()?;
    let mut out = Vec::with_capacity(scores.len());
    for px in scores.data().chunks_exact(g.channels) {
        softmax_into(px, &mut out);
    }
    Tensor::new(scores.shape(), out)
}

pub(crate) fn softmax_into(px: &[f32], out: &mut Vec<f32>) {
    let m = px.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let start = out.len();
    let mut total = 0.0f64;
    for &v in px {
        let e = ((v - m) as f64).exp();
        total += e;
        out.push(e as f32);
    }
    for (slot, &v) in out[start..].iter_mut().zip(px) {
        *slot = (((v - m) as f64).exp() / total) as f32;
    }
}

/// Mean over pixels of `-ln p(target)`.
pub fn cross_entropy(probabilities: &Tensor, target: &LabelMap) -> Result<f64> {
    let g = probabilities.grid()?;
    if (g.height, g.width) != (target.height(), target.width()) {
        return Err(Error::Shape(format!(
            "probabilities {}x{} vs labels {}x{}",
            g.height,
            g.width,
            target.height(),
            target.width()
        )));
    }
    target.check_classes(g.channels)?;
    let total: f64 = probabilities
        .data()
        .chunks_exact(g.channels)
        .zip(target.data())
        .map(|(px, &l)| -(px[l as usize].max(f32::MIN_POSITIVE) as f64).ln())
        .sum();
    Ok(total / g.pixels() as f64)
}

/// Spatial derivatives of a single-channel map: central differences in the
/// interior, one-sided differences on the border rows and columns.
pub fn grad_xy(field: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = field.grid()?;
    if g.channels != 1 || g.height < 2 || g.width < 2 {
        return Err(Error::Shape(format!(
            "grad_xy needs an [H>=2, W>=2, 1] map, got {:?}",
            field.shape()
        )));
    }
    let (h, w) = (g.height, g.width);
    let u = field.data();
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            gx[y * w + x] = (u[y * w + xr] - u[y * w + xl]) / (xr - xl) as f32;
            gy[y * w + x] = (u[yd * w + x] - u[yu * w + x]) / (yd - yu) as f32;
        }
    }
    Ok((
        Tensor::new(&[h, w, 1], gx)?,
        Tensor::new(&[h, w, 1], gy)?,
    ))
}

/// Normalized sampled Gaussian truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror index with the edge sample repeated (`-1 -> 0`, `n -> n-1`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

/// Separable Gaussian smoothing of each channel.
///
/// The grid is extended by mirroring about the outer pixel edges, which
/// agrees with replicate padding for the first ghost pixel and keeps the
/// zero-flux property for wide kernels, so the global mean is preserved.
pub fn gaussian_smooth(field: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let g = field.grid()?;
    if sigma == 0.0 {
        return Ok(field.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w, c) = (g.height, g.width, g.channels);
    let src = field.data();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (t, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + t as isize - r, w);
                    acc += kv * src[(y * w + sx) * c + ch] as f64;
                }
                tmp[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for (t, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + t as isize - r, h);
                    acc += kv * tmp[(sy * w + x) * c + ch] as f64;
                }
                out[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    Tensor::new(field.shape(), out)
}

/// Mean of the three colour channels, `[H, W, 1]`.
pub fn luminance(image: &Tensor) -> Result<Tensor> {
    let g = image.grid()?;
    if g.channels != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {:?}", image.shape())));
    }
    let data = image
        .data()
        .chunks_exact(3)
        .map(|px| (px[0] + px[1] + px[2]) / 3.0)
        .collect();
    Tensor::new(&[g.height, g.width, 1], data)
}

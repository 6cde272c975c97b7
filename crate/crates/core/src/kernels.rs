//! Numeric kernels shared by the tape (with adjoints) and the tape-free
//! inference path.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Guard added under the square root of the l2 normalization.
pub const L2_EPS: f64 = 1e-8;

/// "Same" padding for a dilated kernel: the odd leftover goes top/left.
pub fn same_padding(kernel: usize, dilation: usize) -> (usize, usize) {
    let total = dilation * (kernel - 1);
    let after = total / 2;
    (total - after, after)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }
}

pub(crate) fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<ConvGeometry> {
    let is = input.shape();
    let ks = kernel.shape();
    if is.len() != 3 {
        return Err(Error::shape("conv2d", format!("input must be H×W×C, got {is:?}")));
    }
    if ks.len() != 4 || ks[1] != ks[2] || ks[1] == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be Cout×k×k×Cin, got {ks:?}"),
        ));
    }
    if ks[3] != is[2] {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {} input channels, input has {}", ks[3], is[2]),
        ));
    }
    if bias.shape() != [ks[0]] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {} output channels", bias.shape(), ks[0]),
        ));
    }
    if dilation == 0 {
        return Err(Error::InvalidArgument("dilation must be >= 1".into()));
    }
    Ok(ConvGeometry {
        height: is[0],
        width: is[1],
        cin: is[2],
        cout: ks[0],
        k: ks[1],
        dilation,
        pad: same_padding(ks[1], dilation).0,
    })
}

/// Unrolls every receptive field into a row: `[H·W, k·k·Cin]`, column order
/// `(ky, kx, cin)` to match the kernel layout.
pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let row_len = g.patch_len();
    let mut cols = vec![T::zero(); g.pixels() * row_len];
    for y in 0..g.height {
        for ky in 0..g.k {
            let sy = (y + ky * g.dilation) as isize - g.pad as isize;
            if sy < 0 || sy >= g.height as isize {
                continue;
            }
            let sy = sy as usize;
            for x in 0..g.width {
                let row = &mut cols[(y * g.width + x) * row_len..][..row_len];
                for kx in 0..g.k {
                    let sx = (x + kx * g.dilation) as isize - g.pad as isize;
                    if sx < 0 || sx >= g.width as isize {
                        continue;
                    }
                    let src = (sy * g.width + sx as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the image.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let row_len = g.patch_len();
    for y in 0..g.height {
        for ky in 0..g.k {
            let sy = (y + ky * g.dilation) as isize - g.pad as isize;
            if sy < 0 || sy >= g.height as isize {
                continue;
            }
            let sy = sy as usize;
            for x in 0..g.width {
                let row = &cols[(y * g.width + x) * row_len..][..row_len];
                for kx in 0..g.k {
                    let sx = (x + kx * g.dilation) as isize - g.pad as isize;
                    if sx < 0 || sx >= g.width as isize {
                        continue;
                    }
                    let dst = (sy * g.width + sx as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for (o, &v) in out[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Dilated same-size cross-correlation plus bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, kernel, bias, dilation)?;
    let p = g.pixels();
    let mut out = vec![T::zero(); p * g.cout];
    let owned;
    let cols: &[T] = if g.k == 1 {
        input.data()
    } else {
        owned = im2col(input.data(), &g);
        &owned
    };
    gemm(
        MatRef::new(cols, p, g.patch_len()),
        MatRef::transposed(kernel.data(), g.patch_len(), g.cout),
        &mut out,
        false,
    );
    let b = bias.data();
    for row in out.chunks_exact_mut(g.cout) {
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
    Tensor::new([g.height, g.width, g.cout], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
    dout: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, kernel, bias, dilation)?;
    let p = g.pixels();
    let kl = g.patch_len();
    let owned;
    let cols: &[T] = if g.k == 1 {
        input.data()
    } else {
        owned = im2col(input.data(), &g);
        &owned
    };
    let dout = dout.data();

    let mut dkernel = vec![T::zero(); g.cout * kl];
    gemm(
        MatRef::transposed(dout, g.cout, p),
        MatRef::new(cols, p, kl),
        &mut dkernel,
        false,
    );
    let mut dbias = vec![T::zero(); g.cout];
    for row in dout.chunks_exact(g.cout) {
        for (d, &v) in dbias.iter_mut().zip(row) {
            *d += v;
        }
    }

    let dinput = if need_input {
        let mut dcols = vec![T::zero(); p * kl];
        gemm(
            MatRef::new(dout, p, g.cout),
            MatRef::new(kernel.data(), g.cout, kl),
            &mut dcols,
            false,
        );
        let data = if g.k == 1 {
            dcols
        } else {
            let mut acc = vec![T::zero(); input.len()];
            col2im_add(&dcols, &g, &mut acc);
            acc
        };
        Some(Tensor::new(input.shape().to_vec(), data)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: dinput,
        kernel: Tensor::new(kernel.shape().to_vec(), dkernel)?,
        bias: Tensor::new([g.cout], dbias)?,
    })
}

/// Softmax along the last axis.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.channels();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// l2 normalization along the last axis with `L2_EPS` under the root.
pub fn l2_normalize_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    normalize_last(x, L2_EPS)
}

/// `x / sqrt(|x|² + eps)` along the last axis.
pub fn normalize_last<T: Scalar>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let c = x.channels();
    let eps = T::lit(eps);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let norm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

/// Source coordinate and interpolation weights for resampling one axis.
fn resample_axis(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::shape("downsample_bilinear", format!("expected H×W[×C], got {shape:?}"))),
    }
}

/// Bilinear resize to `out_h × out_w` (pixel-center aligned).
pub fn downsample_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = spatial_dims(x.shape())?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("empty resize".into()));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = out_h;
    shape[1] = out_w;
    let src = x.data();
    let mut out = vec![T::zero(); out_h * out_w * c];
    let cols: Vec<_> = (0..out_w).map(|ox| resample_axis(ox, w, out_w)).collect();
    for oy in 0..out_h {
        let (y0, y1, fy) = resample_axis(oy, h, out_h);
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let weights = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            let dst = &mut out[(oy * out_w + ox) * c..][..c];
            for (base, wgt) in weights {
                let wgt = T::lit(wgt);
                for (ch, d) in dst.iter_mut().enumerate() {
                    *d += src[base + ch] * wgt;
                }
            }
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn downsample_bilinear_backward<T: Scalar>(
    in_shape: &[usize],
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, c) = spatial_dims(in_shape)?;
    let (out_h, out_w) = (dout.shape()[0], dout.shape()[1]);
    let mut dx = vec![T::zero(); h * w * c];
    let g = dout.data();
    for oy in 0..out_h {
        let (y0, y1, fy) = resample_axis(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = resample_axis(ox, w, out_w);
            let weights = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            let src = &g[(oy * out_w + ox) * c..][..c];
            for (base, wgt) in weights {
                let wgt = T::lit(wgt);
                for (ch, &gv) in src.iter().enumerate() {
                    dx[base + ch] += gv * wgt;
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

/// Output size of a sliding window of `size` at `stride` over `len` cells.
pub fn window_count(len: usize, size: usize, stride: usize) -> usize {
    if size > len || size == 0 || stride == 0 {
        0
    } else {
        (len - size) / stride + 1
    }
}

fn check_window(op: &'static str, shape: &[usize], size: usize, stride: usize) -> Result<(usize, usize)> {
    let [h, w] = *shape else {
        return Err(Error::shape(op, format!("expected an H×W map, got {shape:?}")));
    };
    if size == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!("{op}: window and stride must be >= 1")));
    }
    if size > h || size > w {
        return Err(Error::InvalidArgument(format!(
            "{op}: window {size} larger than map {h}×{w}"
        )));
    }
    Ok((h, w))
}

/// Max over every `size × size` window; returns the values and, per window,
/// the flat index of its first maximal element in row-major order.
pub fn max_over_window<T: Scalar>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w) = check_window("max_over_window", x.shape(), size, stride)?;
    let (oh, ow) = (window_count(h, size, stride), window_count(w, size, stride));
    let d = x.data();

    // Separable pass: first the row-wise window max, then column-wise over
    // those. Strict `>` keeps the first maximum in row-major order.
    let mut row_max = vec![(T::zero(), 0usize); h * ow];
    for y in 0..h {
        for ox in 0..ow {
            let x0 = ox * stride;
            let mut best = (d[y * w + x0], y * w + x0);
            for xx in x0 + 1..x0 + size {
                let v = d[y * w + xx];
                if v > best.0 {
                    best = (v, y * w + xx);
                }
            }
            row_max[y * ow + ox] = best;
        }
    }
    let mut values = Vec::with_capacity(oh * ow);
    let mut arg = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let y0 = oy * stride;
            let mut best = row_max[y0 * ow + ox];
            for yy in y0 + 1..y0 + size {
                let cand = row_max[yy * ow + ox];
                if cand.0 > best.0 {
                    best = cand;
                }
            }
            values.push(best.0);
            arg.push(best.1);
        }
    }
    Ok((Tensor::new([oh, ow], values)?, arg))
}

/// Inclusive-exclusive 2D prefix sums accumulated in f64.
pub(crate) struct Integral {
    w1: usize,
    sums: Vec<f64>,
}

impl Integral {
    pub fn new(h: usize, w: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let w1 = w + 1;
        let mut sums = vec![0.0; (h + 1) * w1];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += value(y, x);
                sums[(y + 1) * w1 + x + 1] = sums[y * w1 + x + 1] + row;
            }
        }
        Self { w1, sums }
    }

    /// Sum over rows `y0..y1`, columns `x0..x1`.
    pub fn rect(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
        let w1 = self.w1;
        self.sums[y1 * w1 + x1] - self.sums[y0 * w1 + x1] - self.sums[y1 * w1 + x0]
            + self.sums[y0 * w1 + x0]
    }
}

/// For every pixel, the sum of `coef` over all windows (origin grid
/// `oh × ow`, given `stride`) that contain it. This is the adjoint of a
/// window-sum.
pub(crate) fn scatter_window_coefficients(
    h: usize,
    w: usize,
    size: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    coef: &[f64],
) -> Vec<f64> {
    // Place coefficients at window origins and sum over the set of origins
    // whose window covers each pixel.
    let mut origin = vec![0.0; h * w];
    for oy in 0..oh {
        for ox in 0..ow {
            origin[oy * stride * w + ox * stride] = coef[oy * ow + ox];
        }
    }
    let integral = Integral::new(h, w, |y, x| origin[y * w + x]);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let y0 = (y + 1).saturating_sub(size);
        for x in 0..w {
            let x0 = (x + 1).saturating_sub(size);
            out[y * w + x] = integral.rect(y0, x0, y + 1, x + 1);
        }
    }
    out
}

/// Mean over every `size × size` window.
pub fn avg_over_window<T: Scalar>(x: &Tensor<T>, size: usize, stride: usize) -> Result<Tensor<T>> {
    let (h, w) = check_window("avg_over_window", x.shape(), size, stride)?;
    let (oh, ow) = (window_count(h, size, stride), window_count(w, size, stride));
    let d = x.data();
    let integral = Integral::new(h, w, |y, xx| d[y * w + xx].as_f64());
    let area = (size * size) as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let (y0, x0) = (oy * stride, ox * stride);
            out.push(T::lit(integral.rect(y0, x0, y0 + size, x0 + size) / area));
        }
    }
    Tensor::new([oh, ow], out)
}

/// Bilinear taps at sub-pixel `(x, y)`; `None` outside `[0, w-1] × [0, h-1]`.
pub fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> Option<[(usize, f64); 4]> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Some([
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ])
}

//! Raw forward/backward kernels over NHWC slices.
//!
//! Convolutions lower to im2col + GEMM. The transposed convolution is the
//! backward-input pass of the convolution described by the same geometry,
//! so the two share `ConvGeometry` and the im2col/col2im pair.

use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Geometry of a 2-D convolution from an `in_h×in_w×cin` image to an
/// `out_h×out_w×cout` image with a `kh×kw×cin×cout` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output size and leading pad along one axis.
pub fn axis_geometry(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if input < kernel {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
    }
}

impl ConvGeometry {
    /// Geometry for a forward convolution over `input` NHWC dims with a
    /// `[kh, kw, cin, cout]` kernel.
    pub fn conv(input: [usize; 4], kernel: [usize; 4], stride: usize, padding: Padding) -> Result<Self> {
        let [n, h, w, c] = input;
        let [kh, kw, kcin, cout] = kernel;
        if stride == 0 {
            return Err(Error::Argument("convolution stride must be positive".into()));
        }
        if c != kcin {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} has {} channels but kernel {:?} expects {}", input, c, kernel, kcin),
            ));
        }
        let too_small = || {
            Error::shape(
                "conv2d",
                format!("input {:?} is smaller than kernel {:?} under valid padding", input, kernel),
            )
        };
        let (out_h, pad_top) = axis_geometry(h, kh, stride, padding).ok_or_else(too_small)?;
        let (out_w, pad_left) = axis_geometry(w, kw, stride, padding).ok_or_else(too_small)?;
        Ok(Self {
            batch: n,
            in_h: h,
            in_w: w,
            cin: c,
            out_h,
            out_w,
            cout,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
        })
    }

    /// Geometry of the convolution whose backward-input pass is a
    /// same-padded transposed convolution of `input` NHWC dims with a
    /// `[kh, kw, cout, cin]` kernel. The transposed output is
    /// `in_h×in_w×cin` of the returned geometry.
    pub fn transposed(input: [usize; 4], kernel: [usize; 4], stride: usize) -> Result<Self> {
        let [n, h, w, c] = input;
        let [kh, kw, kout, kin] = kernel;
        if stride == 0 {
            return Err(Error::Argument("convolution stride must be positive".into()));
        }
        if c != kin {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("input {:?} has {} channels but kernel {:?} expects {}", input, c, kernel, kin),
            ));
        }
        let g = Self::conv([n, h * stride, w * stride, kout], [kh, kw, kout, kin], stride, Padding::Same)?;
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        Ok(g)
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_h * self.in_w * self.cin
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_h * self.out_w * self.cout
    }

    pub fn kernel_len(&self) -> usize {
        self.patch_len() * self.cout
    }

    /// Source row of kernel tap `k` for output row `o`, if inside the image.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&i| i < limit)
    }

    /// Unfolds one batch item (`in_h×in_w×cin`) into `positions × patch_len`.
    fn im2col<T: Element>(&self, image: &[T], col: &mut [T]) {
        let c = self.cin;
        let row_len = self.kw * c;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut col[(oy * self.out_w + ox) * self.patch_len()..][..self.patch_len()];
                for ky in 0..self.kh {
                    let dst = &mut row[ky * row_len..][..row_len];
                    let Some(iy) = Self::source(oy, ky, self.stride, self.pad_top, self.in_h) else {
                        dst.fill(T::zero());
                        continue;
                    };
                    for kx in 0..self.kw {
                        let d = &mut dst[kx * c..][..c];
                        match Self::source(ox, kx, self.stride, self.pad_left, self.in_w) {
                            Some(ix) => d.copy_from_slice(&image[(iy * self.in_w + ix) * c..][..c]),
                            None => d.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters-adds patches back into an image.
    fn col2im<T: Element>(&self, col: &[T], image: &mut [T]) {
        let c = self.cin;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &col[(oy * self.out_w + ox) * self.patch_len()..][..self.patch_len()];
                for ky in 0..self.kh {
                    let Some(iy) = Self::source(oy, ky, self.stride, self.pad_top, self.in_h) else {
                        continue;
                    };
                    for kx in 0..self.kw {
                        let Some(ix) = Self::source(ox, kx, self.stride, self.pad_left, self.in_w) else {
                            continue;
                        };
                        let src = &row[(ky * self.kw + kx) * c..][..c];
                        let dst = &mut image[(iy * self.in_w + ix) * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T]) {
    for px in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in px.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
}

fn channel_sums<T: Element>(grad: &[T], channels: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); channels];
    for px in grad.chunks_exact(channels) {
        for (s, &g) in sums.iter_mut().zip(px) {
            *s = *s + g;
        }
    }
    sums
}

pub fn conv2d_forward<T: Element>(x: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let (p, k, n) = (g.positions(), g.patch_len(), g.cout);
    let mut out = vec![T::zero(); g.output_len()];
    let mut col = vec![T::zero(); p * k];
    let in_item = g.in_h * g.in_w * g.cin;
    for b in 0..g.batch {
        g.im2col(&x[b * in_item..][..in_item], &mut col);
        T::gemm(p, k, n, &col, false, kernel, false, &mut out[b * p * n..][..p * n], false);
    }
    if let Some(bias) = bias {
        add_bias(&mut out, bias);
    }
    out
}

/// Gradients of a convolution. Each output is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeometry,
    want: [bool; 3],
) -> ConvGrads<T> {
    let (p, k, n) = (g.positions(), g.patch_len(), g.cout);
    let in_item = g.in_h * g.in_w * g.cin;
    let mut dx = want[0].then(|| vec![T::zero(); g.input_len()]);
    let mut dk = want[1].then(|| vec![T::zero(); g.kernel_len()]);
    let mut col = vec![T::zero(); p * k];
    for b in 0..g.batch {
        let dout_b = &dout[b * p * n..][..p * n];
        if let Some(dk) = dk.as_mut() {
            g.im2col(&x[b * in_item..][..in_item], &mut col);
            T::gemm(k, p, n, &col, true, dout_b, false, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(p, n, k, dout_b, false, kernel, true, &mut col, false);
            g.col2im(&col, &mut dx[b * in_item..][..in_item]);
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: want[2].then(|| channel_sums(dout, n)),
    }
}

/// Transposed convolution: maps `out_h×out_w×cout` images of `g` to
/// `in_h×in_w×cin` images, with the kernel laid out as for `g`.
pub fn conv2d_transpose_forward<T: Element>(y: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let (p, k, n) = (g.positions(), g.patch_len(), g.cout);
    let in_item = g.in_h * g.in_w * g.cin;
    let mut out = vec![T::zero(); g.input_len()];
    let mut col = vec![T::zero(); p * k];
    for b in 0..g.batch {
        T::gemm(p, n, k, &y[b * p * n..][..p * n], false, kernel, true, &mut col, false);
        g.col2im(&col, &mut out[b * in_item..][..in_item]);
    }
    if let Some(bias) = bias {
        add_bias(&mut out, bias);
    }
    out
}

pub fn conv2d_transpose_backward<T: Element>(
    y: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeometry,
    want: [bool; 3],
) -> ConvGrads<T> {
    let (p, k, n) = (g.positions(), g.patch_len(), g.cout);
    let in_item = g.in_h * g.in_w * g.cin;
    let mut dy = want[0].then(|| vec![T::zero(); g.output_len()]);
    let mut dk = want[1].then(|| vec![T::zero(); g.kernel_len()]);
    if dy.is_some() || dk.is_some() {
        let mut col = vec![T::zero(); p * k];
        for b in 0..g.batch {
            g.im2col(&dout[b * in_item..][..in_item], &mut col);
            if let Some(dy) = dy.as_mut() {
                T::gemm(p, k, n, &col, false, kernel, false, &mut dy[b * p * n..][..p * n], false);
            }
            if let Some(dk) = dk.as_mut() {
                T::gemm(k, p, n, &col, true, &y[b * p * n..][..p * n], false, dk, true);
            }
        }
    }
    ConvGrads {
        input: dy,
        kernel: dk,
        bias: want[2].then(|| channel_sums(dout, g.cin)),
    }
}

/// Saved state of an instance-norm forward pass.
pub struct NormCache<T> {
    pub normalized: Vec<T>,
    /// One entry per (batch item, channel).
    pub inv_std: Vec<T>,
}

pub fn instance_norm_forward<T: Element>(
    x: &[T],
    dims: [usize; 4],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormCache<T>) {
    let [n, h, w, c] = dims;
    let hw = h * w;
    let count = T::from_usize(hw).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); n * c];
    for b in 0..n {
        let item = &x[b * hw * c..][..hw * c];
        let mut mean = vec![T::zero(); c];
        for px in item.chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(px) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / count);
        let mut var = vec![T::zero(); c];
        for px in item.chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                let d = v - m;
                *s = *s + d * d;
            }
        }
        let inv: Vec<T> = var.iter().map(|&s| (s / count + eps).sqrt().recip()).collect();
        let ys = &mut y[b * hw * c..][..hw * c];
        let xs = &mut normalized[b * hw * c..][..hw * c];
        for ((px, yp), xp) in item.chunks_exact(c).zip(ys.chunks_exact_mut(c)).zip(xs.chunks_exact_mut(c)) {
            for ch in 0..c {
                let xhat = (px[ch] - mean[ch]) * inv[ch];
                xp[ch] = xhat;
                yp[ch] = gamma[ch] * xhat + beta[ch];
            }
        }
        inv_std[b * c..][..c].copy_from_slice(&inv);
    }
    (y, NormCache { normalized, inv_std })
}

/// Returns (dx, dgamma, dbeta).
pub fn instance_norm_backward<T: Element>(
    dy: &[T],
    dims: [usize; 4],
    gamma: &[T],
    cache: &NormCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, h, w, c] = dims;
    let hw = h * w;
    let count = T::from_usize(hw).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        let off = b * hw * c;
        let dys = &dy[off..][..hw * c];
        let xs = &cache.normalized[off..][..hw * c];
        // Per channel: Σ dxhat and Σ dxhat·xhat.
        let mut sum_d = vec![T::zero(); c];
        let mut sum_dx = vec![T::zero(); c];
        for (dp, xp) in dys.chunks_exact(c).zip(xs.chunks_exact(c)) {
            for ch in 0..c {
                dgamma[ch] = dgamma[ch] + dp[ch] * xp[ch];
                dbeta[ch] = dbeta[ch] + dp[ch];
                let d = dp[ch] * gamma[ch];
                sum_d[ch] = sum_d[ch] + d;
                sum_dx[ch] = sum_dx[ch] + d * xp[ch];
            }
        }
        let inv = &cache.inv_std[b * c..][..c];
        let out = &mut dx[off..][..hw * c];
        for ((o, dp), xp) in out.chunks_exact_mut(c).zip(dys.chunks_exact(c)).zip(xs.chunks_exact(c)) {
            for ch in 0..c {
                let d = dp[ch] * gamma[ch];
                o[ch] = inv[ch] / count * (count * d - sum_d[ch] - xp[ch] * sum_dx[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

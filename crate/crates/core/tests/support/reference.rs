//! Direct-loop implementations of every network primitive, written from
//! the layer definitions and sharing no code with the engine's kernels.

use cyclegan::models::{Discriminator, Generator};
use cyclegan::nn::{DownsampleBlock, UpsampleBlock};
use cyclegan::Tensor;

/// Plain NHWC image batch.
#[derive(Clone, Debug)]
pub struct Img {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Img {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let d = t.dims();
        Self { n: d[0], h: d[1], w: d[2], c: d[3], data: t.data().to_vec() }
    }

    pub fn at(&self, b: usize, y: usize, x: usize, ch: usize) -> f64 {
        self.data[((b * self.h + y) * self.w + x) * self.c + ch]
    }

    fn at_mut(&mut self, b: usize, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.data[((b * self.h + y) * self.w + x) * self.c + ch]
    }
}

/// Kernel element `[ky, kx, i, o]` of a rank-4 tensor.
fn k4(k: &Tensor<f64>, ky: usize, kx: usize, i: usize, o: usize) -> f64 {
    let d = k.dims();
    k.data()[((ky * d[1] + kx) * d[2] + i) * d[3] + o]
}

/// Leading pad for "same" padding along one axis.
pub fn same_pad(input: usize, k: usize, s: usize) -> (usize, usize) {
    let out = input.div_ceil(s);
    let total = ((out as isize - 1) * s as isize + k as isize - input as isize).max(0) as usize;
    (out, total / 2)
}

/// Direct convolution; `pad = None` means valid.
pub fn conv2d(x: &Img, kernel: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, same: bool) -> Img {
    let d = kernel.dims();
    let (kh, kw, cin, cout) = (d[0], d[1], d[2], d[3]);
    assert_eq!(cin, x.c);
    let ((oh, pt), (ow, pl)) = if same {
        (same_pad(x.h, kh, stride), same_pad(x.w, kw, stride))
    } else {
        (((x.h - kh) / stride + 1, 0), ((x.w - kw) / stride + 1, 0))
    };
    let mut out = Img::zeros(x.n, oh, ow, cout);
    for b in 0..x.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..cout {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            for i in 0..cin {
                                acc += x.at(b, iy as usize, ix as usize, i) * k4(kernel, ky, kx, i, o);
                            }
                        }
                    }
                    *out.at_mut(b, oy, ox, o) = acc;
                }
            }
        }
    }
    out
}

/// Direct scatter form of the same-padded transposed convolution with a
/// `[kh, kw, cout, cin]` kernel.
pub fn conv2d_transpose(y: &Img, kernel: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize) -> Img {
    let d = kernel.dims();
    let (kh, kw, cout, cin) = (d[0], d[1], d[2], d[3]);
    assert_eq!(cin, y.c);
    let (oh, ow) = (y.h * stride, y.w * stride);
    let pt = kh.saturating_sub(stride) / 2;
    let pl = kw.saturating_sub(stride) / 2;
    let mut out = Img::zeros(y.n, oh, ow, cout);
    for b in 0..y.n {
        for iy in 0..y.h {
            for ix in 0..y.w {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let oy = (iy * stride + ky) as isize - pt as isize;
                        let ox = (ix * stride + kx) as isize - pl as isize;
                        if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                            continue;
                        }
                        for o in 0..cout {
                            let mut acc = 0.0;
                            for i in 0..cin {
                                acc += y.at(b, iy, ix, i) * k4(kernel, ky, kx, o, i);
                            }
                            *out.at_mut(b, oy as usize, ox as usize, o) += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(bias) = bias {
        for (i, v) in out.data.iter_mut().enumerate() {
            *v += bias.data()[i % cout];
        }
    }
    out
}

pub fn instance_norm(x: &Img, gamma: &Tensor<f64>, beta: &Tensor<f64>, eps: f64) -> Img {
    let mut out = x.clone();
    let count = (x.h * x.w) as f64;
    for b in 0..x.n {
        for ch in 0..x.c {
            let mut mean = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    mean += x.at(b, y, xx, ch);
                }
            }
            mean /= count;
            let mut var = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    var += (x.at(b, y, xx, ch) - mean).powi(2);
                }
            }
            var /= count;
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = (x.at(b, y, xx, ch) - mean) / (var + eps).sqrt();
                    *out.at_mut(b, y, xx, ch) = gamma.data()[ch] * v + beta.data()[ch];
                }
            }
        }
    }
    out
}

pub fn leaky(x: &Img, alpha: f64) -> Img {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= alpha
        }
    });
    out
}

pub fn pad(x: &Img, p: usize) -> Img {
    let mut out = Img::zeros(x.n, x.h + 2 * p, x.w + 2 * p, x.c);
    for b in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                for ch in 0..x.c {
                    *out.at_mut(b, y + p, xx + p, ch) = x.at(b, y, xx, ch);
                }
            }
        }
    }
    out
}

pub fn concat(a: &Img, b: &Img) -> Img {
    let mut out = Img::zeros(a.n, a.h, a.w, a.c + b.c);
    for n in 0..a.n {
        for y in 0..a.h {
            for x in 0..a.w {
                for ch in 0..a.c {
                    *out.at_mut(n, y, x, ch) = a.at(n, y, x, ch);
                }
                for ch in 0..b.c {
                    *out.at_mut(n, y, x, a.c + ch) = b.at(n, y, x, ch);
                }
            }
        }
    }
    out
}

fn down_block(block: &DownsampleBlock<f64>, x: &Img) -> Img {
    let mut h = conv2d(x, &block.kernel, None, 2, true);
    if let Some(n) = &block.norm {
        h = instance_norm(&h, &n.gamma, &n.beta, n.eps);
    }
    leaky(&h, block.alpha)
}

/// Evaluation mode, so dropout is the identity.
fn up_block(block: &UpsampleBlock<f64>, x: &Img) -> Img {
    let h = conv2d_transpose(x, &block.kernel, None, 2);
    let h = instance_norm(&h, &block.norm.gamma, &block.norm.beta, block.norm.eps);
    leaky(&h, 0.0)
}

pub fn generator_forward(g: &Generator<f64>, x: &Img) -> Img {
    let mut skips = Vec::new();
    let mut h = x.clone();
    for block in &g.down {
        h = down_block(block, &h);
        skips.push(h.clone());
    }
    skips.pop();
    for block in &g.up {
        h = up_block(block, &h);
        h = concat(&h, &skips.pop().unwrap());
    }
    let mut out = conv2d_transpose(&h, &g.final_kernel, Some(&g.final_bias), 2);
    out.data.iter_mut().for_each(|v| *v = v.tanh());
    out
}

pub fn discriminator_forward(d: &Discriminator<f64>, x: &Img) -> Img {
    let mut h = x.clone();
    for block in &d.down {
        h = down_block(block, &h);
    }
    h = pad(&h, 1);
    h = conv2d(&h, &d.mid_kernel, None, 1, false);
    h = instance_norm(&h, &d.mid_norm.gamma, &d.mid_norm.beta, d.mid_norm.eps);
    h = leaky(&h, d.config.leaky_alpha);
    h = pad(&h, 1);
    conv2d(&h, &d.final_kernel, Some(&d.final_bias), 1, false)
}

/// Independent Adam: same update order as the textbook algorithm, one
/// scalar at a time.
pub struct RefAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub t: i32,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl RefAdam {
    pub fn new(n: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Self {
        Self { lr, b1, b2, eps, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn update(&mut self, theta: &mut [f64], g: &[f64]) {
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - self.b1.powi(self.t));
            let vh = self.v[i] / (1.0 - self.b2.powi(self.t));
            theta[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

//! Minimal dense layers with explicit forward/backward passes in `f64`.
//!
//! Layers own their parameters and accumulate gradients into
//! [`Param::grad`]; callers keep whatever activations the backward pass needs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A named, shaped parameter tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn normal<R: Rng>(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut p = Param::zeros(name, shape);
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("finite std");
            p.value.iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything holding parameters, visited in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }
}

/// Dense `channels x height x width` array, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3 {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor3 { c, h, w, data }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert!(self.same_shape(other));
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the forward output was clipped by ReLU.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    grad.iter_mut()
        .zip(output)
        .for_each(|(g, &o)| {
            if o <= 0.0 {
                *g = 0.0
            }
        });
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against a `{0, 1}` target, computed in a
/// numerically stable form. Returns `(loss, dloss/dlogit)`.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - target)
}

/// Smooth-L1 with unit transition point. Returns `(loss, dloss/dx)`.
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Square-kernel 2-D convolution with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Conv2d {
            weight: Param::normal(
                format!("{name}.weight"),
                &[out_ch, in_ch, kernel, kernel],
                std,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    /// He-normal initialization for a ReLU-followed convolution.
    pub fn he<R: Rng>(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Self::new(name, in_ch, out_ch, kernel, stride, (2.0 / fan_in).sqrt(), rng)
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    // valid output range along one axis for kernel offset k
    fn span(&self, k: usize, in_n: usize, out_n: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        let mut lo = 0isize;
        while lo < out_n as isize && lo * s + k - p < 0 {
            lo += 1;
        }
        let mut hi = out_n as isize;
        while hi > lo && (hi - 1) * s + k - p >= in_n as isize {
            hi -= 1;
        }
        (lo as usize, hi as usize)
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let mut out = Tensor3::zeros(self.out_ch, oh, ow);
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        for o in 0..self.out_ch {
            let plane = &mut out.data[o * oh * ow..(o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = self.bias.value[o]);
            for i in 0..self.in_ch {
                let inp = &x.data[i * x.h * x.w..(i + 1) * x.h * x.w];
                for ky in 0..k {
                    let (ylo, yhi) = self.span(ky, x.h, oh);
                    for kx in 0..k {
                        let wv = self.weight.value[((o * self.in_ch + i) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (xlo, xhi) = self.span(kx, x.w, ow);
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - p;
                            let row = &inp[iy * x.w..(iy + 1) * x.w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in xlo..xhi {
                                orow[ox] += wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
        let (oh, ow) = (grad_out.h, grad_out.w);
        let mut gin = Tensor3::zeros(x.c, x.h, x.w);
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        for o in 0..self.out_ch {
            let gplane = &grad_out.data[o * oh * ow..(o + 1) * oh * ow];
            self.bias.grad[o] += gplane.iter().sum::<f64>();
            for i in 0..self.in_ch {
                let inp = &x.data[i * x.h * x.w..(i + 1) * x.h * x.w];
                let ginp = &mut gin.data[i * x.h * x.w..(i + 1) * x.h * x.w];
                for ky in 0..k {
                    let (ylo, yhi) = self.span(ky, x.h, oh);
                    for kx in 0..k {
                        let widx = ((o * self.in_ch + i) * k + ky) * k + kx;
                        let wv = self.weight.value[widx];
                        let (xlo, xhi) = self.span(kx, x.w, ow);
                        let mut gw = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - p;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for ox in xlo..xhi {
                                let ix = iy * x.w + ox * s + kx - p;
                                gw += grow[ox] * inp[ix];
                                ginp[ix] += grow[ox] * wv;
                            }
                        }
                        self.weight.grad[widx] += gw;
                    }
                }
            }
        }
        gin
    }
}

/// Fully connected layer, `weight` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: Param::normal(format!("{name}.weight"), &[out_dim, in_dim], std, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn he<R: Rng>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self::new(name, in_dim, out_dim, (2.0 / in_dim as f64).sqrt(), rng)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim, "linear input width");
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight.value[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias.value[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let mut gin = vec![0.0; self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.bias.grad[o] += g;
            let base = o * self.in_dim;
            for i in 0..self.in_dim {
                self.weight.grad[base + i] += g * x[i];
                gin[i] += g * self.weight.value[base + i];
            }
        }
        gin
    }
}

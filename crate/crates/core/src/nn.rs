//! Minimal layers with hand-written backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::{Grid, Tensor};

/// 3x3 convolution with zero padding 1 and an optional ReLU.
///
/// Weights are `[out, 3 * 3 * in]`, taps ordered `(ky, kx, c_in)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

/// Activations kept by a conv forward pass for its backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out: Grid<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = 9 * in_c;
        Conv {
            weight: Tensor::randn(&[out_c, fan_in], (2.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[out_c]),
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            stride: self.stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    fn im2col(&self, x: &Grid<T>) -> (Vec<T>, usize, usize) {
        let (oh, ow) = self.out_size(x.h, x.w);
        let c = x.c;
        let k = 9 * c;
        let mut cols = vec![T::zero(); oh * ow * k];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * k;
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let dst = base + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(x.pixel(iy as usize, ix as usize));
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    pub fn forward(&self, x: &Grid<T>, relu: bool) -> (Grid<T>, ConvCache<T>) {
        let (cols, oh, ow) = self.im2col(x);
        let oc = self.out_channels();
        let k = 9 * x.c;
        let w = self.weight.data();
        let b = self.bias.data();
        let mut out = vec![T::zero(); oh * ow * oc];
        for p in 0..oh * ow {
            let col = &cols[p * k..(p + 1) * k];
            let row = &mut out[p * oc..(p + 1) * oc];
            for o in 0..oc {
                let v = b[o] + dot(col, &w[o * k..(o + 1) * k]);
                row[o] = if relu { v.max(T::zero()) } else { v };
            }
        }
        let out = Grid {
            h: oh,
            w: ow,
            c: oc,
            data: out,
        };
        let cache = ConvCache {
            cols,
            in_h: x.h,
            in_w: x.w,
            in_c: x.c,
            out: out.clone(),
        };
        (out, cache)
    }

    /// Backpropagates `d_out` (gradient w.r.t. the post-activation output).
    ///
    /// Parameter gradients are accumulated into `grads` when given; the input
    /// gradient is returned when `need_input` is set.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        d_out: &Grid<T>,
        relu: bool,
        grads: Option<&mut Conv<T>>,
        need_input: bool,
    ) -> Option<Grid<T>> {
        let oc = self.out_channels();
        let k = 9 * cache.in_c;
        let npix = cache.out.h * cache.out.w;
        let mut dz = d_out.data.clone();
        if relu {
            for (g, o) in dz.iter_mut().zip(&cache.out.data) {
                if *o <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        if let Some(g) = grads {
            let (gw, gb) = (g.weight.data_mut(), g.bias.data_mut());
            for p in 0..npix {
                let col = &cache.cols[p * k..(p + 1) * k];
                for o in 0..oc {
                    let d = dz[p * oc + o];
                    if d != T::zero() {
                        axpy(d, col, &mut gw[o * k..(o + 1) * k]);
                        gb[o] += d;
                    }
                }
            }
        }
        if !need_input {
            return None;
        }
        let w = self.weight.data();
        let (ow, c) = (cache.out.w, cache.in_c);
        let mut dx = Grid::zeros(cache.in_h, cache.in_w, c);
        let mut dcol = vec![T::zero(); k];
        for p in 0..npix {
            dcol.iter_mut().for_each(|v| *v = T::zero());
            let mut any = false;
            for o in 0..oc {
                let d = dz[p * oc + o];
                if d != T::zero() {
                    axpy(d, &w[o * k..(o + 1) * k], &mut dcol);
                    any = true;
                }
            }
            if !any {
                continue;
            }
            let (oy, ox) = (p / ow, p % ow);
            for ky in 0..3 {
                let iy = (oy * self.stride + ky) as isize - 1;
                if iy < 0 || iy >= cache.in_h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * self.stride + kx) as isize - 1;
                    if ix < 0 || ix >= cache.in_w as isize {
                        continue;
                    }
                    let src = (ky * 3 + kx) * c;
                    let dst = (iy as usize * cache.in_w + ix as usize) * c;
                    for ci in 0..c {
                        dx.data[dst + ci] += dcol[src + ci];
                    }
                }
            }
        }
        Some(dx)
    }
}

/// Fully connected layer, weights `[out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_f: usize, out_f: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[out_f, in_f], std, rng),
            bias: Tensor::zeros(&[out_f]),
        }
    }

    pub fn he<R: Rng + ?Sized>(in_f: usize, out_f: usize, rng: &mut R) -> Self {
        Self::new(in_f, out_f, (2.0 / in_f as f64).sqrt(), rng)
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x` holds `rows` inputs back to back.
    pub fn forward(&self, x: &[T], rows: usize, relu: bool) -> Vec<T> {
        let (i, o) = (self.in_features(), self.out_features());
        let w = self.weight.data();
        let b = self.bias.data();
        let mut y = vec![T::zero(); rows * o];
        for r in 0..rows {
            let xr = &x[r * i..(r + 1) * i];
            for j in 0..o {
                let v = b[j] + dot(xr, &w[j * i..(j + 1) * i]);
                y[r * o + j] = if relu { v.max(T::zero()) } else { v };
            }
        }
        y
    }

    /// `y` is the forward output, needed only to mask the ReLU.
    pub fn backward(
        &self,
        x: &[T],
        y: &[T],
        dy: &[T],
        rows: usize,
        relu: bool,
        grads: Option<&mut Linear<T>>,
        need_input: bool,
    ) -> Option<Vec<T>> {
        let (i, o) = (self.in_features(), self.out_features());
        let mut dz = dy.to_vec();
        if relu {
            for (g, v) in dz.iter_mut().zip(y) {
                if *v <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        if let Some(g) = grads {
            let (gw, gb) = (g.weight.data_mut(), g.bias.data_mut());
            for r in 0..rows {
                let xr = &x[r * i..(r + 1) * i];
                for j in 0..o {
                    let d = dz[r * o + j];
                    if d != T::zero() {
                        axpy(d, xr, &mut gw[j * i..(j + 1) * i]);
                        gb[j] += d;
                    }
                }
            }
        }
        if !need_input {
            return None;
        }
        let w = self.weight.data();
        let mut dx = vec![T::zero(); rows * i];
        for r in 0..rows {
            let dxr = &mut dx[r * i..(r + 1) * i];
            for j in 0..o {
                let d = dz[r * o + j];
                if d != T::zero() {
                    axpy(d, &w[j * i..(j + 1) * i], dxr);
                }
            }
        }
        Some(dx)
    }
}

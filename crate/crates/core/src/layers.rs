//! Forward and backward kernels for the layer types the networks use.
//!
//! All image tensors are NCHW. Strided convolutions use TensorFlow "same"
//! padding: the output side is `ceil(input / stride)` and the extra padding
//! row/column goes after the image. A transposed convolution is the exact
//! adjoint of the strided convolution with the same geometry, so both share
//! `im2col`/`col2im`.

use crate::tensor::{gemm, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;

/// Spatial geometry of a strided convolution between a "big" and a "small"
/// feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub big: (usize, usize),
    pub small: (usize, usize),
}

impl Geometry {
    pub fn same(big_h: usize, big_w: usize, kernel: usize, stride: usize) -> Self {
        let out = |n: usize| n.div_ceil(stride);
        let pad_total = |n: usize| ((out(n) - 1) * stride + kernel).saturating_sub(n);
        Self {
            kernel,
            stride,
            pad: pad_total(big_h) / 2,
            big: (big_h, big_w),
            small: (out(big_h), out(big_w)),
        }
    }

    fn big_len(&self) -> usize {
        self.big.0 * self.big.1
    }

    fn small_len(&self) -> usize {
        self.small.0 * self.small.1
    }

    fn rows(&self, channels: usize) -> usize {
        channels * self.kernel * self.kernel
    }

    /// Big-map coordinate sampled by small-map index `o` at kernel tap `t`.
    #[inline]
    fn source(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfolds `channels x big` into `(channels * k * k) x small`.
fn im2col(x: &[f64], channels: usize, g: &Geometry, col: &mut [f64]) {
    let (bh, bw) = g.big;
    let (sh, sw) = g.small;
    let k = g.kernel;
    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * bh * bw..(c + 1) * bh * bw];
        for kh in 0..k {
            for kw in 0..k {
                let dst = &mut col[row * sh * sw..(row + 1) * sh * sw];
                for oy in 0..sh {
                    let line = &mut dst[oy * sw..(oy + 1) * sw];
                    match g.source(oy, kh, bh) {
                        None => line.fill(0.0),
                        Some(iy) => {
                            let src = &plane[iy * bw..(iy + 1) * bw];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = g.source(ox, kw, bw).map_or(0.0, |ix| src[ix]);
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `channels x big`.
fn col2im(col: &[f64], channels: usize, g: &Geometry, x: &mut [f64]) {
    let (bh, bw) = g.big;
    let (sh, sw) = g.small;
    let k = g.kernel;
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut x[c * bh * bw..(c + 1) * bh * bw];
        for kh in 0..k {
            for kw in 0..k {
                let src = &col[row * sh * sw..(row + 1) * sh * sw];
                for oy in 0..sh {
                    if let Some(iy) = g.source(oy, kh, bh) {
                        let dst = &mut plane[iy * bw..(iy + 1) * bw];
                        for ox in 0..sw {
                            if let Some(ix) = g.source(ox, kw, bw) {
                                dst[ix] += src[oy * sw + ox];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Weight/bias gradients of one layer plus the input gradient when requested.
pub struct LayerGrads {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub input: Option<Tensor>,
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], plane: usize) {
    for (c, b) in bias.iter().enumerate() {
        for v in &mut y[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn channel_sums(dy: &Tensor, channels: usize) -> Tensor {
    let plane = dy.item_len() / channels;
    let mut out = Tensor::zeros(&[channels]);
    for n in 0..dy.batch() {
        let item = dy.item(n);
        for (c, acc) in out.data_mut().iter_mut().enumerate() {
            *acc += item[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
    }
    out
}

/// `y = x w^T + b` for `x: [N, in]`, `w: [out, in]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, fan_in) = (x.batch(), x.item_len());
    let fan_out = w.shape()[0];
    let mut y = Tensor::zeros(&[n, fan_out]);
    gemm(n, fan_in, fan_out, 1.0, x.data(), false, w.data(), true, 0.0, y.data_mut());
    if let Some(b) = b {
        for row in y.data_mut().chunks_mut(fan_out) {
            for (v, bias) in row.iter_mut().zip(b.data()) {
                *v += bias;
            }
        }
    }
    y
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor, has_bias: bool, need_input: bool) -> LayerGrads {
    let (n, fan_in) = (x.batch(), x.item_len());
    let fan_out = w.shape()[0];
    let mut dw = Tensor::zeros(w.shape());
    gemm(fan_out, n, fan_in, 1.0, dy.data(), true, x.data(), false, 0.0, dw.data_mut());
    let bias = has_bias.then(|| {
        let mut db = Tensor::zeros(&[fan_out]);
        for row in dy.data().chunks(fan_out) {
            for (acc, v) in db.data_mut().iter_mut().zip(row) {
                *acc += v;
            }
        }
        db
    });
    let input = need_input.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        gemm(n, fan_out, fan_in, 1.0, dy.data(), false, w.data(), false, 0.0, dx.data_mut());
        dx
    });
    LayerGrads { weight: dw, bias, input }
}

/// Strided convolution `x: [N, Cin, big]` -> `[N, Cout, small]` with
/// `w: [Cout, Cin, k, k]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &Geometry) -> Tensor {
    let n = x.batch();
    let (c_out, c_in) = (w.shape()[0], w.shape()[1]);
    let rows = g.rows(c_in);
    let mut col = vec![0.0; rows * g.small_len()];
    let mut y = Tensor::zeros(&[n, c_out, g.small.0, g.small.1]);
    for i in 0..n {
        im2col(x.item(i), c_in, g, &mut col);
        let out = y.item_mut(i);
        gemm(c_out, rows, g.small_len(), 1.0, w.data(), false, &col, false, 0.0, out);
        if let Some(b) = b {
            add_channel_bias(out, b.data(), g.small_len());
        }
    }
    y
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, g: &Geometry, has_bias: bool, need_input: bool) -> LayerGrads {
    let n = x.batch();
    let (c_out, c_in) = (w.shape()[0], w.shape()[1]);
    let rows = g.rows(c_in);
    let p = g.small_len();
    let mut col = vec![0.0; rows * p];
    let mut dcol = vec![0.0; rows * p];
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    for i in 0..n {
        im2col(x.item(i), c_in, g, &mut col);
        gemm(c_out, p, rows, 1.0, dy.item(i), false, &col, true, 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            gemm(rows, c_out, p, 1.0, w.data(), true, dy.item(i), false, 0.0, &mut dcol);
            col2im(&dcol, c_in, g, dx.item_mut(i));
        }
    }
    LayerGrads {
        weight: dw,
        bias: has_bias.then(|| channel_sums(dy, c_out)),
        input: dx,
    }
}

/// Transposed convolution `x: [N, Cs, small]` -> `[N, Cb, big]` with
/// `w: [Cs, Cb, k, k]`; the adjoint of [`conv2d_forward`].
pub fn conv_transpose_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: &Geometry) -> Tensor {
    let n = x.batch();
    let (c_small, c_big) = (w.shape()[0], w.shape()[1]);
    let rows = g.rows(c_big);
    let p = g.small_len();
    let mut col = vec![0.0; rows * p];
    let mut y = Tensor::zeros(&[n, c_big, g.big.0, g.big.1]);
    for i in 0..n {
        gemm(rows, c_small, p, 1.0, w.data(), true, x.item(i), false, 0.0, &mut col);
        let out = y.item_mut(i);
        col2im(&col, c_big, g, out);
        if let Some(b) = b {
            add_channel_bias(out, b.data(), g.big_len());
        }
    }
    y
}

pub fn conv_transpose_backward(x: &Tensor, w: &Tensor, dy: &Tensor, g: &Geometry, has_bias: bool, need_input: bool) -> LayerGrads {
    let n = x.batch();
    let (c_small, c_big) = (w.shape()[0], w.shape()[1]);
    let rows = g.rows(c_big);
    let p = g.small_len();
    let mut col = vec![0.0; rows * p];
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    for i in 0..n {
        im2col(dy.item(i), c_big, g, &mut col);
        gemm(c_small, p, rows, 1.0, x.item(i), false, &col, true, 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            gemm(c_small, rows, p, 1.0, w.data(), false, &col, false, 0.0, dx.item_mut(i));
        }
    }
    LayerGrads {
        weight: dw,
        bias: has_bias.then(|| channel_sums(dy, c_big)),
        input: dx,
    }
}

/// 1x1, stride-1 convolution with `w: [Cout, Cin]`.
pub fn pointwise_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, c_in) = (x.batch(), x.shape()[1]);
    let c_out = w.shape()[0];
    let plane = x.item_len() / c_in;
    let mut shape = x.shape().to_vec();
    shape[1] = c_out;
    let mut y = Tensor::zeros(&shape);
    for i in 0..n {
        let out = y.item_mut(i);
        gemm(c_out, c_in, plane, 1.0, w.data(), false, x.item(i), false, 0.0, out);
        if let Some(b) = b {
            add_channel_bias(out, b.data(), plane);
        }
    }
    y
}

pub fn pointwise_backward(x: &Tensor, w: &Tensor, dy: &Tensor, has_bias: bool, need_input: bool) -> LayerGrads {
    let (n, c_in) = (x.batch(), x.shape()[1]);
    let c_out = w.shape()[0];
    let plane = x.item_len() / c_in;
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    for i in 0..n {
        gemm(c_out, plane, c_in, 1.0, dy.item(i), false, x.item(i), true, 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            gemm(c_in, c_out, plane, 1.0, w.data(), true, dy.item(i), false, 0.0, dx.item_mut(i));
        }
    }
    LayerGrads {
        weight: dw,
        bias: has_bias.then(|| channel_sums(dy, c_out)),
        input: dx,
    }
}

/// Saved state of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Batch normalization over every axis except 1, using batch statistics.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, BnCache) {
    let n = x.batch();
    let channels = x.shape()[1];
    let plane = x.item_len() / channels;
    let count = n * plane;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for i in 0..n {
        let item = x.item(i);
        for c in 0..channels {
            mean[c] += item[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for i in 0..n {
        let item = x.item(i);
        for c in 0..channels {
            var[c] += item[c * plane..(c + 1) * plane]
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        let src = x.item(i);
        let xh = xhat.item_mut(i);
        for c in 0..channels {
            for j in c * plane..(c + 1) * plane {
                xh[j] = (src[j] - mean[c]) * inv_std[c];
            }
        }
        let xh = xhat.item(i);
        let out = y.item_mut(i);
        for c in 0..channels {
            let (gm, bt) = (gamma.data()[c], beta.data()[c]);
            for j in c * plane..(c + 1) * plane {
                out[j] = gm * xh[j] + bt;
            }
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        mean,
        var,
        count,
    };
    (y, cache)
}

pub fn batch_norm_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &Tensor, var: &Tensor) -> Tensor {
    let channels = x.shape()[1];
    let plane = x.item_len() / channels;
    let mut y = x.clone();
    for i in 0..x.batch() {
        let out = y.item_mut(i);
        for c in 0..channels {
            let scale = gamma.data()[c] / (var.data()[c] + BN_EPS).sqrt();
            let shift = beta.data()[c] - mean.data()[c] * scale;
            for v in &mut out[c * plane..(c + 1) * plane] {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(cache: &BnCache, gamma: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = dy.batch();
    let channels = dy.shape()[1];
    let plane = dy.item_len() / channels;
    let m = cache.count as f64;
    let mut dgamma = Tensor::zeros(&[channels]);
    let mut dbeta = Tensor::zeros(&[channels]);
    for i in 0..n {
        let (g, xh) = (dy.item(i), cache.xhat.item(i));
        for c in 0..channels {
            for j in c * plane..(c + 1) * plane {
                dgamma.data_mut()[c] += g[j] * xh[j];
                dbeta.data_mut()[c] += g[j];
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for i in 0..n {
        let (g, xh) = (dy.item(i), cache.xhat.item(i));
        let out = dx.item_mut(i);
        for c in 0..channels {
            let gm = gamma.data()[c];
            let k = gm * cache.inv_std[c] / m;
            let (sum_dy, sum_dy_xh) = (dbeta.data()[c], dgamma.data()[c]);
            for j in c * plane..(c + 1) * plane {
                out[j] = k * (m * g[j] - sum_dy - xh[j] * sum_dy_xh);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

pub fn leaky_relu_inplace(x: &mut Tensor) {
    x.data_mut()
        .iter_mut()
        .for_each(|v| *v = if *v > 0.0 { *v } else { LEAKY_SLOPE * *v });
}

pub fn tanh_inplace(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.tanh());
}

/// Gradient through ReLU or leaky ReLU, given the activation output.
pub fn rectifier_backward(out: &Tensor, dy: &mut Tensor, slope: f64) {
    for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *g *= slope;
        }
    }
}

pub fn tanh_backward(out: &Tensor, dy: &mut Tensor) {
    for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        *g *= 1.0 - o * o;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn same_geometry_matches_tensorflow() {
        let g = Geometry::same(16, 16, 5, 2);
        assert_eq!(g.small, (8, 8));
        assert_eq!(g.pad, 1);
        let g = Geometry::same(7, 7, 5, 2);
        assert_eq!(g.small, (4, 4));
        assert_eq!(g.pad, 2);
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Geometry::same(8, 8, 5, 2);
        let w = Tensor::randn(&[4, 3, 5, 5], 1.0, &mut rng);
        let big = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let small = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
        let lhs = dot(&conv2d_forward(&big, &w, None, &g), &small);
        let rhs = dot(&big, &conv_transpose_forward(&small, &w, None, &g));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Geometry::same(6, 6, 5, 2);
        let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 5, 5], 1.0, &mut rng);
        let y = conv2d_forward(&x, &w, None, &g);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for kh in 0..5 {
                            for kw in 0..5 {
                                let iy = (oy * 2 + kh) as isize - g.pad as isize;
                                let ix = (ox * 2 + kw) as isize - g.pad as isize;
                                if (0..6).contains(&iy) && (0..6).contains(&ix) {
                                    acc += w.data()[((co * 2 + ci) * 5 + kh) * 5 + kw]
                                        * x.data()[(ci * 6 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[(co * 3 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_norm_train_normalizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[4, 2, 3, 3], 3.0, &mut rng);
        let (y, _) = batch_norm_train(&x, &Tensor::filled(&[2], 1.0), &Tensor::zeros(&[2]));
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.item(n)[c * 9..(c + 1) * 9].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}

//! Layer kernels with hand-written backward passes.
//!
//! Every layer keeps its own gradient buffers; `backward` accumulates into them
//! only when asked to, so frozen networks can still propagate input gradients.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::gemm::gemm;
use crate::tensor::{from_channel_major, to_channel_major, Tensor};

/// How batch normalization picks its statistics on a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Normalize with the running statistics (evaluation).
    Running,
    /// Normalize with the batch statistics, leave running statistics alone.
    Batch,
    /// Normalize with the batch statistics and fold them into the running statistics.
    BatchUpdate,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::Running)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out_channels x (in_channels * kernel * kernel)`
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    #[serde(skip)]
    pub grad_weight: Vec<f32>,
    #[serde(skip)]
    pub grad_bias: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f32>,
    in_shape: [usize; 4],
}

impl Conv2d {
    /// Kaiming-normal (fan-out) initialization without bias.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_out = (out_channels * kernel * kernel) as f32;
        let normal = Normal::new(0.0f32, libm::sqrtf(2.0 / fan_out)).expect("positive std");
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| normal.sample(rng))
            .collect();
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: None,
            grad_weight: Vec::new(),
            grad_bias: Vec::new(),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward(&self, x: &Tensor, keep: bool) -> (Tensor, Option<ConvCache>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        let cols_n = n * oh * ow;
        let cols = if self.is_pointwise() {
            to_channel_major(x)
        } else {
            im2col(x, self.kernel, self.stride, self.padding, oh, ow)
        };
        let mut out = vec![0.0; self.out_channels * cols_n];
        gemm(
            self.out_channels,
            self.patch_len(),
            cols_n,
            &self.weight,
            false,
            &cols,
            false,
            0.0,
            &mut out,
        );
        if let Some(bias) = &self.bias {
            for (row, b) in out.chunks_mut(cols_n).zip(bias) {
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        let y = from_channel_major(&out, [n, self.out_channels, oh, ow]);
        let cache = keep.then(|| ConvCache {
            cols,
            in_shape: x.shape(),
        });
        (y, cache)
    }

    /// Returns the input gradient; accumulates parameter gradients when `param_grads`.
    pub fn backward(&mut self, cache: &ConvCache, grad_out: &Tensor, param_grads: bool) -> Tensor {
        let [n, _, h, w] = cache.in_shape;
        let (oh, ow) = self.output_hw(h, w);
        let cols_n = n * oh * ow;
        let k = self.patch_len();
        let g = to_channel_major(grad_out);
        if param_grads {
            if self.grad_weight.len() != self.weight.len() {
                self.grad_weight = vec![0.0; self.weight.len()];
            }
            gemm(
                self.out_channels,
                cols_n,
                k,
                &g,
                false,
                &cache.cols,
                true,
                1.0,
                &mut self.grad_weight,
            );
            if let Some(bias) = &self.bias {
                if self.grad_bias.len() != bias.len() {
                    self.grad_bias = vec![0.0; bias.len()];
                }
                for (gb, row) in self.grad_bias.iter_mut().zip(g.chunks(cols_n)) {
                    *gb += row.iter().sum::<f32>();
                }
            }
        }
        let mut dcols = vec![0.0; k * cols_n];
        gemm(
            k,
            self.out_channels,
            cols_n,
            &self.weight,
            true,
            &g,
            false,
            0.0,
            &mut dcols,
        );
        if self.is_pointwise() {
            from_channel_major(&dcols, cache.in_shape)
        } else {
            col2im(&dcols, cache.in_shape, self.kernel, self.stride, self.padding, oh, ow)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.iter_mut().for_each(|g| *g = 0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` is in bounds.
fn valid_range(out: usize, inp: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ox * stride + k_off >= pad  and  ox * stride + k_off < inp + pad
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let hi = if inp + pad > k_off {
        ((inp + pad - k_off - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f32> {
    let [n, c, h, w] = x.shape();
    let cols_n = n * oh * ow;
    let mut cols = vec![0.0; c * k * k * cols_n];
    let src = x.data();
    for ci in 0..c {
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(oh, h, ky, stride, pad);
            for kx in 0..k {
                let (x_lo, x_hi) = valid_range(ow, w, kx, stride, pad);
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for s in 0..n {
                    let plane = &src[(s * c + ci) * h * w..(s * c + ci + 1) * h * w];
                    for oy in y_lo..y_hi {
                        let iy = oy * stride + ky - pad;
                        let line = &plane[iy * w..(iy + 1) * w];
                        let base = (s * oh + oy) * ow;
                        let ix0 = x_lo * stride + kx - pad;
                        if stride == 1 {
                            dst[base + x_lo..base + x_hi].copy_from_slice(&line[ix0..ix0 + (x_hi - x_lo)]);
                        } else {
                            for (o, d) in dst[base + x_lo..base + x_hi].iter_mut().enumerate() {
                                *d = line[ix0 + o * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &[f32],
    shape: [usize; 4],
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let [n, c, h, w] = shape;
    let cols_n = n * oh * ow;
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    for ci in 0..c {
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(oh, h, ky, stride, pad);
            for kx in 0..k {
                let (x_lo, x_hi) = valid_range(ow, w, kx, stride, pad);
                let row = (ci * k + ky) * k + kx;
                let src = &dcols[row * cols_n..(row + 1) * cols_n];
                for s in 0..n {
                    let plane = &mut dst[(s * c + ci) * h * w..(s * c + ci + 1) * h * w];
                    for oy in y_lo..y_hi {
                        let iy = oy * stride + ky - pad;
                        let line = &mut plane[iy * w..(iy + 1) * w];
                        let base = (s * oh + oy) * ow;
                        let ix0 = x_lo * stride + kx - pad;
                        for (o, &v) in src[base + x_lo..base + x_hi].iter().enumerate() {
                            line[ix0 + o * stride] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    #[serde(skip)]
    pub grad_gamma: Vec<f32>,
    #[serde(skip)]
    pub grad_beta: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize, momentum: f32) -> Self {
        BatchNorm2d {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps: 1e-5,
            grad_gamma: Vec::new(),
            grad_beta: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode, keep: bool) -> (Tensor, Option<BnCache>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels, "batch norm channels");
        let plane = h * w;
        let count = (n * plane) as f64;
        let src = x.data();
        let mut mean = vec![0.0f32; c];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            if mode.uses_batch_stats() {
                let mut s = 0.0f64;
                let mut sq = 0.0f64;
                for smp in 0..n {
                    for &v in &src[(smp * c + ch) * plane..(smp * c + ch + 1) * plane] {
                        s += v as f64;
                        sq += (v as f64) * (v as f64);
                    }
                }
                let m = s / count;
                let var = (sq / count - m * m).max(0.0);
                mean[ch] = m as f32;
                inv_std[ch] = (1.0 / libm::sqrt(var + self.eps as f64)) as f32;
                if mode == BnMode::BatchUpdate {
                    let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                    let mo = self.momentum;
                    self.running_mean[ch] = (1.0 - mo) * self.running_mean[ch] + mo * m as f32;
                    self.running_var[ch] = (1.0 - mo) * self.running_var[ch] + mo * unbiased as f32;
                }
            } else {
                mean[ch] = self.running_mean[ch];
                inv_std[ch] = 1.0 / libm::sqrtf(self.running_var[ch] + self.eps);
            }
        }
        let mut y = Tensor::zeros(x.shape());
        let mut xhat = if keep { vec![0.0; x.len()] } else { Vec::new() };
        {
            let dst = y.data_mut();
            for smp in 0..n {
                for ch in 0..c {
                    let range = (smp * c + ch) * plane..(smp * c + ch + 1) * plane;
                    let (m, is, g, b) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
                    for idx in range {
                        let xh = (src[idx] - m) * is;
                        dst[idx] = g * xh + b;
                        if keep {
                            xhat[idx] = xh;
                        }
                    }
                }
            }
        }
        let cache = keep.then_some(BnCache {
            xhat,
            inv_std,
            batch_stats: mode.uses_batch_stats(),
        });
        (y, cache)
    }

    pub fn backward(&mut self, cache: &BnCache, grad_out: &Tensor, param_grads: bool) -> Tensor {
        let [n, c, h, w] = grad_out.shape();
        let plane = h * w;
        let count = (n * plane) as f64;
        let dy = grad_out.data();
        if param_grads && self.grad_gamma.len() != c {
            self.grad_gamma = vec![0.0; c];
            self.grad_beta = vec![0.0; c];
        }
        let mut dx = Tensor::zeros(grad_out.shape());
        let out = dx.data_mut();
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for smp in 0..n {
                let range = (smp * c + ch) * plane..(smp * c + ch + 1) * plane;
                for idx in range {
                    sum_dy += dy[idx] as f64;
                    sum_dy_xhat += (dy[idx] * cache.xhat[idx]) as f64;
                }
            }
            if param_grads {
                self.grad_gamma[ch] += sum_dy_xhat as f32;
                self.grad_beta[ch] += sum_dy as f32;
            }
            let g = self.gamma[ch];
            let is = cache.inv_std[ch];
            if cache.batch_stats {
                let mean_dy = (sum_dy / count) as f32;
                let mean_dy_xhat = (sum_dy_xhat / count) as f32;
                for smp in 0..n {
                    let range = (smp * c + ch) * plane..(smp * c + ch + 1) * plane;
                    for idx in range {
                        out[idx] = g * is * (dy[idx] - mean_dy - cache.xhat[idx] * mean_dy_xhat);
                    }
                }
            } else {
                for smp in 0..n {
                    let range = (smp * c + ch) * plane..(smp * c + ch + 1) * plane;
                    for idx in range {
                        out[idx] = g * is * dy[idx];
                    }
                }
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.iter_mut().for_each(|g| *g = 0.0);
        self.grad_beta.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `out_features x in_features`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    #[serde(skip)]
    pub grad_weight: Vec<f32>,
    #[serde(skip)]
    pub grad_bias: Vec<f32>,
}

impl Linear {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization for weight and bias.
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / libm::sqrtf(in_features as f32);
        let uni = Uniform::new(-bound, bound).expect("valid bound");
        Linear {
            in_features,
            out_features,
            weight: (0..in_features * out_features).map(|_| uni.sample(rng)).collect(),
            bias: (0..out_features).map(|_| uni.sample(rng)).collect(),
            grad_weight: Vec::new(),
            grad_bias: Vec::new(),
        }
    }

    /// `x` is `(batch, in_features, 1, 1)`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.batch();
        assert_eq!(x.sample_len(), self.in_features, "linear input features");
        let mut out = vec![0.0; n * self.out_features];
        for row in out.chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias);
        }
        gemm(
            n,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            &self.weight,
            true,
            1.0,
            &mut out,
        );
        Tensor::from_vec([n, self.out_features, 1, 1], out).expect("sized")
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor, param_grads: bool) -> Tensor {
        let n = x.batch();
        if param_grads {
            if self.grad_weight.len() != self.weight.len() {
                self.grad_weight = vec![0.0; self.weight.len()];
                self.grad_bias = vec![0.0; self.bias.len()];
            }
            gemm(
                self.out_features,
                n,
                self.in_features,
                grad_out.data(),
                true,
                x.data(),
                false,
                1.0,
                &mut self.grad_weight,
            );
            for row in grad_out.data().chunks(self.out_features) {
                for (gb, g) in self.grad_bias.iter_mut().zip(row) {
                    *gb += g;
                }
            }
        }
        let mut dx = vec![0.0; n * self.in_features];
        gemm(
            n,
            self.out_features,
            self.in_features,
            grad_out.data(),
            false,
            &self.weight,
            false,
            0.0,
            &mut dx,
        );
        Tensor::from_vec([n, self.in_features, 1, 1], dx).expect("sized")
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.iter_mut().for_each(|g| *g = 0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    x.map_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Masks `grad` where the ReLU output was not positive.
pub fn relu_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f32>() / plane as f32)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data).expect("sized")
}

pub fn global_avg_pool_backward(grad: &Tensor, in_shape: [usize; 4]) -> Tensor {
    let plane = in_shape[2] * in_shape[3];
    let mut out = Tensor::zeros(in_shape);
    for (dst, &g) in out.data_mut().chunks_mut(plane).zip(grad.data()) {
        dst.iter_mut().for_each(|v| *v = g / plane as f32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let data = (0..shape.iter().product()).map(|_| normal.sample(rng)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn direct_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = conv.output_hw(h, w);
        let k = conv.kernel;
        let mut y = Tensor::zeros([n, conv.out_channels, oh, ow]);
        for s in 0..n {
            for co in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[co]);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight[((co * c + ci) * k + ky) * k + kx]
                                            * x[[s, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[s, co, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let mut conv = Conv2d::new(3, 4, k, s, p, &mut rng);
            conv.bias = Some(vec![0.1, -0.2, 0.3, 0.0]);
            let x = random_tensor([2, 3, 5, 5], &mut rng);
            let (y, _) = conv.forward(&x, false);
            assert!(y.max_abs_diff(&direct_conv(&conv, &x)) < 1e-5);
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, conv^T(g)> for a bias-free conv
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::new(3, 5, 3, 2, 1, &mut rng);
        let x = random_tensor([2, 3, 6, 6], &mut rng);
        let (y, cache) = conv.forward(&x, true);
        let g = random_tensor(y.shape(), &mut rng);
        let dx = conv.backward(&cache.unwrap(), &g, true);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
        // weight gradient: <dW, W> equals <y, g> for a linear map without bias
        let wg: f64 = conv.grad_weight.iter().zip(&conv.weight).map(|(a, b)| (a * b) as f64).sum();
        assert!((wg - lhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn batch_norm_running_stats_follow_ema() {
        let mut bn = BatchNorm2d::new(1, 0.1);
        let x = Tensor::from_vec([4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward(&x, BnMode::BatchUpdate, false);
        // mean 2.5, unbiased variance 5/3
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-6);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
        let before = bn.clone();
        bn.forward(&x, BnMode::Batch, false);
        bn.forward(&x, BnMode::Running, false);
        assert_eq!(before.running_mean, bn.running_mean);
        assert_eq!(before.running_var, bn.running_var);
    }

    #[test]
    fn batch_norm_batch_mode_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bn = BatchNorm2d::new(2, 0.1);
        bn.gamma = vec![1.3, 0.7];
        bn.beta = vec![0.2, -0.1];
        let x = random_tensor([3, 2, 2, 2], &mut rng);
        let w = random_tensor(x.shape(), &mut rng);
        let objective = |bn: &mut BatchNorm2d, x: &Tensor| -> f64 {
            let (y, _) = bn.forward(x, BnMode::Batch, false);
            y.data().iter().zip(w.data()).map(|(a, b)| (a * b) as f64).sum()
        };
        let (_, cache) = bn.forward(&x, BnMode::Batch, true);
        let dx = bn.backward(&cache.unwrap(), &w, false);
        let h = 1e-2f32;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (objective(&mut bn, &xp) - objective(&mut bn, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.data()[idx] as f64).abs() < 2e-3, "idx {idx}: {fd} vs {}", dx.data()[idx]);
        }
    }

    #[test]
    fn linear_backward_matches_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x = random_tensor([2, 4, 1, 1], &mut rng);
        let g = random_tensor([2, 3, 1, 1], &mut rng);
        let dx = lin.backward(&x, &g, true);
        for s in 0..2 {
            for i in 0..4 {
                let want: f32 = (0..3).map(|o| g.data()[s * 3 + o] * lin.weight[o * 4 + i]).sum();
                assert!((dx.data()[s * 4 + i] - want).abs() < 1e-6);
            }
        }
        assert_eq!(lin.grad_bias.len(), 3);
    }
}

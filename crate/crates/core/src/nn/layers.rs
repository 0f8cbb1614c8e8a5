//! Convolution, batch normalization and linear layers with explicit
//! backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// How normalization layers obtain their statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with the stored running statistics.
    Running,
}

/// 3x3 convolution, zero padding 1, no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `out x in x 3 x 3`
    pub weight: Vec<f64>,
}

pub const KERNEL: usize = 3;
const PAD: isize = 1;

impl Conv2d {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        // He initialization for ReLU networks.
        let fan_in = (in_channels * KERNEL * KERNEL) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = (0..out_channels * in_channels * KERNEL * KERNEL)
            .map(|_| normal.sample(rng))
            .collect();
        Self {
            in_channels,
            out_channels,
            stride,
            weight,
        }
    }

    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * PAD as usize - KERNEL) / self.stride + 1
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, KERNEL, KERNEL]
    }

    /// Output rows `oy` whose receptive field row `oy * stride + k - 1` lies
    /// inside `[0, size)`.
    #[inline]
    fn valid_range(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - PAD;
        // oy*s + off >= 0  and  oy*s + off <= size - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((size as isize - 1 - off).div_euclid(s) + 1).clamp(0, out as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        let (ho, wo) = (self.output_size(input.h), self.output_size(input.w));
        let mut out = Tensor::zeros(input.n, self.out_channels, ho, wo);
        let s = self.stride;
        for n in 0..input.n {
            let x = input.sample(n);
            let y = out.sample_mut(n);
            for o in 0..self.out_channels {
                let yplane = &mut y[o * ho * wo..(o + 1) * ho * wo];
                for c in 0..self.in_channels {
                    let xplane = &x[c * input.h * input.w..(c + 1) * input.h * input.w];
                    for ky in 0..KERNEL {
                        let (oy0, oy1) = self.valid_range(ky, input.h, ho);
                        for kx in 0..KERNEL {
                            let wv = self.weight[((o * self.in_channels + c) * KERNEL + ky) * KERNEL + kx];
                            let (ox0, ox1) = self.valid_range(kx, input.w, wo);
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - 1;
                                let xrow = &xplane[iy * input.w..(iy + 1) * input.w];
                                let yrow = &mut yplane[oy * wo..(oy + 1) * wo];
                                for ox in ox0..ox1 {
                                    yrow[ox] += wv * xrow[ox * s + kx - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the weight gradient and, when requested, the input gradient.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor, need_input: bool) -> (Vec<f64>, Option<Tensor>) {
        let (ho, wo) = (grad_out.h, grad_out.w);
        let s = self.stride;
        let mut gw = vec![0.0; self.weight.len()];
        let mut gin = need_input.then(|| Tensor::zeros(input.n, input.c, input.h, input.w));
        let plane_in = input.h * input.w;
        for n in 0..input.n {
            let x = input.sample(n);
            let g = grad_out.sample(n);
            for o in 0..self.out_channels {
                let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
                for c in 0..self.in_channels {
                    let xplane = &x[c * plane_in..(c + 1) * plane_in];
                    for ky in 0..KERNEL {
                        let (oy0, oy1) = self.valid_range(ky, input.h, ho);
                        for kx in 0..KERNEL {
                            let widx = ((o * self.in_channels + c) * KERNEL + ky) * KERNEL + kx;
                            let (ox0, ox1) = self.valid_range(kx, input.w, wo);
                            let mut acc = 0.0;
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky - 1;
                                let xrow = &xplane[iy * input.w..(iy + 1) * input.w];
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * xrow[ox * s + kx - 1];
                                }
                            }
                            gw[widx] += acc;
                            if let Some(gin) = gin.as_mut() {
                                let wv = self.weight[widx];
                                let gi = gin.sample_mut(n);
                                let giplane = &mut gi[c * plane_in..(c + 1) * plane_in];
                                for oy in oy0..oy1 {
                                    let iy = oy * s + ky - 1;
                                    let grow = &gplane[oy * wo..(oy + 1) * wo];
                                    let girow = &mut giplane[iy * input.w..(iy + 1) * input.w];
                                    for ox in ox0..ox1 {
                                        girow[ox * s + kx - 1] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (gw, gin)
    }
}

/// Per-channel batch normalization with an affine transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Values kept from a normalization forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub mode: NormMode,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Biased batch variance.
    pub batch_var: Vec<f64>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, input: &Tensor, mode: NormMode) -> (Tensor, NormCache) {
        let hw = input.plane_len();
        let count = input.n * hw;
        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        for n in 0..input.n {
            let x = input.sample(n);
            for c in 0..self.channels {
                mean[c] += x[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for n in 0..input.n {
            let x = input.sample(n);
            for c in 0..self.channels {
                var[c] += x[c * hw..(c + 1) * hw]
                    .iter()
                    .map(|v| (v - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count as f64;
        }
        let (use_mean, use_var) = match mode {
            NormMode::Batch => (&mean, &var),
            NormMode::Running => (&self.running_mean, &self.running_var),
        };
        let inv_std: Vec<f64> = use_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = input.clone();
        let mut out = input.clone();
        for n in 0..input.n {
            let xs = xhat.sample_mut(n);
            for c in 0..self.channels {
                for v in &mut xs[c * hw..(c + 1) * hw] {
                    *v = (*v - use_mean[c]) * inv_std[c];
                }
            }
            let src = xhat.sample(n).to_vec();
            let ys = out.sample_mut(n);
            for c in 0..self.channels {
                for (y, xh) in ys[c * hw..(c + 1) * hw].iter_mut().zip(&src[c * hw..(c + 1) * hw]) {
                    *y = self.gamma[c] * xh + self.beta[c];
                }
            }
        }
        (
            out,
            NormCache {
                mode,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                count,
            },
        )
    }

    /// Folds a batch's statistics into the running estimates.
    pub fn absorb(&mut self, cache: &NormCache) {
        let unbias = if cache.count > 1 {
            cache.count as f64 / (cache.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels {
            self.running_mean[c] =
                (1.0 - self.momentum) * self.running_mean[c] + self.momentum * cache.batch_mean[c];
            self.running_var[c] =
                (1.0 - self.momentum) * self.running_var[c] + self.momentum * cache.batch_var[c] * unbias;
        }
    }

    /// Returns `(d_input, d_gamma, d_beta)`.
    pub fn backward(&self, cache: &NormCache, grad_out: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let hw = grad_out.plane_len();
        let mut dgamma = vec![0.0; self.channels];
        let mut dbeta = vec![0.0; self.channels];
        for n in 0..grad_out.n {
            let g = grad_out.sample(n);
            let xh = cache.xhat.sample(n);
            for c in 0..self.channels {
                let r = c * hw..(c + 1) * hw;
                dbeta[c] += g[r.clone()].iter().sum::<f64>();
                dgamma[c] += g[r.clone()].iter().zip(&xh[r]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let mut din = grad_out.clone();
        match cache.mode {
            NormMode::Running => {
                for n in 0..din.n {
                    let d = din.sample_mut(n);
                    for c in 0..self.channels {
                        let k = self.gamma[c] * cache.inv_std[c];
                        for v in &mut d[c * hw..(c + 1) * hw] {
                            *v *= k;
                        }
                    }
                }
            }
            NormMode::Batch => {
                // dxhat = g * gamma; sum(dxhat) = gamma * dbeta; sum(dxhat * xhat) = gamma * dgamma
                let m = cache.count as f64;
                for n in 0..din.n {
                    let xh = cache.xhat.sample(n);
                    let d = din.sample_mut(n);
                    for c in 0..self.channels {
                        let k = self.gamma[c] * cache.inv_std[c] / m;
                        let sum_g = dbeta[c];
                        let sum_gx = dgamma[c];
                        for (v, x) in d[c * hw..(c + 1) * hw].iter_mut().zip(&xh[c * hw..(c + 1) * hw]) {
                            *v = k * (m * *v - sum_g - x * sum_gx);
                        }
                    }
                }
            }
        }
        (din, dgamma, dbeta)
    }
}

/// Fully connected layer, `out = W z + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|k| {
                let row = &self.weight[k * self.in_dim..(k + 1) * self.in_dim];
                self.bias[k] + row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Gradient w.r.t. the input only.
    pub fn backward_input(&self, grad_out: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.in_dim];
        for (k, go) in grad_out.iter().enumerate() {
            let row = &self.weight[k * self.in_dim..(k + 1) * self.in_dim];
            for (gi, w) in g.iter_mut().zip(row) {
                *gi += go * w;
            }
        }
        g
    }

    /// Gradients w.r.t. weight and bias for a batch of inputs.
    pub fn backward_params(&self, inputs: &[Vec<f64>], grad_out: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.out_dim];
        for (z, go) in inputs.iter().zip(grad_out) {
            for k in 0..self.out_dim {
                gb[k] += go[k];
                for (d, zv) in z.iter().enumerate() {
                    gw[k * self.in_dim + d] += go[k] * zv;
                }
            }
        }
        (gw, gb)
    }
}

//! The split classifier `f = h ∘ g`: a small convolutional encoder `g`
//! followed by a linear classifier head `h`.
//!
//! Each encoder block is `conv3x3 -> batch norm -> ReLU`; the encoder output
//! is the global average pool of the last block. The post-activation output
//! of every block is exposed as an "internal layer" so that callers can
//! regularize its per-channel mean.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, Linear, NormCache, NormMode};
use crate::error::{Error, Result};
use crate::tensor::{softmax, softmax_backward, Tensor};

/// Network shape. Stored in checkpoints and checked on load.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub block_channels: Vec<usize>,
    pub block_strides: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    /// Three stride-2 blocks on 32x32 RGB inputs.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            height: 32,
            width: 32,
            block_channels: vec![12, 24, 48],
            block_strides: vec![2, 2, 2],
            num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.block_channels.last().unwrap_or(&self.in_channels)
    }

    pub fn num_blocks(&self) -> usize {
        self.block_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() || self.block_channels.len() != self.block_strides.len() {
            return Err(Error::Config(
                "architecture needs at least one block and one stride per block".into(),
            ));
        }
        if self.num_classes < 2 || self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("architecture has a zero-sized dimension".into()));
        }
        if self.block_strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("block stride must be positive".into()));
        }
        Ok(())
    }
}

/// One encoder block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
}

/// Which encoder parameters an optimizer is allowed to touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Every encoder parameter (conv weights and norm affine).
    Encoder,
    /// Only the normalization scale and shift.
    NormAffine,
}

/// Encoder parameter gradients, one entry per block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads {
    pub conv: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads {
    pub blocks: Vec<BlockGrads>,
}

impl EncoderGrads {
    pub fn zeros_like(model: &SplitModel) -> Self {
        Self {
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    conv: vec![0.0; b.conv.weight.len()],
                    gamma: vec![0.0; b.norm.channels],
                    beta: vec![0.0; b.norm.channels],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.conv.iter_mut().zip(&b.conv) {
                *x += y;
            }
            for (x, y) in a.gamma.iter_mut().zip(&b.gamma) {
                *x += y;
            }
            for (x, y) in a.beta.iter_mut().zip(&b.beta) {
                *x += y;
            }
        }
    }

    /// Flattened in the order of [`SplitModel::params_mut`].
    pub fn flat(&self, group: ParamGroup) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for b in &self.blocks {
            if group == ParamGroup::Encoder {
                out.push(b.conv.as_slice());
            }
            out.push(b.gamma.as_slice());
            out.push(b.beta.as_slice());
        }
        out
    }
}

/// Requested forward outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputMode {
    Features,
    Probs,
    Both,
}

/// Output of [`SplitModel::forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub features: Option<Vec<Vec<f64>>>,
    pub probs: Option<Vec<Vec<f64>>>,
}

/// Everything a backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Tensor,
    pub blocks: Vec<BlockCache>,
    /// `B x D` encoder outputs.
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    pub conv_in: Tensor,
    pub norm: NormCache,
    /// Post-ReLU block output.
    pub output: Tensor,
}

impl ForwardCache {
    /// Per-sample channel means of each block's output: `[block][sample][channel]`.
    pub fn block_means(&self) -> Vec<Vec<Vec<f64>>> {
        self.blocks.iter().map(|b| b.output.channel_means()).collect()
    }
}

/// Gradient seeds for a backward pass. Every field is optional; missing
/// seeds contribute nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct Seeds<'a> {
    pub logits: Option<&'a [Vec<f64>]>,
    pub probs: Option<&'a [Vec<f64>]>,
    pub features: Option<&'a [Vec<f64>]>,
    /// `[block][sample][channel]` gradients on the per-channel block means.
    pub block_means: Option<&'a [Vec<Vec<f64>>]>,
}

/// Encoder `g` plus classifier head `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitModel {
    pub arch: Architecture,
    pub blocks: Vec<ConvBlock>,
    pub head: Linear,
}

impl SplitModel {
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut blocks = Vec::with_capacity(arch.num_blocks());
        let mut in_ch = arch.in_channels;
        for (&out_ch, &stride) in arch.block_channels.iter().zip(&arch.block_strides) {
            blocks.push(ConvBlock {
                conv: Conv2d::new(in_ch, out_ch, stride, rng),
                norm: BatchNorm2d::new(out_ch),
            });
            in_ch = out_ch;
        }
        let head = Linear::new(arch.feature_dim(), arch.num_classes, rng);
        Ok(Self { arch, blocks, head })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.n == 0 {
            return Err(Error::EmptyBatch);
        }
        if (x.c, x.h, x.w) != (self.arch.in_channels, self.arch.height, self.arch.width) {
            return Err(Error::Shape(format!(
                "input is {}x{}x{}, model expects {}x{}x{}",
                x.c, x.h, x.w, self.arch.in_channels, self.arch.height, self.arch.width
            )));
        }
        if let Some(i) = x.first_non_finite() {
            return Err(Error::NonFinite {
                layer: format!("input[{i}]"),
            });
        }
        Ok(())
    }

    /// Full forward pass keeping intermediates for a backward pass.
    pub fn forward_cached(&self, x: &Tensor, norm: NormMode) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for (l, block) in self.blocks.iter().enumerate() {
            let conv_out = block.conv.forward(&h);
            if conv_out.first_non_finite().is_some() {
                return Err(Error::NonFinite {
                    layer: format!("block{l}.conv"),
                });
            }
            let (mut out, cache) = block.norm.forward(&conv_out, norm);
            if out.first_non_finite().is_some() {
                return Err(Error::NonFinite {
                    layer: format!("block{l}.norm"),
                });
            }
            for v in &mut out.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            blocks.push(BlockCache {
                conv_in: h,
                norm: cache,
                output: out.clone(),
            });
            h = out;
        }
        let features = h.channel_means();
        let logits: Vec<Vec<f64>> = features.iter().map(|z| self.head.forward(z)).collect();
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: "head".into() });
        }
        let probs = logits.iter().map(|l| softmax(l)).collect();
        Ok(ForwardCache {
            input: x.clone(),
            blocks,
            features,
            logits,
            probs,
        })
    }

    pub fn forward(&self, x: &Tensor, norm: NormMode, mode: OutputMode) -> Result<ForwardOutput> {
        let cache = self.forward_cached(x, norm)?;
        Ok(ForwardOutput {
            features: matches!(mode, OutputMode::Features | OutputMode::Both).then_some(cache.features),
            probs: matches!(mode, OutputMode::Probs | OutputMode::Both).then_some(cache.probs),
        })
    }

    /// Class probabilities for a batch.
    pub fn predict(&self, x: &Tensor, norm: NormMode) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_cached(x, norm)?.probs)
    }

    /// Applies the head `h` alone to an encoder output.
    pub fn classify_features(&self, z: &[f64]) -> Vec<f64> {
        softmax(&self.head.forward(z))
    }

    /// Updates running normalization statistics from a batch-mode forward pass.
    pub fn absorb_batch_stats(&mut self, cache: &ForwardCache) {
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            if bc.norm.mode == NormMode::Batch {
                block.norm.absorb(&bc.norm);
            }
        }
    }

    /// Back-propagates the given seeds. The head is frozen, so only encoder
    /// gradients (and optionally the input gradient) are produced.
    pub fn backward(&self, cache: &ForwardCache, seeds: Seeds<'_>, need_input: bool) -> (EncoderGrads, Option<Tensor>) {
        let b = cache.features.len();
        let d = self.feature_dim();
        let mut dz = vec![vec![0.0; d]; b];
        let mut dlogits: Vec<Vec<f64>> = vec![vec![0.0; self.num_classes()]; b];
        if let Some(gl) = seeds.logits {
            for (acc, g) in dlogits.iter_mut().zip(gl) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        if let Some(gp) = seeds.probs {
            for ((acc, g), p) in dlogits.iter_mut().zip(gp).zip(&cache.probs) {
                for (a, v) in acc.iter_mut().zip(softmax_backward(p, g)) {
                    *a += v;
                }
            }
        }
        for (dzi, gl) in dz.iter_mut().zip(&dlogits) {
            for (a, v) in dzi.iter_mut().zip(self.head.backward_input(gl)) {
                *a += v;
            }
        }
        if let Some(gf) = seeds.features {
            for (dzi, g) in dz.iter_mut().zip(gf) {
                for (a, v) in dzi.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }

        let mut grads = EncoderGrads::zeros_like(self);
        let last = cache.blocks.last().expect("at least one block");
        // Global average pool backward.
        let mut g = Tensor::zeros(last.output.n, last.output.c, last.output.h, last.output.w);
        let hw = g.plane_len();
        for n in 0..g.n {
            let s = g.sample_mut(n);
            for c in 0..last.output.c {
                let v = dz[n][c] / hw as f64;
                s[c * hw..(c + 1) * hw].iter_mut().for_each(|x| *x = v);
            }
        }
        let mut input_grad = None;
        for l in (0..self.blocks.len()).rev() {
            let bc = &cache.blocks[l];
            if let Some(gm) = seeds.block_means {
                let hw = bc.output.plane_len();
                for n in 0..g.n {
                    let s = g.sample_mut(n);
                    for c in 0..bc.output.c {
                        let v = gm[l][n][c] / hw as f64;
                        s[c * hw..(c + 1) * hw].iter_mut().for_each(|x| *x += v);
                    }
                }
            }
            // ReLU
            for (gv, ov) in g.data.iter_mut().zip(&bc.output.data) {
                if *ov <= 0.0 {
                    *gv = 0.0;
                }
            }
            let block = &self.blocks[l];
            let (gconv, dgamma, dbeta) = block.norm.backward(&bc.norm, &g);
            let need = l > 0 || need_input;
            let (dw, gin) = block.conv.backward(&bc.conv_in, &gconv, need);
            grads.blocks[l] = BlockGrads {
                conv: dw,
                gamma: dgamma,
                beta: dbeta,
            };
            match gin {
                Some(t) if l > 0 => g = t,
                Some(t) => input_grad = Some(t),
                None => break,
            }
        }
        (grads, input_grad)
    }

    /// Mutable views of the trainable encoder parameters, in a fixed order.
    pub fn params_mut(&mut self, group: ParamGroup) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            if group == ParamGroup::Encoder {
                out.push(&mut b.conv.weight);
            }
            out.push(&mut b.norm.gamma);
            out.push(&mut b.norm.beta);
        }
        out
    }

    /// Every stored tensor with its name and shape, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.conv.weight"), b.conv.weight_shape(), b.conv.weight.as_slice()));
            let c = vec![b.norm.channels];
            out.push((format!("block{l}.norm.gamma"), c.clone(), b.norm.gamma.as_slice()));
            out.push((format!("block{l}.norm.beta"), c.clone(), b.norm.beta.as_slice()));
            out.push((format!("block{l}.norm.running_mean"), c.clone(), b.norm.running_mean.as_slice()));
            out.push((format!("block{l}.norm.running_var"), c, b.norm.running_var.as_slice()));
        }
        out.push((
            "head.weight".into(),
            vec![self.head.out_dim, self.head.in_dim],
            self.head.weight.as_slice(),
        ));
        out.push(("head.bias".into(), vec![self.head.out_dim], self.head.bias.as_slice()));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{l}.conv.weight"), &mut b.conv.weight));
            out.push((format!("block{l}.norm.gamma"), &mut b.norm.gamma));
            out.push((format!("block{l}.norm.beta"), &mut b.norm.beta));
            out.push((format!("block{l}.norm.running_mean"), &mut b.norm.running_mean));
            out.push((format!("block{l}.norm.running_var"), &mut b.norm.running_var));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// Flat copy of every parameter and buffer.
    pub fn param_vector(&self) -> Vec<f64> {
        self.named_tensors()
            .into_iter()
            .flat_map(|(_, _, v)| v.iter().copied())
            .collect()
    }

    /// Raw bytes of the classifier head, for bit-identity checks.
    pub fn head_bytes(&self) -> Vec<u8> {
        self.head
            .weight
            .iter()
            .chain(&self.head.bias)
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> Architecture {
        Architecture {
            in_channels: 3,
            height: 6,
            width: 6,
            block_channels: vec![3, 4],
            block_strides: vec![1, 2],
            num_classes: 3,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, arch: &Architecture) -> Tensor {
        let imgs: Vec<Image> = (0..n)
            .map(|_| {
                let data = (0..arch.in_channels * arch.height * arch.width)
                    .map(|_| rng.gen_range(0.0..1.0))
                    .collect();
                Image::from_vec(arch.in_channels, arch.height, arch.width, data).unwrap()
            })
            .collect();
        Tensor::from_images(&imgs).unwrap()
    }

    fn perturbed_model(rng: &mut ChaCha8Rng) -> SplitModel {
        let mut m = SplitModel::new(tiny_arch(), rng).unwrap();
        for b in &mut m.blocks {
            for v in b.norm.gamma.iter_mut().chain(b.norm.beta.iter_mut()) {
                *v += rng.gen_range(-0.3..0.3);
            }
            for v in &mut b.norm.running_mean {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
        for v in &mut m.head.bias {
            *v = rng.gen_range(-0.5..0.5);
        }
        m
    }

    #[test]
    fn batch_of_four_gives_simplex_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = SplitModel::new(Architecture::desk(10), &mut rng).unwrap();
        let x = random_batch(&mut rng, 4, &model.arch);
        let out = model.forward(&x, NormMode::Batch, OutputMode::Both).unwrap();
        let (f, p) = (out.features.unwrap(), out.probs.unwrap());
        assert_eq!(f.len(), 4);
        assert!(f.iter().all(|r| r.len() == model.feature_dim()));
        assert!(p.iter().all(|r| r.len() == 10 && (r.iter().sum::<f64>() - 1.0).abs() < 1e-5));
    }

    #[test]
    fn duplicated_image_gives_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = SplitModel::new(tiny_arch(), &mut rng).unwrap();
        let x = random_batch(&mut rng, 1, &model.arch);
        let img = x.image(0);
        let batch = Tensor::from_images(&[img.clone(), img]).unwrap();
        let p = model.predict(&batch, NormMode::Running).unwrap();
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn probs_match_manual_layer_by_layer_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = perturbed_model(&mut rng);
        let x = random_batch(&mut rng, 1, &model.arch);
        let p = model.predict(&x, NormMode::Running).unwrap();

        // g: conv -> affine normalization with running stats -> relu, per block; then mean-pool.
        let mut h = x.clone();
        for b in &model.blocks {
            let mut t = b.conv.forward(&h);
            let hw = t.plane_len();
            for c in 0..t.c {
                let s = 1.0 / (b.norm.running_var[c] + b.norm.eps).sqrt();
                for v in &mut t.data[c * hw..(c + 1) * hw] {
                    *v = (b.norm.gamma[c] * (*v - b.norm.running_mean[c]) * s + b.norm.beta[c]).max(0.0);
                }
            }
            h = t;
        }
        let hw = h.plane_len() as f64;
        let z: Vec<f64> = (0..h.c).map(|c| h.data[c * h.plane_len()..(c + 1) * h.plane_len()].iter().sum::<f64>() / hw).collect();
        // h: linear, then softmax
        let logits: Vec<f64> = (0..model.num_classes())
            .map(|k| model.head.bias[k] + (0..z.len()).map(|d| model.head.weight[k * z.len() + d] * z[d]).sum::<f64>())
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let zsum: f64 = e.iter().sum();
        for (a, b) in p[0].iter().zip(e.iter().map(|v| v / zsum)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn nan_input_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = SplitModel::new(tiny_arch(), &mut rng).unwrap();
        let mut x = random_batch(&mut rng, 2, &model.arch);
        x.data[5] = f64::NAN;
        assert!(matches!(
            model.predict(&x, NormMode::Batch),
            Err(Error::NonFinite { .. })
        ));
    }

    /// Scalar objective touching logits, features and block means.
    fn objective(model: &SplitModel, x: &Tensor, norm: NormMode, w: &[f64]) -> f64 {
        let c = model.forward_cached(x, norm).unwrap();
        let mut i = 0;
        let mut acc = 0.0;
        for row in c.logits.iter().chain(&c.features) {
            for v in row {
                acc += w[i % w.len()] * v;
                i += 1;
            }
        }
        for block in c.block_means() {
            for row in block {
                for v in row {
                    acc += w[i % w.len()] * v * v;
                    i += 1;
                }
            }
        }
        acc
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = perturbed_model(&mut rng);
        let x = random_batch(&mut rng, 2, &model.arch);
        let w: Vec<f64> = (0..37).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for norm in [NormMode::Batch, NormMode::Running] {
            let c = model.forward_cached(&x, norm).unwrap();
            let mut i = 0;
            let mut seed_logits = c.logits.clone();
            for row in &mut seed_logits {
                for v in row {
                    *v = w[i % w.len()];
                    i += 1;
                }
            }
            let mut seed_feat = c.features.clone();
            for row in &mut seed_feat {
                for v in row {
                    *v = w[i % w.len()];
                    i += 1;
                }
            }
            let mut seed_means = c.block_means();
            for block in &mut seed_means {
                for row in block {
                    for v in row {
                        *v = 2.0 * w[i % w.len()] * *v;
                        i += 1;
                    }
                }
            }
            let seeds = Seeds {
                logits: Some(&seed_logits),
                features: Some(&seed_feat),
                block_means: Some(&seed_means),
                ..Default::default()
            };
            let (grads, gin) = model.backward(&c, seeds, true);
            let gin = gin.unwrap();
            let h = 1e-6;
            for idx in (0..x.data.len()).step_by(7) {
                let mut p = x.clone();
                p.data[idx] += h;
                let mut m = x.clone();
                m.data[idx] -= h;
                let fd = (objective(&model, &p, norm, &w) - objective(&model, &m, norm, &w)) / (2.0 * h);
                assert!((fd - gin.data[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "{norm:?} input {idx}: {fd} vs {}", gin.data[idx]);
            }
            let flat = grads.flat(ParamGroup::Encoder);
            for (t, g) in flat.iter().enumerate() {
                for idx in (0..g.len()).step_by(5) {
                    let mut p = model.clone();
                    p.params_mut(ParamGroup::Encoder)[t][idx] += h;
                    let mut m = model.clone();
                    m.params_mut(ParamGroup::Encoder)[t][idx] -= h;
                    let fd = (objective(&p, &x, norm, &w) - objective(&m, &x, norm, &w)) / (2.0 * h);
                    assert!((fd - g[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "{norm:?} param {t}/{idx}: {fd} vs {}", g[idx]);
                }
            }
        }
    }
}

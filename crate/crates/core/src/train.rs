//! Supervised source training of a [`SplitModel`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::nn::{Architecture, NormMode, Optimizer, OptimizerKind, Seeds, SplitModel};
use crate::objectives::flog;
use crate::plr::WeakAugmenter;
use crate::tensor::{argmax, Image, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Random flips and crops of the training images.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 0,
            augment: true,
        }
    }
}

/// Cross-entropy training of every parameter, head included, with Adam.
/// Normalization runs on batch statistics and folds them into the running
/// estimates.
pub fn train_source(set: &ImageSet, arch: Architecture, cfg: &TrainConfig) -> Result<SplitModel> {
    if set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    if set.num_classes != arch.num_classes {
        return Err(Error::Shape(format!(
            "data has {} classes, architecture {}",
            set.num_classes, arch.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SplitModel::new(arch, &mut rng)?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate);
    let aug = WeakAugmenter {
        num_views: 1,
        ..WeakAugmenter::default()
    };
    let mut order: Vec<usize> = (0..set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Image> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        aug.augment(&set.images[i], &mut rng)
                    } else {
                        set.images[i].clone()
                    }
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
            total += train_batch(&mut model, &mut opt, &images, &labels)? * chunk.len() as f64;
        }
        log::info!("source epoch {epoch}: mean loss {:.4}", total / set.len() as f64);
    }
    Ok(model)
}

/// One optimizer step; returns the batch's mean cross-entropy.
fn train_batch(model: &mut SplitModel, opt: &mut Optimizer, images: &[Image], labels: &[usize]) -> Result<f64> {
    let cache = model.forward_cached(&Tensor::from_images(images)?, NormMode::Batch)?;
    let b = images.len() as f64;
    let mut loss = 0.0;
    let dlogits: Vec<Vec<f64>> = cache
        .probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            loss -= flog(p[y]) / b;
            p.iter()
                .enumerate()
                .map(|(k, &v)| (v - if k == y { 1.0 } else { 0.0 }) / b)
                .collect()
        })
        .collect();
    if !loss.is_finite() {
        return Err(Error::NonFinite { layer: "loss".into() });
    }
    let (grads, _) = model.backward(
        &cache,
        Seeds {
            logits: Some(&dlogits),
            ..Default::default()
        },
        false,
    );
    let (gw, gb) = model.head.backward_params(&cache.features, &dlogits);
    let mut flat = grads.flat(crate::nn::ParamGroup::Encoder);
    flat.push(&gw);
    flat.push(&gb);
    let mut params: Vec<&mut Vec<f64>> = Vec::new();
    for block in &mut model.blocks {
        params.push(&mut block.conv.weight);
        params.push(&mut block.norm.gamma);
        params.push(&mut block.norm.beta);
    }
    params.push(&mut model.head.weight);
    params.push(&mut model.head.bias);
    opt.step(&mut params, &flat)?;
    model.absorb_batch_stats(&cache);
    Ok(loss)
}

/// Percentage of misclassified images under the given normalization.
pub fn evaluate(model: &SplitModel, set: &ImageSet, norm: NormMode, batch_size: usize) -> Result<f64> {
    let mut wrong = 0usize;
    for (imgs, labels) in set.images.chunks(batch_size).zip(set.labels.chunks(batch_size)) {
        let probs = model.predict(&Tensor::from_images(imgs)?, norm)?;
        wrong += probs.iter().zip(labels).filter(|(p, &l)| argmax(p) != l).count();
    }
    Ok(100.0 * wrong as f64 / set.len() as f64)
}

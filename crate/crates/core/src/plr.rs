//! Soft pseudo-label refinement.
//!
//! The teacher's features and softmax outputs are averaged over several
//! weakly augmented views of each test image, pushed into a class-balanced
//! memory, and the final soft label is the mean soft label of the nearest
//! stored neighbors.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::resample::{self, Affine};
use crate::error::{Error, Result};
use crate::nn::{NormMode, OutputMode, SplitModel};
use crate::tensor::{argmax, Image, Tensor};

/// Random horizontal flip followed by a random square resized crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakAugmenter {
    pub num_views: usize,
    /// Range of the crop's area fraction, within `(0, 1]`.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
}

impl Default for WeakAugmenter {
    fn default() -> Self {
        Self {
            num_views: 5,
            crop_scale: (0.8, 1.0),
            flip_prob: 0.5,
        }
    }
}

impl WeakAugmenter {
    /// Views that are exact copies of the input.
    pub fn identity(num_views: usize) -> Self {
        Self {
            num_views,
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if self.num_views == 0 {
            return Err(Error::Config("need at least one weak view".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale range ({lo}, {hi}) not within (0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip probability outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Draws one view. Consumes exactly three random numbers per call so
    /// the stream position does not depend on the outcome.
    pub fn augment<R: Rng + ?Sized>(&self, x: &Image, rng: &mut R) -> Image {
        let flip = rng.gen::<f64>() < self.flip_prob;
        let (lo, hi) = self.crop_scale;
        let area = lo + (hi - lo) * rng.gen::<f64>();
        let pos: f64 = rng.gen();
        let side = area.sqrt();
        if !flip && side >= 1.0 {
            return x.clone();
        }
        let (w, h) = (x.width as f64, x.height as f64);
        let (cw, ch) = (side * w, side * h);
        let x0 = pos * (w - cw);
        let y0 = pos * (h - ch);
        let (sx, sy) = (cw / w, ch / h);
        // Output pixel o reads crop coordinate (o + 0.5) * s - 0.5, offset by the crop origin.
        let mut map: Affine = [sx, 0.0, x0 + 0.5 * sx - 0.5, 0.0, sy, y0 + 0.5 * sy - 0.5];
        if flip {
            // o -> (w - 1 - o)
            map[2] += map[0] * (w - 1.0);
            map[0] = -map[0];
        }
        let mut out = resample::warp(x, &map, 0.0);
        out.clamp01();
        out
    }
}

/// Averages teacher features and probabilities over `augmenter.num_views`
/// weak views. Views are drawn view-major: all images for view 0, then all
/// images for view 1, and so on. Each view is a single batched forward pass.
pub fn ensemble_weak<R: Rng + ?Sized>(
    teacher: &SplitModel,
    images: &[Image],
    augmenter: &WeakAugmenter,
    norm: NormMode,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    augmenter.validate()?;
    let d = teacher.feature_dim();
    let k = teacher.num_classes();
    let mut z = vec![vec![0.0; d]; images.len()];
    let mut y = vec![vec![0.0; k]; images.len()];
    let scale = 1.0 / augmenter.num_views as f64;
    for _ in 0..augmenter.num_views {
        let views: Vec<Image> = images.iter().map(|x| augmenter.augment(x, rng)).collect();
        let out = teacher.forward(&Tensor::from_images(&views)?, norm, OutputMode::Both)?;
        for (acc, f) in z.iter_mut().zip(out.features.unwrap()) {
            acc.iter_mut().zip(f).for_each(|(a, v)| *a += scale * v);
        }
        for (acc, p) in y.iter_mut().zip(out.probs.unwrap()) {
            acc.iter_mut().zip(p).for_each(|(a, v)| *a += scale * v);
        }
    }
    Ok((z, y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Cosine,
    Euclidean,
}

impl Distance {
    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub feature: Vec<f64>,
    pub soft_label: Vec<f64>,
}

/// One bounded FIFO per class. Entries are immutable once stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementQueue {
    capacity: usize,
    distance: Distance,
    per_class: Vec<VecDeque<QueueEntry>>,
}

impl RefinementQueue {
    pub fn new(num_classes: usize, capacity: usize, distance: Distance) -> Result<Self> {
        if capacity == 0 || num_classes == 0 {
            return Err(Error::Config("queue capacity and class count must be positive".into()));
        }
        Ok(Self {
            capacity,
            distance,
            per_class: vec![VecDeque::with_capacity(capacity); num_classes],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_len(&self, class: usize) -> usize {
        self.per_class[class].len()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.per_class.iter().flatten()
    }

    /// Stores the entry under `argmax(soft_label)` (lowest index on ties),
    /// evicting that class's oldest entry when full. Returns the class.
    pub fn enqueue(&mut self, feature: Vec<f64>, soft_label: Vec<f64>) -> Result<usize> {
        if soft_label.len() != self.per_class.len() {
            return Err(Error::Shape(format!(
                "soft label has {} classes, queue has {}",
                soft_label.len(),
                self.per_class.len()
            )));
        }
        let class = argmax(&soft_label);
        let q = &mut self.per_class[class];
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(QueueEntry { feature, soft_label });
        Ok(class)
    }

    /// Mean soft label of the `min(n, len)` nearest stored features. Ties in
    /// distance keep class-then-age order.
    pub fn refine(&self, feature: &[f64], n: usize) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::Precondition("refinement queue is empty".into()));
        }
        if n == 0 {
            return Err(Error::Config("number of neighbors must be positive".into()));
        }
        let mut scored: Vec<(f64, &QueueEntry)> = self
            .entries()
            .map(|e| (self.distance.between(feature, &e.feature), e))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        let take = n.min(scored.len());
        let k = self.per_class.len();
        let mut out = vec![0.0; k];
        for (_, e) in &scored[..take] {
            for (o, v) in out.iter_mut().zip(&e.soft_label) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= take as f64);
        Ok(out)
    }
}

/// Runs enqueue-then-refine for each sample in order and returns the
/// refined pseudo-labels.
pub fn refine_batch(
    queue: &mut RefinementQueue,
    features: &[Vec<f64>],
    soft_labels: &[Vec<f64>],
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    features
        .iter()
        .zip(soft_labels)
        .map(|(z, y)| {
            queue.enqueue(z.clone(), y.clone())?;
            queue.refine(z, n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn onehot(k: usize, c: usize) -> Vec<f64> {
        (0..k).map(|i| if i == c { 1.0 } else { 0.0 }).collect()
    }

    fn random_image(rng: &mut ChaCha8Rng) -> Image {
        Image::from_vec(3, 32, 32, (0..3 * 32 * 32).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn fifo_eviction_keeps_newest() {
        let mut q = RefinementQueue::new(2, 2, Distance::Cosine).unwrap();
        for i in 0..3 {
            q.enqueue(vec![i as f64, 1.0], vec![0.9, 0.1]).unwrap();
        }
        assert_eq!(q.class_len(0), 2);
        let firsts: Vec<f64> = q.entries().map(|e| e.feature[0]).collect();
        assert_eq!(firsts, vec![1.0, 2.0]);
    }

    #[test]
    fn ties_go_to_lowest_class_and_classes_are_isolated() {
        let mut q = RefinementQueue::new(3, 1, Distance::Cosine).unwrap();
        assert_eq!(q.enqueue(vec![1.0], vec![0.4, 0.4, 0.2]).unwrap(), 0);
        q.enqueue(vec![1.0], onehot(3, 2)).unwrap();
        q.enqueue(vec![2.0], onehot(3, 2)).unwrap();
        assert_eq!(q.class_len(0), 1);
        assert_eq!(q.class_len(2), 1);
    }

    #[test]
    fn self_neighbor_and_symmetric_average() {
        let mut q = RefinementQueue::new(2, 4, Distance::Cosine).unwrap();
        q.enqueue(vec![0.3, 0.7], vec![0.6, 0.4]).unwrap();
        assert_eq!(q.refine(&[0.3, 0.7], 1).unwrap(), vec![0.6, 0.4]);

        let mut q = RefinementQueue::new(2, 4, Distance::Cosine).unwrap();
        q.enqueue(vec![1.0, 0.0], onehot(2, 0)).unwrap();
        q.enqueue(vec![0.0, 1.0], onehot(2, 1)).unwrap();
        assert_eq!(q.refine(&[1.0, 1.0], 2).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn empty_queue_is_a_precondition_error() {
        let q = RefinementQueue::new(2, 4, Distance::Cosine).unwrap();
        assert!(matches!(q.refine(&[1.0], 1), Err(Error::Precondition(_))));
    }

    #[test]
    fn refine_matches_exhaustive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = 4;
        let mut q = RefinementQueue::new(k, 10, Distance::Cosine).unwrap();
        let mut all = Vec::new();
        for _ in 0..20 {
            let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = crate::tensor::softmax(&(0..k).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
            q.enqueue(z.clone(), y.clone()).unwrap();
            all.push((z, y));
        }
        let query: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Oracle: cosine distance by definition, full sort, average of top 5.
        let mut d: Vec<(f64, Vec<f64>)> = all
            .iter()
            .map(|(z, y)| {
                let dot: f64 = z.iter().zip(&query).map(|(a, b)| a * b).sum();
                let n1: f64 = z.iter().map(|a| a * a).sum::<f64>().sqrt();
                let n2: f64 = query.iter().map(|a| a * a).sum::<f64>().sqrt();
                (1.0 - dot / (n1 * n2), y.clone())
            })
            .collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut expected = vec![0.0; k];
        for (_, y) in &d[..5] {
            for c in 0..k {
                expected[c] += y[c] / 5.0;
            }
        }
        let got = q.refine(&query, 5).unwrap();
        for c in 0..k {
            assert!((got[c] - expected[c]).abs() < 1e-7);
        }
    }

    #[test]
    fn single_identity_view_is_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let teacher = SplitModel::new(Architecture::desk(10), &mut rng).unwrap();
        let imgs: Vec<Image> = (0..3).map(|_| random_image(&mut rng)).collect();
        let (z, y) = ensemble_weak(&teacher, &imgs, &WeakAugmenter::identity(1), NormMode::Batch, &mut rng).unwrap();
        let out = teacher
            .forward(&Tensor::from_images(&imgs).unwrap(), NormMode::Batch, OutputMode::Both)
            .unwrap();
        assert_eq!(z, out.features.unwrap());
        assert_eq!(y, out.probs.unwrap());
    }

    #[test]
    fn five_views_equal_mean_of_separately_computed_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let teacher = SplitModel::new(Architecture::desk(10), &mut rng).unwrap();
        let imgs: Vec<Image> = (0..4).map(|_| random_image(&mut rng)).collect();
        let aug = WeakAugmenter::default();
        let (z, y) = ensemble_weak(&teacher, &imgs, &aug, NormMode::Batch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for row in &y {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        // Oracle: one view at a time with the same draw order.
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(5);
        let mut per_view = Vec::new();
        for _ in 0..5 {
            let views: Vec<Image> = imgs.iter().map(|x| aug.augment(x, &mut oracle_rng)).collect();
            per_view.push(
                teacher
                    .forward(&Tensor::from_images(&views).unwrap(), NormMode::Batch, OutputMode::Both)
                    .unwrap(),
            );
        }
        for i in 0..imgs.len() {
            for c in 0..10 {
                let mean: f64 = per_view.iter().map(|o| o.probs.as_ref().unwrap()[i][c]).sum::<f64>() / 5.0;
                assert!((y[i][c] - mean).abs() < 1e-7);
            }
            for d in 0..teacher.feature_dim() {
                let mean: f64 = per_view.iter().map(|o| o.features.as_ref().unwrap()[i][d]).sum::<f64>() / 5.0;
                assert!((z[i][d] - mean).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn weak_views_keep_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = random_image(&mut rng);
        let aug = WeakAugmenter::default();
        for _ in 0..10 {
            let v = aug.augment(&x, &mut rng);
            assert!(v.same_shape(&x) && v.in_unit_range());
        }
    }

    #[test]
    fn one_neighbor_one_slot_returns_own_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut q = RefinementQueue::new(3, 1, Distance::Cosine).unwrap();
        for _ in 0..30 {
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = crate::tensor::softmax(&[rng.gen(), rng.gen(), rng.gen()]);
            let refined = refine_batch(&mut q, &[z], &[y.clone()], 1).unwrap();
            assert_eq!(refined[0], y);
        }
    }

    proptest! {
        #[test]
        fn capacity_and_simplex_hold(labels in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..60), cap in 1usize..5, n in 1usize..8) {
            let mut q = RefinementQueue::new(3, cap, Distance::Cosine).unwrap();
            for (i, raw) in labels.iter().enumerate() {
                let s: f64 = raw.iter().sum();
                let y: Vec<f64> = raw.iter().map(|v| v / s).collect();
                let z = vec![(i as f64).sin(), (i as f64).cos(), 0.5];
                q.enqueue(z.clone(), y).unwrap();
                prop_assert!(q.len() <= 3 * cap);
                for c in 0..3 { prop_assert!(q.class_len(c) <= cap); }
                let r = q.refine(&z, n).unwrap();
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

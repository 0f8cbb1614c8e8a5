//! Online adversarial augmentation policy.
//!
//! The search space is every unordered combination of `N` ops from the
//! registry, applied in registry order. Each sub-policy owns `N` magnitudes
//! (a row of `M`) and a selection probability (an entry of `P`). Both are
//! learned online by a stochastic gradient of the expected policy loss:
//!
//! ```text
//! δ̂(x, ρ_i) = ∇ L_aug(x, ρ_i) + L_aug(x, ρ_i) ∇ log p_i
//! [P, M] <- [P, M] - γ/B Σ_j δ̂(x_j, ρ_{i_j})
//! ```
//!
//! The first term only touches row `i` of `M`, the second only `P`. After
//! every step `P` is projected onto the simplex with a floor on each entry and
//! `M` is clamped to `[0, 1]`. Because `P` lives on the simplex, its gradient
//! is reported with the all-ones component removed; the projection makes the
//! update invariant to that component anyway.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{apply_chain, apply_plain, Augmented, OpKind, ALL_OPS};
use crate::error::{Error, Result};
use crate::nn::{NormMode, Seeds, SplitModel};
use crate::objectives::{d_plogp, flog};
use crate::tensor::{Image, Tensor};

/// Default lower bound on every selection probability.
pub const PROB_FLOOR: f64 = 1e-4;

/// An ordered chain of distinct ops.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubPolicy {
    pub ops: Vec<OpKind>,
}

impl SubPolicy {
    pub fn label(&self) -> String {
        self.ops.iter().map(|o| o.name()).collect::<Vec<_>>().join("+")
    }
}

/// All `C(|ops|, n)` combinations, each in registry order, enumerated
/// lexicographically by registry index.
pub fn enumerate_subpolicies(ops: &[OpKind], n: usize) -> Result<Vec<SubPolicy>> {
    let mut set: Vec<OpKind> = ops.to_vec();
    set.sort_by_key(|o| o.registry_index());
    set.dedup();
    if n == 0 || n > set.len() {
        return Err(Error::Config(format!(
            "sub-policy dimension {n} must be within 1..={}",
            set.len()
        )));
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        out.push(SubPolicy {
            ops: idx.iter().map(|&i| set[i]).collect(),
        });
        // Advance to the next combination.
        let mut pos = n;
        while pos > 0 {
            pos -= 1;
            if idx[pos] != pos + set.len() - n {
                break;
            }
            if pos == 0 {
                return Ok(out);
            }
        }
        if idx[pos] == pos + set.len() - n {
            return Ok(out);
        }
        idx[pos] += 1;
        for j in pos + 1..n {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Gradient w.r.t. `[P, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGradient {
    pub probs: Vec<f64>,
    pub magnitudes: Vec<Vec<f64>>,
}

impl PolicyGradient {
    pub fn zeros(num_policies: usize, dim: usize) -> Self {
        Self {
            probs: vec![0.0; num_policies],
            magnitudes: vec![vec![0.0; dim]; num_policies],
        }
    }

    pub fn add_assign(&mut self, other: &PolicyGradient) {
        for (a, b) in self.probs.iter_mut().zip(&other.probs) {
            *a += b;
        }
        for (ra, rb) in self.magnitudes.iter_mut().zip(&other.magnitudes) {
            for (a, b) in ra.iter_mut().zip(rb) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.probs.iter_mut().for_each(|v| *v *= s);
        self.magnitudes.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

/// Removes the all-ones component of a gradient on the simplex.
pub fn project_to_tangent(g: &mut [f64]) {
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter_mut().for_each(|v| *v -= mean);
}

/// Combines a sampled sub-policy's loss and magnitude gradient into the
/// single-sample estimate `∇L + L ∇log p_i`.
pub fn score_function_estimate(loss: f64, magnitude_grad: &[f64], index: usize, probs: &[f64], dim: usize) -> PolicyGradient {
    let mut g = PolicyGradient::zeros(probs.len(), dim);
    g.magnitudes[index].copy_from_slice(magnitude_grad);
    g.probs[index] = loss / probs[index];
    project_to_tangent(&mut g.probs);
    g
}

/// The exact gradient of `Σ_i p_i L_i` given every sub-policy's loss and
/// magnitude gradient.
pub fn exact_expected_gradient(losses: &[f64], magnitude_grads: &[Vec<f64>], probs: &[f64]) -> PolicyGradient {
    let mut probs_grad = losses.to_vec();
    project_to_tangent(&mut probs_grad);
    PolicyGradient {
        probs: probs_grad,
        magnitudes: magnitude_grads
            .iter()
            .zip(probs)
            .map(|(row, p)| row.iter().map(|g| p * g).collect())
            .collect(),
    }
}

/// Euclidean projection onto `{p : Σ p = 1, p_i >= floor}`.
pub fn project_to_floored_simplex(v: &[f64], floor: f64) -> Vec<f64> {
    let n = v.len();
    let mass = 1.0 - n as f64 * floor;
    let shifted: Vec<f64> = v.iter().map(|x| x - floor).collect();
    let mut sorted = shifted.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - mass) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    shifted.iter().map(|x| (x - theta).max(0.0) + floor).collect()
}

/// Per-image policy losses and their gradients w.r.t. the augmented images.
#[derive(Clone, Debug)]
pub struct AugEvaluation {
    pub losses: Vec<f64>,
    /// Negative prediction entropy part of each loss.
    pub neg_entropy: Vec<f64>,
    /// Feature-statistics regularizer part of each loss (before `lambda1`).
    pub regularizer: Vec<f64>,
    pub image_grads: Tensor,
}

/// Evaluates `L_aug(x_j, ρ) = Σ_k f_t(x̃_j)_k log f_t(x̃_j)_k + λ₁ r(x̃_j, x_j)`
/// for a batch, with `r` the mean over encoder blocks of the mean squared
/// difference between per-channel mean activations. Gradients are of the
/// batch sum `Σ_j L_aug` (items interact only through batch normalization
/// statistics when `norm` is [`NormMode::Batch`]).
pub fn evaluate_aug_batch(
    teacher: &SplitModel,
    clean: &[Image],
    augmented: &[Image],
    lambda1: f64,
    norm: NormMode,
) -> Result<AugEvaluation> {
    if clean.len() != augmented.len() {
        return Err(Error::Shape(format!(
            "{} clean images vs {} augmented",
            clean.len(),
            augmented.len()
        )));
    }
    let clean_cache = teacher.forward_cached(&Tensor::from_images(clean)?, norm)?;
    let aug_cache = teacher.forward_cached(&Tensor::from_images(augmented)?, norm)?;
    let clean_means = clean_cache.block_means();
    let aug_means = aug_cache.block_means();
    let layers = aug_means.len() as f64;
    let b = augmented.len();

    let mut neg_entropy = vec![0.0; b];
    let mut regularizer = vec![0.0; b];
    let mut grad_probs = vec![Vec::new(); b];
    for j in 0..b {
        let p = &aug_cache.probs[j];
        neg_entropy[j] = p.iter().map(|&v| v * flog(v)).sum();
        grad_probs[j] = p.iter().map(|&v| d_plogp(v)).collect();
    }
    let mut grad_means = aug_means.clone();
    for (l, (aug_l, clean_l)) in aug_means.iter().zip(&clean_means).enumerate() {
        for j in 0..b {
            let channels = aug_l[j].len() as f64;
            let mut sq = 0.0;
            for (c, (a, x)) in aug_l[j].iter().zip(&clean_l[j]).enumerate() {
                sq += (a - x).powi(2);
                grad_means[l][j][c] = lambda1 * 2.0 * (a - x) / (layers * channels);
            }
            regularizer[j] += sq / (layers * channels);
        }
    }
    let losses = neg_entropy
        .iter()
        .zip(&regularizer)
        .map(|(e, r)| e + lambda1 * r)
        .collect();
    let (_, image_grads) = teacher.backward(
        &aug_cache,
        Seeds {
            probs: Some(&grad_probs),
            block_means: Some(&grad_means),
            ..Default::default()
        },
        true,
    );
    Ok(AugEvaluation {
        losses,
        neg_entropy,
        regularizer,
        image_grads: image_grads.expect("input gradient requested"),
    })
}

/// Policy loss for one image and sub-policy with explicit magnitudes.
pub fn loss_aug(
    teacher: &SplitModel,
    x: &Image,
    ops: &[OpKind],
    magnitudes: &[f64],
    lambda1: f64,
    norm: NormMode,
) -> Result<f64> {
    let aug = apply_plain(x, ops, magnitudes);
    Ok(evaluate_aug_batch(teacher, std::slice::from_ref(x), &[aug], lambda1, norm)?.losses[0])
}

/// Learnable magnitudes `M` and selection probabilities `P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub sub_policies: Vec<SubPolicy>,
    pub magnitudes: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub gamma: f64,
    pub prob_floor: f64,
    pub sample_counts: Vec<u64>,
}

/// Result of one [`PolicyState::update`].
#[derive(Clone, Debug)]
pub struct PolicyStep {
    pub indices: Vec<usize>,
    /// Augmented views under the magnitudes in effect before the step.
    pub augmented: Vec<Image>,
    pub losses: Vec<f64>,
    pub neg_entropy: Vec<f64>,
}

impl PolicyState {
    /// Uniform `P`, all magnitudes 0.5.
    pub fn new(ops: &[OpKind], dim: usize, gamma: f64) -> Result<Self> {
        let sub_policies = enumerate_subpolicies(ops, dim)?;
        let n = sub_policies.len();
        let prob_floor = PROB_FLOOR.min(0.5 / n as f64);
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("policy learning rate {gamma} must be finite and >= 0")));
        }
        Ok(Self {
            magnitudes: vec![vec![0.5; dim]; n],
            probs: vec![1.0 / n as f64; n],
            sub_policies,
            gamma,
            prob_floor,
            sample_counts: vec![0; n],
        })
    }

    pub fn full(dim: usize, gamma: f64) -> Result<Self> {
        Self::new(&ALL_OPS, dim, gamma)
    }

    pub fn len(&self) -> usize {
        self.sub_policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub_policies.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.magnitudes.first().map_or(0, Vec::len)
    }

    /// Draws an index from `P` using one uniform variate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }

    pub fn apply(&self, x: &Image, index: usize) -> Image {
        apply_plain(x, &self.sub_policies[index].ops, &self.magnitudes[index])
    }

    pub fn apply_with_tangents(&self, x: &Image, index: usize) -> Augmented {
        apply_chain(x, &self.sub_policies[index].ops, &self.magnitudes[index])
    }

    /// `[P, M] <- [P, M] - step * grad`, then project `P` and clamp `M`.
    pub fn descend(&mut self, grad: &PolicyGradient, step: f64) {
        let raw: Vec<f64> = self.probs.iter().zip(&grad.probs).map(|(p, g)| p - step * g).collect();
        if raw.iter().zip(&self.probs).any(|(a, b)| a != b) {
            self.probs = project_to_floored_simplex(&raw, self.prob_floor);
        }
        for (row, grow) in self.magnitudes.iter_mut().zip(&grad.magnitudes) {
            for (m, g) in row.iter_mut().zip(grow) {
                *m = (*m - step * g).clamp(0.0, 1.0);
            }
        }
    }

    /// Single-image gradient estimate for a given sampled index.
    pub fn estimate_gradient(
        &self,
        teacher: &SplitModel,
        x: &Image,
        index: usize,
        lambda1: f64,
        norm: NormMode,
    ) -> Result<PolicyGradient> {
        let aug = self.apply_with_tangents(x, index);
        let eval = evaluate_aug_batch(teacher, std::slice::from_ref(x), &[aug.image.clone()], lambda1, norm)?;
        let g = eval.image_grads.image(0);
        let mg: Vec<f64> = aug.tangents.iter().map(|t| t.dot(&g)).collect();
        Ok(score_function_estimate(eval.losses[0], &mg, index, &self.probs, self.dim()))
    }

    /// Samples one sub-policy per image, evaluates the policy loss under the
    /// teacher and takes one stochastic gradient step.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        teacher: &SplitModel,
        batch: &[Image],
        lambda1: f64,
        norm: NormMode,
        rng: &mut R,
    ) -> Result<PolicyStep> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let indices: Vec<usize> = batch.iter().map(|_| self.sample(rng)).collect();
        let augs: Vec<Augmented> = batch
            .iter()
            .zip(&indices)
            .map(|(x, &i)| self.apply_with_tangents(x, i))
            .collect();
        let images: Vec<Image> = augs.iter().map(|a| a.image.clone()).collect();
        let eval = evaluate_aug_batch(teacher, batch, &images, lambda1, norm)?;
        let mut total = PolicyGradient::zeros(self.len(), self.dim());
        for (j, (aug, &i)) in augs.iter().zip(&indices).enumerate() {
            let g = eval.image_grads.image(j);
            let mg: Vec<f64> = aug.tangents.iter().map(|t| t.dot(&g)).collect();
            total.add_assign(&score_function_estimate(eval.losses[j], &mg, i, &self.probs, self.dim()));
            self.sample_counts[i] += 1;
        }
        self.descend(&total, self.gamma / batch.len() as f64);
        Ok(PolicyStep {
            indices,
            augmented: images,
            losses: eval.losses,
            neg_entropy: eval.neg_entropy,
        })
    }

    /// Sub-policy indices sorted by decreasing probability; ties are broken
    /// by larger sample count, then by index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.probs[b]
                .total_cmp(&self.probs[a])
                .then(self.sample_counts[b].cmp(&self.sample_counts[a]))
                .then(a.cmp(&b))
        });
        idx
    }

    pub fn check_invariants(&self) -> Result<()> {
        let s: f64 = self.probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Precondition(format!("policy probabilities sum to {s}")));
        }
        if let Some(p) = self.probs.iter().find(|&&p| p < self.prob_floor - 1e-12) {
            return Err(Error::Precondition(format!("policy probability {p} below floor")));
        }
        if self.magnitudes.iter().flatten().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Precondition("magnitude outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Structured dump for offline analysis.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "sub_policies": self.sub_policies.iter().map(SubPolicy::label).collect::<Vec<_>>(),
            "probs": self.probs,
            "magnitudes": self.magnitudes,
            "sample_counts": self.sample_counts,
        })
    }

    /// One-line summary of the most likely sub-policies.
    pub fn summary(&self, top: usize) -> String {
        self.ranked()
            .into_iter()
            .take(top)
            .map(|i| {
                format!(
                    "{}(p={:.4}, m={:?})",
                    self.sub_policies[i].label(),
                    self.probs[i],
                    self.magnitudes[i]
                )
            })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

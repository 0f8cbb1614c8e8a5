//! One adaptation step over an arriving batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AdaptationConfig, EvalModel, Method};
use crate::augment::policy::PolicyState;
use crate::error::{Error, Result};
use crate::model_pair::ModelPair;
use crate::nn::{NormMode, Optimizer, ParamGroup, Seeds, SplitModel};
use crate::objectives::{self, BatchPredictions};
use crate::plr::{self, RefinementQueue, WeakAugmenter};
use crate::tensor::{argmax, Image, Tensor};

/// Points in [`Adapter::adapt_step`] at which observers are called, in the
/// order they occur.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Refined pseudo-labels computed and the queue updated.
    PseudoLabels,
    /// Adversarial views drawn and the policy updated.
    Policy,
    /// Student optimizer step taken.
    Student,
    /// Teacher moved towards the student.
    Teacher,
    /// Predictions for the batch computed.
    Predict,
}

/// Read-only view of the state handed to observers.
pub struct StageView<'a> {
    pub stage: Stage,
    pub pair: &'a ModelPair,
    pub policy: &'a PolicyState,
    pub queue: &'a RefinementQueue,
}

pub trait StepObserver {
    fn observe(&mut self, view: &StageView<'_>);
}

impl StepObserver for () {
    fn observe(&mut self, _: &StageView<'_>) {}
}

impl<F: FnMut(&StageView<'_>)> StepObserver for F {
    fn observe(&mut self, view: &StageView<'_>) {
        self(view)
    }
}

/// What one step produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub predictions: Vec<Vec<f64>>,
    /// Objective value minimized by the student step (0 when nothing is trained).
    pub loss: f64,
    /// Sub-policy index drawn for each sample (TeSLA only).
    pub policy_indices: Vec<usize>,
    /// Mean policy loss of the drawn views (TeSLA only).
    pub policy_loss: Option<f64>,
}

/// Everything that changes while adapting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub cfg: AdaptationConfig,
    pub pair: ModelPair,
    pub policy: PolicyState,
    pub queue: RefinementQueue,
    pub optimizer: Optimizer,
    pub weak: WeakAugmenter,
    /// Seed and word position of the step RNG.
    rng_seed: u64,
    rng_word_pos: u128,
    pub steps: u64,
}

impl Adapter {
    pub fn new(cfg: AdaptationConfig, source: SplitModel) -> Result<Self> {
        cfg.validate()?;
        let k = source.num_classes();
        Ok(Self {
            policy: PolicyState::new(&cfg.policy_ops, cfg.policy_dim, cfg.policy_lr)?,
            queue: RefinementQueue::new(k, cfg.queue_size, cfg.distance)?,
            optimizer: Optimizer::new(cfg.optimizer, cfg.learning_rate),
            weak: WeakAugmenter {
                num_views: cfg.num_weak_views,
                ..WeakAugmenter::default()
            },
            pair: ModelPair::from_source(source, cfg.alpha)?,
            rng_seed: cfg.seed,
            rng_word_pos: 0,
            steps: 0,
            cfg,
        })
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    /// Normalization used for every forward pass on test data.
    pub fn norm_mode(&self) -> NormMode {
        match self.cfg.method {
            Method::SourceOnly => NormMode::Running,
            _ => NormMode::Batch,
        }
    }

    fn eval_net(&self) -> &SplitModel {
        match (self.cfg.method, self.cfg.eval_model) {
            (Method::Tesla, EvalModel::Teacher) => &self.pair.teacher,
            _ => &self.pair.student,
        }
    }

    /// Predictions of the evaluated network on a batch without adapting.
    pub fn predict(&self, batch: &[Image]) -> Result<Vec<Vec<f64>>> {
        self.eval_net().predict(&Tensor::from_images(batch)?, self.norm_mode())
    }

    fn notify(&self, observer: &mut dyn StepObserver, stage: Stage) {
        observer.observe(&StageView {
            stage,
            pair: &self.pair,
            policy: &self.policy,
            queue: &self.queue,
        });
    }

    fn check_loss(&self, loss: f64, epoch: usize, batch: usize) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::NanLoss {
                epoch,
                batch,
                policy: self.policy.summary(5),
            })
        }
    }

    fn student_update(&mut self, grads: &crate::nn::EncoderGrads, group: ParamGroup) -> Result<()> {
        let flat = grads.flat(group);
        let mut params = self.pair.student.params_mut(group);
        self.optimizer.step(&mut params, &flat)
    }

    /// Adapts on one batch and returns its predictions. `epoch` and `batch`
    /// only label diagnostics.
    pub fn adapt_step(
        &mut self,
        images: &[Image],
        epoch: usize,
        batch: usize,
        observer: &mut dyn StepObserver,
    ) -> Result<StepOutput> {
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let early = if self.cfg.predict_then_adapt {
            Some(self.predict(images)?)
        } else {
            None
        };
        let result = match self.cfg.method {
            Method::Tesla => self.tesla_step(images, epoch, batch, observer),
            Method::SourceOnly | Method::BnStats => Ok(StepOutput {
                predictions: Vec::new(),
                loss: 0.0,
                policy_indices: Vec::new(),
                policy_loss: None,
            }),
            Method::EntropyMin => self.entropy_step(images, epoch, batch),
            Method::PlHard => self.pl_hard_step(images, epoch, batch),
        };
        // A non-finite activation means the loss is undefined too.
        let mut out = result.map_err(|e| match e {
            Error::NonFinite { layer } => Error::NanLoss {
                epoch,
                batch,
                policy: format!("{} (first non-finite value in `{layer}`)", self.policy.summary(5)),
            },
            other => other,
        })?;
        out.predictions = match early {
            Some(p) => p,
            None => self.predict(images)?,
        };
        self.notify(observer, Stage::Predict);
        self.steps += 1;
        Ok(out)
    }

    fn tesla_step(
        &mut self,
        images: &[Image],
        epoch: usize,
        batch: usize,
        observer: &mut dyn StepObserver,
    ) -> Result<StepOutput> {
        let norm = NormMode::Batch;
        let mut rng = self.rng();

        // (1) Refined soft pseudo-labels from the teacher.
        let (z, y) = plr::ensemble_weak(&self.pair.teacher, images, &self.weak, norm, &mut rng)?;
        let pseudo = plr::refine_batch(&mut self.queue, &z, &y, self.cfg.num_neighbors)?;
        self.notify(observer, Stage::PseudoLabels);

        // (2) Adversarial views under the current teacher, then a policy step.
        let step = self
            .policy
            .update(&self.pair.teacher, images, self.cfg.lambda1, norm, &mut rng)?;
        self.rng_word_pos = rng.get_word_pos();
        let policy_loss = step.losses.iter().sum::<f64>() / step.losses.len() as f64;
        if !policy_loss.is_finite() {
            return Err(Error::NanLoss {
                epoch,
                batch,
                policy: self.policy.summary(5),
            });
        }
        self.notify(observer, Stage::Policy);

        // (3) Student step on the combined objective.
        let student = &self.pair.student;
        let clean = student.forward_cached(&Tensor::from_images(images)?, norm)?;
        let aug = student.forward_cached(&Tensor::from_images(&step.augmented)?, norm)?;
        let preds = BatchPredictions {
            student_probs: clean.probs.clone(),
            pseudo_labels: pseudo,
            student_probs_aug: aug.probs.clone(),
        };
        let (loss, g_clean, g_aug) = objectives::loss_total_with_grad(&preds, self.cfg.lambda2)?;
        self.check_loss(loss, epoch, batch)?;
        let (mut grads, _) = student.backward(
            &clean,
            Seeds {
                probs: Some(&g_clean),
                ..Default::default()
            },
            false,
        );
        if self.cfg.lambda2 != 0.0 {
            let (g2, _) = student.backward(
                &aug,
                Seeds {
                    probs: Some(&g_aug),
                    ..Default::default()
                },
                false,
            );
            grads.add_assign(&g2);
        }
        self.student_update(&grads, ParamGroup::Encoder)?;
        self.pair.student.absorb_batch_stats(&clean);
        self.notify(observer, Stage::Student);

        // (4) Teacher EMA.
        self.pair.ema_update();
        self.notify(observer, Stage::Teacher);

        Ok(StepOutput {
            predictions: Vec::new(),
            loss,
            policy_indices: step.indices,
            policy_loss: Some(policy_loss),
        })
    }

    fn entropy_step(&mut self, images: &[Image], epoch: usize, batch: usize) -> Result<StepOutput> {
        let student = &self.pair.student;
        let cache = student.forward_cached(&Tensor::from_images(images)?, NormMode::Batch)?;
        let (loss, g) = objectives::mean_entropy_with_grad(&cache.probs)?;
        self.check_loss(loss, epoch, batch)?;
        let (grads, _) = student.backward(
            &cache,
            Seeds {
                probs: Some(&g),
                ..Default::default()
            },
            false,
        );
        self.student_update(&grads, ParamGroup::NormAffine)?;
        self.pair.student.absorb_batch_stats(&cache);
        Ok(StepOutput {
            predictions: Vec::new(),
            loss,
            policy_indices: Vec::new(),
            policy_loss: None,
        })
    }

    fn pl_hard_step(&mut self, images: &[Image], epoch: usize, batch: usize) -> Result<StepOutput> {
        let student = &self.pair.student;
        let cache = student.forward_cached(&Tensor::from_images(images)?, NormMode::Batch)?;
        let labels: Vec<usize> = cache.probs.iter().map(|p| argmax(p)).collect();
        let (loss, g) = objectives::hard_cross_entropy_with_grad(&cache.probs, &labels)?;
        self.check_loss(loss, epoch, batch)?;
        let (grads, _) = student.backward(
            &cache,
            Seeds {
                probs: Some(&g),
                ..Default::default()
            },
            false,
        );
        self.student_update(&grads, ParamGroup::Encoder)?;
        self.pair.student.absorb_batch_stats(&cache);
        Ok(StepOutput {
            predictions: Vec::new(),
            loss,
            policy_indices: Vec::new(),
            policy_loss: None,
        })
    }
}

//! Protocol driver: batches the stream, runs epochs, records predictions,
//! and can stop and resume between batches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapter::{Adapter, StepObserver};
use super::config::{AdaptationConfig, Protocol};
use crate::error::{Error, Result};
use crate::eval::{self, PredictionRecord};
use crate::tensor::Image;

/// One adapted batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Positions of the batch's samples in the input stream.
    pub indices: Vec<usize>,
    pub predictions: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_loss: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub policy_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Online error over the epoch, when labels are known.
    pub error_rate: Option<f64>,
}

/// Policy state after a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub epoch: usize,
    pub batch: usize,
    pub probs: Vec<f64>,
    pub magnitudes: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub config: AdaptationConfig,
    pub num_samples: usize,
    pub batches: Vec<BatchRecord>,
    pub epochs: Vec<EpochMetrics>,
    /// Final prediction for every sample in stream order: the online
    /// prediction under N-O, a separate inference pass under N-M.
    pub final_predictions: Vec<Vec<f64>>,
    pub policy_history: Vec<PolicySnapshot>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_checkpoint: Option<String>,
}

impl AdaptationReport {
    /// Records pairing final predictions with labels.
    pub fn records(&self, labels: &[usize]) -> Result<Vec<PredictionRecord>> {
        if labels.len() != self.final_predictions.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} predictions",
                labels.len(),
                self.final_predictions.len()
            )));
        }
        self.final_predictions
            .iter()
            .zip(labels)
            .map(|(p, &l)| PredictionRecord::new(p.clone(), l))
            .collect()
    }
}

/// A test stream with optional labels (used only for reporting).
pub struct Stream<'a> {
    pub images: &'a [Image],
    pub labels: Option<&'a [usize]>,
}

impl<'a> Stream<'a> {
    pub fn new(images: &'a [Image], labels: Option<&'a [usize]>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("empty test stream".into()));
        }
        if let Some(l) = labels {
            if l.len() != images.len() {
                return Err(Error::Shape(format!("{} labels for {} images", l.len(), images.len())));
            }
        }
        Ok(Self { images, labels })
    }
}

/// Visiting order of one epoch.
pub fn epoch_order(cfg: &AdaptationConfig, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
    }
    order
}

/// Resumable run state. Checkpoints are only taken between batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Runner {
    pub adapter: Adapter,
    pub num_samples: usize,
    pub epoch: usize,
    /// Index of the next batch within the current epoch.
    pub batch: usize,
    batches: Vec<BatchRecord>,
    epochs: Vec<EpochMetrics>,
    policy_history: Vec<PolicySnapshot>,
    /// Whether policy snapshots are kept after every batch.
    pub record_policy: bool,
}

impl Runner {
    pub fn new(adapter: Adapter, num_samples: usize) -> Result<Self> {
        if num_samples == 0 {
            return Err(Error::Config("empty test stream".into()));
        }
        Ok(Self {
            adapter,
            num_samples,
            epoch: 0,
            batch: 0,
            batches: Vec::new(),
            epochs: Vec::new(),
            policy_history: Vec::new(),
            record_policy: true,
        })
    }

    pub fn cfg(&self) -> &AdaptationConfig {
        &self.adapter.cfg
    }

    fn batches_per_epoch(&self) -> usize {
        self.num_samples.div_ceil(self.cfg().batch_size)
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg().epochs
    }

    /// Adapts on the next batch. Returns `false` once every epoch is done.
    pub fn step(&mut self, stream: &Stream<'_>, observer: &mut dyn StepObserver) -> Result<bool> {
        if stream.images.len() != self.num_samples {
            return Err(Error::Shape(format!(
                "run expects {} samples, stream has {}",
                self.num_samples,
                stream.images.len()
            )));
        }
        if self.is_done() {
            return Ok(false);
        }
        let order = epoch_order(self.cfg(), self.epoch, self.num_samples);
        let b = self.cfg().batch_size;
        let lo = self.batch * b;
        let indices: Vec<usize> = order[lo..(lo + b).min(self.num_samples)].to_vec();
        let images: Vec<Image> = indices.iter().map(|&i| stream.images[i].clone()).collect();
        let out = self.adapter.adapt_step(&images, self.epoch, self.batch, observer)?;
        self.batches.push(BatchRecord {
            epoch: self.epoch,
            batch: self.batch,
            labels: stream.labels.map(|l| indices.iter().map(|&i| l[i]).collect()),
            indices,
            predictions: out.predictions,
            loss: out.loss,
            policy_loss: out.policy_loss,
            policy_indices: out.policy_indices,
        });
        if self.record_policy && self.cfg().method == super::Method::Tesla {
            self.policy_history.push(PolicySnapshot {
                epoch: self.epoch,
                batch: self.batch,
                probs: self.adapter.policy.probs.clone(),
                magnitudes: self.adapter.policy.magnitudes.clone(),
            });
        }
        self.batch += 1;
        if self.batch == self.batches_per_epoch() {
            self.close_epoch();
        }
        Ok(true)
    }

    fn close_epoch(&mut self) {
        let records: Vec<&BatchRecord> = self.batches.iter().filter(|r| r.epoch == self.epoch).collect();
        let mean_loss = records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64;
        let error_rate = if records.iter().all(|r| r.labels.is_some()) {
            let mut total = 0usize;
            let mut wrong = 0usize;
            for r in &records {
                for (p, &l) in r.predictions.iter().zip(r.labels.as_ref().unwrap()) {
                    total += 1;
                    wrong += usize::from(crate::tensor::argmax(p) != l);
                }
            }
            Some(100.0 * wrong as f64 / total as f64)
        } else {
            None
        };
        log::info!(
            "epoch {} done: mean loss {:.5}{}",
            self.epoch,
            mean_loss,
            error_rate.map_or(String::new(), |e| format!(", online error {e:.2}%"))
        );
        self.epochs.push(EpochMetrics {
            epoch: self.epoch,
            mean_loss,
            error_rate,
        });
        self.epoch += 1;
        self.batch = 0;
    }

    /// Runs to completion, or until `limit` more batches have been adapted.
    /// Returns whether the run is complete.
    pub fn run_batches(&mut self, stream: &Stream<'_>, limit: Option<usize>, observer: &mut dyn StepObserver) -> Result<bool> {
        let mut done = 0usize;
        while !self.is_done() {
            if limit.is_some_and(|l| done >= l) {
                return Ok(false);
            }
            self.step(stream, observer)?;
            done += 1;
        }
        Ok(true)
    }

    /// Builds the report of a completed run.
    pub fn finish(&self, stream: &Stream<'_>) -> Result<AdaptationReport> {
        if !self.is_done() {
            return Err(Error::Precondition("run has unfinished epochs".into()));
        }
        let final_predictions = match self.cfg().protocol {
            Protocol::OnePass => {
                let mut preds = vec![Vec::new(); self.num_samples];
                for r in &self.batches {
                    for (&i, p) in r.indices.iter().zip(&r.predictions) {
                        preds[i] = p.clone();
                    }
                }
                preds
            }
            Protocol::MultiEpoch => {
                let mut preds = Vec::with_capacity(self.num_samples);
                for chunk in stream.images.chunks(self.cfg().batch_size) {
                    preds.extend(self.adapter.predict(chunk)?);
                }
                preds
            }
        };
        Ok(AdaptationReport {
            config: self.cfg().clone(),
            num_samples: self.num_samples,
            batches: self.batches.clone(),
            epochs: self.epochs.clone(),
            final_predictions,
            policy_history: self.policy_history.clone(),
            final_checkpoint: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let runner: Runner = serde_json::from_slice(&bytes)?;
        runner.adapter.cfg.validate()?;
        Ok(runner)
    }
}

/// Adapts over the whole stream.
pub fn run(adapter: Adapter, stream: &Stream<'_>, observer: &mut dyn StepObserver) -> Result<AdaptationReport> {
    let mut runner = Runner::new(adapter, stream.images.len())?;
    runner.run_batches(stream, None, observer)?;
    runner.finish(stream)
}

/// Metrics of a finished report against known labels.
pub fn summarize(report: &AdaptationReport, labels: &[usize], ece_bins: usize) -> Result<eval::Summary> {
    eval::summarize(&report.records(labels)?, ece_bins)
}

use serde::{Deserialize, Serialize};

use crate::augment::ops::{OpKind, ALL_OPS};
use crate::error::{Error, Result};
use crate::nn::OptimizerKind;
use crate::plr::Distance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// One pass; every prediction is logged online.
    #[serde(rename = "N-O")]
    OnePass,
    /// Several passes followed by a separate inference pass.
    #[serde(rename = "N-M")]
    MultiEpoch,
}

impl Protocol {
    pub fn label(self) -> &'static str {
        match self {
            Protocol::OnePass => "N-O",
            Protocol::MultiEpoch => "N-M",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "N-O" | "NO" | "O" => Ok(Protocol::OnePass),
            "N-M" | "NM" | "M" => Ok(Protocol::MultiEpoch),
            _ => Err(Error::Config(format!("unknown protocol `{s}` (expected N-O or N-M)"))),
        }
    }
}

/// Adaptation objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Teacher-student with refined pseudo-labels and adversarial views.
    Tesla,
    /// Frozen source model with stored normalization statistics.
    SourceOnly,
    /// Test-batch entropy minimization over normalization affine parameters.
    EntropyMin,
    /// Self-training on the student's own argmax labels.
    PlHard,
    /// Test-batch normalization statistics, no parameter updates.
    BnStats,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Tesla,
        Method::SourceOnly,
        Method::EntropyMin,
        Method::PlHard,
        Method::BnStats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tesla => "tesla",
            Method::SourceOnly => "source_only",
            Method::EntropyMin => "entropy_min",
            Method::PlHard => "pl_hard",
            Method::BnStats => "bn_stats",
        }
    }

    pub fn updates_parameters(self) -> bool {
        matches!(self, Method::Tesla | Method::EntropyMin | Method::PlHard)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Which network produces the reported predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Student,
    Teacher,
}

fn default_ops() -> Vec<OpKind> {
    ALL_OPS.to_vec()
}

/// Every knob of one adaptation run. Defaults are the CIFAR-10 one-pass
/// classification settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub method: Method,
    pub protocol: Protocol,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Teacher EMA momentum.
    pub alpha: f64,
    /// Weight of the feature-statistics term in the policy loss.
    pub lambda1: f64,
    /// Weight of the distillation term in the student loss.
    pub lambda2: f64,
    /// Nearest neighbors averaged by pseudo-label refinement.
    pub num_neighbors: usize,
    /// Per-class queue capacity.
    pub queue_size: usize,
    pub num_weak_views: usize,
    /// Ops per sub-policy.
    pub policy_dim: usize,
    /// Policy learning rate.
    pub policy_lr: f64,
    #[serde(default = "default_ops")]
    pub policy_ops: Vec<OpKind>,
    pub distance: Distance,
    pub seed: u64,
    /// Record predictions before the batch's update instead of after.
    pub predict_then_adapt: bool,
    pub eval_model: EvalModel,
    /// Visit the stream in a seeded random order (reshuffled every epoch).
    pub shuffle: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            method: Method::Tesla,
            protocol: Protocol::OnePass,
            epochs: 1,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            alpha: 0.99,
            lambda1: 1.0,
            lambda2: 1.0,
            num_neighbors: 1,
            queue_size: 1,
            num_weak_views: 5,
            policy_dim: 2,
            policy_lr: 0.1,
            policy_ops: default_ops(),
            distance: Distance::Cosine,
            seed: 0,
            predict_then_adapt: false,
            eval_model: EvalModel::Student,
            shuffle: false,
        }
    }
}

impl AdaptationConfig {
    /// Multi-epoch defaults: 70 epochs, slower teacher, 4 neighbors over a
    /// 256-entry queue.
    pub fn multi_epoch() -> Self {
        Self {
            protocol: Protocol::MultiEpoch,
            epochs: 70,
            alpha: 0.999,
            num_neighbors: 4,
            queue_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.protocol == Protocol::OnePass && self.epochs != 1 {
            return bad(format!("protocol N-O requires epochs = 1, got {}", self.epochs));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("policy_lr", self.policy_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be finite and non-negative"));
            }
        }
        for (name, v) in [
            ("num_neighbors", self.num_neighbors),
            ("queue_size", self.queue_size),
            ("num_weak_views", self.num_weak_views),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.policy_dim == 0 || self.policy_dim > self.policy_ops.len() {
            return bad(format!(
                "policy_dim {} must be within 1..={}",
                self.policy_dim,
                self.policy_ops.len()
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        AdaptationConfig::default().validate().unwrap();
        AdaptationConfig::multi_epoch().validate().unwrap();
    }

    #[test]
    fn one_pass_rejects_extra_epochs() {
        let cfg = AdaptationConfig {
            epochs: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_nonpositive_values() {
        let cases = [
            AdaptationConfig {
                batch_size: 0,
                ..Default::default()
            },
            AdaptationConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            AdaptationConfig {
                alpha: 1.5,
                ..Default::default()
            },
            AdaptationConfig {
                queue_size: 0,
                ..Default::default()
            },
            AdaptationConfig {
                policy_dim: 15,
                ..Default::default()
            },
            AdaptationConfig {
                lambda2: -1.0,
                ..Default::default()
            },
        ];
        for cfg in cases {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("tent".parse::<Method>().is_err());
        assert_eq!("N-M".parse::<Protocol>().unwrap(), Protocol::MultiEpoch);
        let json = serde_json::to_string(&Protocol::OnePass).unwrap();
        assert_eq!(json, "\"N-O\"");
    }
}

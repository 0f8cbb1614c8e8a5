//! Student and mean-teacher networks sharing one frozen classifier head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{checkpoint, Architecture, SplitModel};

/// The student adapted by gradient descent and its exponential moving
/// average, the teacher. Both start from the same source parameters and the
/// classifier head is never written after initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPair {
    pub student: SplitModel,
    pub teacher: SplitModel,
    /// EMA momentum: `teacher <- alpha * teacher + (1 - alpha) * student`.
    pub alpha: f64,
}

impl ModelPair {
    pub fn from_source(source: SplitModel, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("EMA momentum {alpha} outside [0, 1]")));
        }
        Ok(Self {
            teacher: source.clone(),
            student: source,
            alpha,
        })
    }

    /// Loads source parameters from checkpoint bytes; both networks start as
    /// exact copies.
    pub fn init_from_source(bytes: &[u8], arch: &Architecture, alpha: f64) -> Result<Self> {
        Self::from_source(checkpoint::from_bytes(bytes, Some(arch))?, alpha)
    }

    /// One EMA step over every encoder parameter and normalization buffer.
    /// The head is skipped: it is frozen and already identical in both.
    pub fn ema_update(&mut self) {
        let a = self.alpha;
        let student = self.student.named_tensors();
        for ((name, t), (sname, _, s)) in self.teacher.named_tensors_mut().into_iter().zip(student) {
            debug_assert_eq!(name, sname);
            if name.starts_with("head.") {
                continue;
            }
            for (tv, sv) in t.iter_mut().zip(s) {
                *tv = a * *tv + (1.0 - a) * sv;
            }
        }
    }

    /// Whether student and teacher still share bit-identical heads.
    pub fn heads_identical(&self) -> bool {
        self.student.head_bytes() == self.teacher.head_bytes()
    }
}

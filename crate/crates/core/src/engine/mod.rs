//! Online adaptation: per-batch step, protocols and run state.
//!
//! Within a step the state is mutated in a fixed order: pseudo-labels (and
//! the refinement queue), the augmentation policy, the student, the teacher.
//! Predictions are taken last, or first when `predict_then_adapt` is set.
//! The policy step sees the teacher as it was before this batch's student
//! update.

pub mod adapter;
pub mod config;
pub mod run;

pub use adapter::{Adapter, Stage, StageView, StepObserver, StepOutput};
pub use config::{AdaptationConfig, EvalModel, Method, Protocol};
pub use run::{run, AdaptationReport, BatchRecord, Runner, Stream};

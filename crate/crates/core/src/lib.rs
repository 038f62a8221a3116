//! Dynamic test-time prompt tuning on a toy contrastive classifier.
//!
//! An online buffer of learnable prompts is maintained over a test stream.
//! For every sample the buffer prompts that are both more confident and more
//! input-sensitive than the initial prompt are selected and jointly updated
//! by one entropy-minimization step; when none qualify a fresh copy of the
//! initial prompt is appended, evicting the least recently updated prompt if
//! the buffer is full. Episodic TPT, online TPT and a label-gated oracle are
//! included as baselines, together with synthetic shifted streams and an
//! experiment harness.

pub mod augment;
pub mod buffer;
pub mod error;
pub mod harness;
mod linalg;
pub mod metrics;
pub mod model;
pub mod strategy;
pub mod stream;

pub use augment::{AugConfig, AugmentedSet};
pub use buffer::{PromptBuffer, SelectionResult};
pub use error::{Error, Result};
pub use harness::{RunConfig, RunResult, StrategyConfig, StreamSource};
pub use metrics::PromptScore;
pub use model::{ClassEmbeddings, ModelConfig, ProbVector, Prompt};
pub use strategy::{StepOutcome, StrategyKind, StrategyState};
pub use stream::{DomainSpec, LabeledSample, StreamConfig};

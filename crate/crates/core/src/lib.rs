//! Continual low-rank adapter (LoRA) personalization strategies and the
//! machinery to stress-test them: dense linear algebra primitives, adapter
//! initialization/merging/serialization, the four strategy state machines,
//! a deterministic linear student-teacher testbed, and continual-learning
//! metrics (average score, average forgetting, retention curves).

pub mod adapter;
pub mod metrics;
pub mod numkit;
pub mod sim;
pub mod strategies;

pub use adapter::{merge, BaseWeights, LoraAdapter, OrthMode};
pub use metrics::{CLReport, ScoreMatrix};
pub use numkit::{Matrix, Rng};
pub use sim::{SimConfig, TaskSpec};
pub use strategies::{StrategyKind, StrategyState, TrainContext};

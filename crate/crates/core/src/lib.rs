//! Continual-learning gradient updates by shared / task-specific gradient
//! decomposition.
//!
//! The core step takes the gradient of the current task and the gradients
//! of earlier tasks on their episodic memories, then returns the update
//! direction closest to the current gradient that
//!
//! * does not increase the loss along the mean old-task gradient, and
//! * is orthogonal to every task-specific deviation from that mean.
//!
//! The problem is solved in closed form on the whole parameter vector
//! ([`concatenated_solve`]) or independently per layer ([`layerwise_solve`]).
//! Around the solver sit a small MLP with manual backprop, task-stream
//! generators, episodic memory, the A-GEM / S-GEM / GEM baselines, a
//! sequential trainer and ACC/BWT metrics.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod decomp;
pub mod error;
pub mod layerwise;
pub mod linalg;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod solver;
pub mod tasks;
pub mod trainer;
pub mod verify;

pub use decomp::{shared_gradient, task_specific_gradients, GradientBundle};
pub use error::{Error, Result};
pub use layerwise::{
    concatenated_solve, layerwise_solve, predicted_loss_change, split_by_layer, LossChangeReport,
    ParamLayout, Segment,
};
pub use linalg::{ColumnMatrix, FlatVector, DEFAULT_RANK_TOL};
pub use memory::{Coreset, EpisodicMemory, MemoryPolicy};
pub use metrics::AccuracyMatrix;
pub use model::{Batch, LayerGranularity, MlpModel};
pub use solver::{
    solve_update, Branch, Feasibility, Relaxation, SolverConfig, UpdateMode, UpdateResult,
};
pub use tasks::{Dataset, Scenario, Task, TaskStream};
pub use trainer::{Method, MethodVariant, ReplayScheme, TrainConfig, TrainOutcome};

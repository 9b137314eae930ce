//! Small dense-tensor engine: a reverse-mode autodiff tape, named parameter
//! storage, AdamW and a warmup/cosine learning-rate schedule.
//!
//! Training runs in `f32`; every op is generic over [`Real`] so gradient
//! checks can run the same code in `f64`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod check;
mod error;
mod graph;
mod optim;
mod params;
mod real;
mod scale;
mod schedule;

pub use check::{gradient_check, primitive_suite, CheckConfig, CheckReport};
pub use error::{Result, TensorError};
pub use graph::{DiffTensor, Graph, NodeId};
pub use optim::{adamw_step, OptimizerState};
pub use params::{Param, ParamId, ParamStore};
pub use real::{gemm, Layout, Real};
pub use scale::{grad_scale, mean_scale};
pub use schedule::{lr_at, ScheduleConfig};

//! Toy-scale diffusion schedules, samplers and a learned offset-noise
//! module (OMS) that removes the mean-brightness bias left by schedules
//! whose terminal SNR is not zero.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod param;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use batch::{Batch, NULL_CLASS};
pub use error::{Error, Result};
pub use param::{PredKind, Prediction};
pub use schedule::{Schedule, ScheduleKind};

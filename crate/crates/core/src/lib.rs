//! Few-step generative flows on toy data.
//!
//! * [`tensor`]: dense arrays and a reverse-mode gradient tape.
//! * [`schedule`]: shifted noise schedule, candidate shortcut steps, the
//!   exponential step sampler and noise-span calibration weights.
//! * [`flow`]: velocity network, flow-matching and self-consistency
//!   losses, alternating training, few-step and Euler samplers.
//! * [`anchor`]: degradation pipeline, anchor refinement, the gated
//!   injector and two-stage sampling.
//! * [`datasets`], [`metrics`]: procedural data and evaluation.
//! * [`config`], [`io`]: run configuration and on-disk formats.

pub mod anchor;
pub mod datasets;
pub mod config;
pub mod error;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};

//! Desk-scale distributed K-FAC: Kronecker-factored curvature estimation,
//! damped factor inversion, and a six-stage hybrid data/model-parallel
//! training pipeline over simulated in-process workers.
//!
//! The crate is organized around the pipeline:
//!
//! - [`linalg`]: dense and packed-symmetric matrix arithmetic.
//! - [`model`]: a small layered network (fully-connected, conv2d, batch
//!   norm) whose forward/backward captures the statistics that feed the
//!   Kronecker factors.
//! - [`fim`]: factor construction, factored Tikhonov damping, inversion,
//!   and gradient preconditioning.
//! - [`schedules`]: warmup damping, polynomial learning-rate decay,
//!   ratio-fixed momentum, weight rescaling, refresh intervals.
//! - [`augment`]: running mixup and zero-value random erasing.
//! - [`collectives`]: simulated ReduceScatterV / AllGatherV / AllReduce
//!   with deterministic reduction order and byte accounting.
//! - [`distkfac`]: the per-iteration orchestrator (stages 1-6) plus the
//!   SGD baseline.
//! - [`data`]: synthetic datasets, IDX loading, epoch planning.
//! - [`metrics`]: accuracy and percentile summaries.
//! - [`config`] / [`cli`]: run configuration, presets, and the batch
//!   entry points (train / compare / inspect-fim).

pub mod augment;
pub mod cli;
pub mod collectives;
pub mod config;
pub mod data;
pub mod distkfac;
pub mod fim;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod schedules;
pub mod tensor;

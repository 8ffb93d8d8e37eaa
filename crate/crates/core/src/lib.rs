//! Proactive robust adaptive lane keeping.
//!
//! - [`frrf`]: spatio-temporal estimation of road cornering stiffness from
//!   sparse vehicle reports.
//! - [`vehicle`]: bicycle-model lane-error dynamics and road geometry.
//! - [`l1ac`]: L1 adaptive heading controller.
//! - [`codesign`]: uncertainty bounds, common Lyapunov design, and the joint
//!   choice of filter bandwidth and velocity.
//! - [`fusion`]: posterior fusion and online filter-gain re-tuning.
//! - [`harness`]: scenario files, simulation drivers and output writers.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codesign;
pub mod frrf;
pub mod fusion;
pub mod harness;
pub mod l1ac;
pub mod linalg;
pub mod vehicle;

pub use frrf::{
    AreaId, FilterState, FixedRankResilientFilter, FrrfError, GridSpec, MeasurementBatch, PriorDistribution, QueryEstimate,
    SpatioTemporalModel,
};

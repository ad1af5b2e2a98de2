//! Training laboratory for an orthogonal optimizer on toy Mixture-of-Experts
//! networks.
//!
//! Training alternates regular steps, which update every parameter with a
//! base optimizer and buffer each expert's mean layer inputs, with
//! orthogonal steps, which fold those inputs into per-expert
//! recursive-least-squares projectors and move each expert only along
//! directions the other experts' projectors leave open.

pub mod backprop;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod omoe;
pub mod optim;
pub mod projector;
pub mod tasks;

pub use error::{LabError, Result};
pub use linalg::{Matrix, Rng};
pub use model::{MoEModel, ModelDims, ParamId, RoutingMode};
pub use omoe::{OMoEState, StepKind, StepOutcome};
pub use projector::OrthoProjector;

/// Version string written into every report and checkpoint.
pub const ARTIFACT_VERSION: &str = concat!("omoe-lab ", env!("CARGO_PKG_VERSION"));

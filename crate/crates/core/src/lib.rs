//! Many-demes limit of sparse structured populations: coefficient models,
//! scale-function quadrature, path simulation, excursion sampling, the forest
//! of excursions and the convergence harness that compares them.

pub mod error;
pub mod excursions;
pub mod experiments;
pub mod forest;
pub mod model;
pub mod paths;
pub mod quadrature;
pub mod rng;
pub mod special;
pub mod stats;

pub use error::{Error, Result};

/// Version of the engine, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use model::{CoefficientBundle, SparseInitialCondition};
pub use rng::RngStream;
pub use stats::Estimate;

//! Fleming-Viot particle approximation of the quasi-stationary distribution of a
//! diffusion on the flat torus killed at a smooth rate, together with the
//! deterministic references and diagnostics used to measure its error in the
//! simulation time, the number of particles and the timestep.

pub mod coupling;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod gridref;
pub mod kernel;
pub mod model;
pub mod particles;
pub mod rng;
pub mod stats;
pub mod transport;
pub mod validate;

pub use error::{Error, Result};
pub use geometry::{RhoMetric, TorusPoint};
pub use gridref::{GridDensity, GridKernel};
pub use kernel::StepParams;
pub use model::{CosineFamily, ModelSpec};
pub use particles::{CoupledPair, CouplingMode, InitialLaw, ParticleConfiguration};
pub use rng::RngStream;
pub use transport::DiscreteMeasure;

//! Event-driven simulation and grazing analysis of vibro-impact systems.
//!
//! A system is `x_k' = y_k`, `y_k' = f_k(t, z, mu)` on `x_1 >= 0` with a
//! Newtonian impact law at `x_1 = 0`. The crate integrates such systems,
//! computes Jacobians of their stroboscopic maps, follows periodic orbits to
//! a grazing contact, and builds the linear-algebra and dynamical diagnostics
//! used to detect chaotic dynamics past grazing.

pub mod chaos;
pub mod error;
pub mod fixtures;
pub mod grazing;
pub mod integrator;
pub mod model;
pub mod numeric;
pub mod orbit;
pub mod report;
pub mod variational;

pub use error::{Error, ErrorClass, Result};
pub use integrator::{simulate, stroboscopic_map, IntegratorOptions, Trajectory};
pub use model::{ImpactEvent, State, SystemDefinition};
pub use orbit::{OrbitFamily, OrbitOptions, PeriodicOrbit};

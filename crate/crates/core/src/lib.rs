//! Numerical toolkit for McKean-Vlasov SDEs with superlinear monotone drift:
//! particle and Picard solvers, Freidlin-Wentzell skeletons and rate
//! functions in supremum and Hölder topologies, and desk-scale Monte Carlo
//! verification of small-noise and iterated-logarithm asymptotics.
//!
//! Modules map onto the main objects:
//! * [`path_space`] — grid paths, sup/Hölder/restricted norms, Schauder
//!   coefficients, Cameron-Martin paths.
//! * [`measure_ops`] — empirical measures, exact Wasserstein-2 distances,
//!   measure vector operations.
//! * [`model`] — drift/diffusion coefficient sets, declared regularity
//!   constants and randomized assumption probes.
//! * [`mvsde_solver`] — tamed Euler particle systems and Picard iteration
//!   on the law.
//! * [`skeleton_rate`] — noiseless flow, controlled skeletons, rate
//!   functions of paths and events.
//! * [`ldp_harness`] — Monte Carlo verification of the large-deviation
//!   bounds and the Gaussian path-space inequalities.
//! * [`strassen_lil`] — contraction systems, rescaled processes and the
//!   functional iterated-logarithm benchmark.

pub mod error;
pub mod ldp_harness;
pub mod measure_ops;
pub mod model;
pub mod mvsde_solver;
mod optim;
pub mod path_space;
pub mod report;
pub mod rng;
pub mod skeleton_rate;
pub mod strassen_lil;

pub use error::{Error, Result};
pub use measure_ops::EmpiricalMeasure;
pub use path_space::{CameronMartinPath, Path};

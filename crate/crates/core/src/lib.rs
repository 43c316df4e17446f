//! Simulation and analysis of a three-baseline biphoton positioning system.
//!
//! * [`geometry`]: points, baselines and the forward delay model.
//! * [`photonics`]: coincidence-rate dip, scan simulation and dip fitting.
//! * [`solver`]: inversion of the three hyperboloid equations.
//! * [`gdop`]: delay-error to position-error propagation.
//! * [`scenarios`]: reference layouts and field scans.
//! * [`cli`]: the `qps` command-line interface.

pub mod cli;
pub mod error;
pub mod gdop;
pub mod geometry;
pub mod photonics;
pub mod scenarios;
pub mod solver;

pub use error::{QpsError, Result};
pub use gdop::{ErrorEstimate, SensitivityMatrix};
pub use geometry::{Baseline, Constellation, OpticalDelay, Point3, SPEED_OF_LIGHT};
pub use photonics::{BalanceEstimate, DipScan, HomConfig};
pub use scenarios::{FieldGrid, LeoConfig, TerrestrialConfig};
pub use solver::{DelayTriple, SolveResult};

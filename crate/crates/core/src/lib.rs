//! Tactile force-transfer workbench.
//!
//! The pipeline runs end to end on simulated data:
//!
//! - [`scenario`]: indenter catalog (signed-distance shapes) and contact trajectories.
//! - [`mpm`]: explicit material-point simulation of the elastomer under an indenter.
//! - [`imaging`]: reference marker patterns, warping, binary rasterization and PBM I/O.
//! - [`unify`]: taxel-to-marker conversion, marker segmentation and tracking.
//! - [`m2m`]: marker-to-marker image translation through a thin-plate-spline field.
//! - [`force`]: recurrent force regression, metrics and material compensation.
//! - [`workbench`]: dataset manifests and the experiment commands behind the CLI.

pub mod error;
pub mod force;
pub mod imaging;
pub mod m2m;
pub mod mpm;
pub mod scenario;
pub mod unify;
pub mod workbench;

pub use error::{Error, Result};

//! Diffeomorphic shape registration by geodesic shooting, GP-PCA surrogates
//! of simulation outputs and Bayesian calibration of simulation parameters
//! against a measured shape.

pub mod calibration;
pub mod error;
pub mod grid;
mod hexf;
pub mod io;
pub mod kernels;
pub mod pipeline;
pub mod points;
pub mod prealign;
pub mod shapes;
pub mod shooting;
pub mod surrogate;
pub mod toy;

pub use error::{Error, Result};
pub use grid::GridGeometry;
pub use kernels::KernelSpec;
pub use points::PointCloud;
pub use shapes::{CurveShape, GridImage, LandmarkShape, MatchKind, MatchSpec, Momentum, Shape, ShapeKind};
pub use shooting::{GeodesicSolution, Scheme, ShootingConfig};

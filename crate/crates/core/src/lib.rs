//! Photoacoustic tomography on a disk: a variable-speed wave solver, time
//! reversal with harmonic extension, Neumann-series reconstruction, and the
//! Carleman/observability constants that control its convergence.

pub mod carleman;
pub mod config;
pub mod error;
pub mod field;
pub mod geodesics;
pub mod geometry;
pub mod interp;
pub mod io;
pub mod linsolve;
pub mod neumann;
pub mod norms;
pub mod time_reversal;
pub mod trace;
pub mod wave;

pub use error::{Error, Result};
pub use field::{Grid2D, ScalarField, SmoothBump, SpeedField};
pub use geometry::{build_disk_domain, CompactSupport, DomainMask, NodeClass};
pub use trace::BoundaryTrace;

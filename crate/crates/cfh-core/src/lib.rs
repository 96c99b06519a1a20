//! Construction and verification of generic conformally flat hypersurfaces in
//! R^4 built from constant-curvature seed 2-metrics.
//!
//! The pipeline runs in five stages, each with its own module:
//!
//! 1. [`seeds`]: closed-form and ODE-backed seed data on a 2D window, in
//!    extended precision.
//! 2. [`initial_data`]: derived curvature quantities and admissibility checks
//!    for the seed, plus the one-form reconstruction cross-checks.
//! 3. [`evolution`]: z-evolution of the angle/potential fields as truncated
//!    Taylor jets, cross-checked by a method-of-lines integrator.
//! 4. [`frames`]: moving-frame transport in the 3-sphere and position
//!    reconstruction of the hypersurface in R^4.
//! 5. [`surface`]: intrinsic verification of an arbitrary immersed surface
//!    mesh, canonical form recovery, and the dual surface suite.
//!
//! Supporting modules: [`scalar`] (generic f64 / double-double arithmetic),
//! [`field`] (grids, finite differences, norms, CSV IO), [`jet`] (truncated
//! power series in z over 2D fields), [`ode`] (adaptive Runge-Kutta),
//! [`guichard`] (residual suites for the coupled angle system), [`report`] and
//! [`config`] (run manifests), [`vtk`] (legacy mesh export).

pub mod config;
pub mod error;
pub mod evolution;
pub mod field;
pub mod frames;
pub mod guichard;
pub mod initial_data;
pub mod jet;
pub mod ode;
pub mod report;
pub mod scalar;
pub mod seeds;
pub mod surface;
pub mod vtk;

pub use error::{CfhError, Result};
pub use scalar::{Dd, Real};

/// Concrete f64 aliases for the generic containers; the diagnostics and IO
/// layers work in these.
pub type Field2 = field::Field2<f64>;
pub type Field3 = field::Field3<f64>;

/// Install the global compute thread pool honoring the `CFH_THREADS`
/// environment variable. Call once at process start; later calls are no-ops.
/// Without it the default rayon pool (all cores) is used.
pub fn init_threads() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        if let Ok(n) = std::env::var("CFH_THREADS") {
            if let Ok(n) = n.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

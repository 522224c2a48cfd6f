//! Spatio-temporal calibration of two roadside lidar sensors from the object
//! trajectories each of them tracks.
//!
//! The pipeline extracts motion features per tracked position, matches them
//! across sensors, filters the candidates with spatial context, and solves
//! for the rotation, translation and clock offset that map the second sensor
//! onto the first.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod error;
pub mod estimator;
pub mod eval;
pub mod features;
pub mod io;
pub mod matcher;
pub mod model;
pub mod pipeline;
pub mod simulator;
pub mod store;

pub use error::{Error, Result};
pub use model::{BoundingBox, ObjectClass, PosRef, Position, TrackId, Trajectory, TrajectoryDatabase, Transform4D};

/// Formats a float with six significant digits for human-facing output.
pub fn fmt6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-5..=9).contains(&mag) {
        let decimals = (5 - mag).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

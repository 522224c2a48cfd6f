//! Per-position motion descriptors that do not change under rotation,
//! translation or clock shift: turning cosine and windowed speed statistics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{PosRef, Trajectory, TrajectoryDatabase};

pub const DEFAULT_WINDOW: usize = 3;

/// Segments shorter than this are treated as stationary.
const MIN_SEGMENT: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionFeature {
    /// Cosine of the angle at the position between the backward and forward
    /// segments; -1 for straight motion.
    pub curvature: f64,
    pub velocity_mean: f64,
    pub velocity_variance: f64,
    pub valid: bool,
}

impl MotionFeature {
    pub const INVALID: MotionFeature = MotionFeature {
        curvature: 0.0,
        velocity_mean: 0.0,
        velocity_variance: 0.0,
        valid: false,
    };

    pub fn velocity_std(&self) -> f64 {
        self.velocity_variance.sqrt()
    }
}

/// Speeds of the n-1 segments, `v_i = |P_{i+1} - P_i| / (t_{i+1} - t_i)`.
pub fn segment_velocities(traj: &Trajectory) -> Result<Vec<f64>> {
    let ps = traj.positions();
    if ps.len() < 2 {
        return Err(Error::EmptyTrajectory);
    }
    ps.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let dt = w[1].t - w[0].t;
            if !(dt > 0.0) {
                return Err(Error::DegenerateTimestep {
                    track_id: traj.track_id().to_string(),
                    index: i + 1,
                });
            }
            Ok((w[1].location - w[0].location).norm() / dt)
        })
        .collect()
}

/// Mean and population variance of `velocities[i-m ..= i+m-1]`, clipped to
/// the available range. `v_j` is the speed leaving position `j`.
///
/// Returns `None` when the clipped window is empty.
pub fn velocity_stats(velocities: &[f64], i: usize, m: usize) -> Option<(f64, f64)> {
    let lo = i.saturating_sub(m);
    let hi = (i + m).min(velocities.len());
    if lo >= hi {
        return None;
    }
    let window = &velocities[lo..hi];
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var))
}

/// Cosine of the angle at `P_i` between `P_i -> P_{i-1}` and `P_i -> P_{i+1}`.
pub fn curvature(traj: &Trajectory, i: usize) -> Result<f64> {
    let ps = traj.positions();
    if i == 0 || i + 1 >= ps.len() {
        return Err(Error::InvalidInput(format!(
            "curvature needs neighbours on both sides of index {i} (trajectory length {})",
            ps.len()
        )));
    }
    let back = ps[i - 1].location - ps[i].location;
    let fwd = ps[i + 1].location - ps[i].location;
    let (nb, nf) = (back.norm(), fwd.norm());
    if nb < MIN_SEGMENT || nf < MIN_SEGMENT {
        return Err(Error::DegenerateSegment { index: i });
    }
    Ok((back.dot(&fwd) / (nb * nf)).clamp(-1.0, 1.0))
}

/// Features for every position of one trajectory, index-aligned.
pub fn trajectory_features(traj: &Trajectory, m: usize) -> Result<Vec<MotionFeature>> {
    let n = traj.len();
    if n < 2 {
        return Ok(vec![MotionFeature::INVALID; n]);
    }
    let velocities = segment_velocities(traj)?;
    Ok((0..n)
        .map(|i| {
            let stats = velocity_stats(&velocities, i, m);
            let curv = if i == 0 || i + 1 == n {
                None
            } else {
                curvature(traj, i).ok()
            };
            match (curv, stats) {
                (Some(c), Some((mean, var))) => MotionFeature {
                    curvature: c,
                    velocity_mean: mean,
                    velocity_variance: var,
                    valid: true,
                },
                _ => MotionFeature::INVALID,
            }
        })
        .collect())
}

/// Motion features for a whole database, aligned with its trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDatabase {
    features: Vec<Vec<MotionFeature>>,
}

impl FeatureDatabase {
    /// Wraps precomputed features; rows are per trajectory.
    pub fn from_rows(features: Vec<Vec<MotionFeature>>) -> Self {
        FeatureDatabase { features }
    }

    pub fn trajectories(&self) -> &[Vec<MotionFeature>] {
        &self.features
    }

    pub fn get(&self, r: PosRef) -> &MotionFeature {
        &self.features[r.traj][r.pos]
    }

    pub fn num_valid(&self) -> usize {
        self.features.iter().flatten().filter(|f| f.valid).count()
    }

    /// Valid features in database order.
    pub fn valid(&self) -> Vec<(PosRef, MotionFeature)> {
        self.features
            .iter()
            .enumerate()
            .flat_map(|(ti, fs)| {
                fs.iter()
                    .enumerate()
                    .filter(|(_, f)| f.valid)
                    .map(move |(pi, f)| (PosRef::new(ti, pi), *f))
            })
            .collect()
    }
}

pub fn extract_features(db: &TrajectoryDatabase, m: usize) -> Result<FeatureDatabase> {
    let features = db
        .trajectories()
        .par_iter()
        .map(|t| trajectory_features(t, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureDatabase { features })
}

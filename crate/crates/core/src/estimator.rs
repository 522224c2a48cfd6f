//! Transform estimation from matched positions.
//!
//! The spatial part is the closed-form least-squares rotation and translation
//! (cross-covariance SVD, no scale). The clock offset is the weighted median
//! of matched timestamp differences, refined below the frame period by a
//! golden-section search over trajectory alignment.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::model::{Position, Trajectory, Transform4D};

/// Second singular value of the cross-covariance below this fraction of the
/// first marks the correspondences as collinear.
pub const DEGENERACY_RATIO: f64 = 1e-6;

/// Precision of the sub-frame offset search, seconds.
pub const OFFSET_PRECISION: f64 = 1e-5;

/// Matched `(P, Q)` positions with optional non-negative weights.
#[derive(Clone, Debug, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(Position, Position)>,
    pub weights: Option<Vec<f64>>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(Position, Position)>) -> Self {
        CorrespondenceSet { pairs, weights: None }
    }

    pub fn with_weights(pairs: Vec<(Position, Position)>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != pairs.len() {
            return Err(Error::InvalidInput("one weight per pair required".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidInput(
                "weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(CorrespondenceSet {
            pairs,
            weights: Some(weights),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialSolution {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub rms_residual: f64,
}

impl SpatialSolution {
    pub fn apply(&self, q: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * q + self.translation
    }
}

/// Rigid `(R, T)` minimising `sum w_i |p_i - (R q_i + T)|^2`.
pub fn solve_spatial(c: &CorrespondenceSet) -> Result<SpatialSolution> {
    let p: Vec<_> = c.pairs.iter().map(|(a, _)| a.location).collect();
    let q: Vec<_> = c.pairs.iter().map(|(_, b)| b.location).collect();
    let w: Vec<_> = (0..c.len()).map(|i| c.weight(i)).collect();
    rigid_fit(&p, &q, &w)
}

/// Weighted Kabsch fit of `p ≈ R q + T` on raw point lists.
pub fn rigid_fit(p: &[Vector3<f64>], q: &[Vector3<f64>], w: &[f64]) -> Result<SpatialSolution> {
    let n = p.len();
    if n < 3 {
        return Err(Error::TooFewPairs(n));
    }
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::InvalidInput("weights sum to zero".into()));
    }
    let pc = p.iter().zip(w).map(|(x, wi)| x * *wi).sum::<Vector3<f64>>() / wsum;
    let qc = q.iter().zip(w).map(|(x, wi)| x * *wi).sum::<Vector3<f64>>() / wsum;
    let mut h = Matrix3::zeros();
    for i in 0..n {
        h += (q[i] - qc) * (p[i] - pc).transpose() * w[i];
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = svd.singular_values;
    let mut sorted = [s[0], s[1], s[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    let ratio = if sorted[0] > 0.0 { sorted[1] / sorted[0] } else { 0.0 };
    if !(ratio >= DEGENERACY_RATIO) {
        return Err(Error::DegenerateGeometry { ratio });
    }
    let mut v = v_t.transpose();
    if (v * u.transpose()).determinant() < 0.0 {
        let k = (0..3).min_by(|a, b| s[*a].total_cmp(&s[*b])).unwrap();
        v.column_mut(k).neg_mut();
    }
    let r = v * u.transpose();
    let rotation = UnitQuaternion::from_matrix(&r);
    let translation = pc - rotation * qc;
    let sq: f64 = (0..n)
        .map(|i| w[i] * (p[i] - (rotation * q[i] + translation)).norm_squared())
        .sum();
    Ok(SpatialSolution {
        rotation,
        translation,
        rms_residual: (sq / wsum).sqrt(),
    })
}

/// Lower weighted median of `(value, weight)` pairs.
pub fn weighted_median(items: &mut [(f64, f64)]) -> Option<f64> {
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = items.iter().map(|x| x.1).sum();
    if items.is_empty() || !(total > 0.0) {
        return None;
    }
    let mut acc = 0.0;
    for (v, w) in items.iter() {
        acc += w;
        if acc >= total / 2.0 {
            return Some(*v);
        }
    }
    items.last().map(|x| x.0)
}

/// Weighted median of `t_p - t_q` over the matched pairs.
pub fn estimate_time_offset_coarse(c: &CorrespondenceSet) -> Result<f64> {
    if c.is_empty() {
        return Err(Error::TooFewPairs(0));
    }
    let mut diffs: Vec<(f64, f64)> = c
        .pairs
        .iter()
        .enumerate()
        .map(|(i, (p, q))| (p.t - q.t, c.weight(i)))
        .collect();
    weighted_median(&mut diffs).ok_or(Error::TooFewPairs(0))
}

/// Location at time `t` from a least-squares line through the four samples
/// bracketing `t` (two on each side, fewer at the ends).
pub fn local_linear(traj: &Trajectory, t: f64) -> Option<Vector3<f64>> {
    let ps = traj.positions();
    let n = ps.len();
    if n == 0 || t < ps[0].t || t > ps[n - 1].t {
        return None;
    }
    if n == 1 {
        return Some(ps[0].location);
    }
    let i = ps.partition_point(|p| p.t < t).clamp(1, n - 1);
    let lo = i.saturating_sub(2);
    let hi = (i + 2).min(n);
    let window = &ps[lo..hi];
    let k = window.len() as f64;
    let tm = window.iter().map(|p| p.t).sum::<f64>() / k;
    let xm = window.iter().map(|p| p.location).sum::<Vector3<f64>>() / k;
    let mut stt = 0.0;
    let mut stx = Vector3::zeros();
    for p in window {
        let dt = p.t - tm;
        stt += dt * dt;
        stx += (p.location - xm) * dt;
    }
    Some(xm + stx / stt * (t - tm))
}

/// Mean squared distance between the smoothed P trajectory and the smoothed,
/// spatially mapped Q trajectory, sampled at P's timestamps, for offset `dt`.
fn alignment_cost(pairs: &[(&Trajectory, &Trajectory)], spatial: &SpatialSolution, dt: f64) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in pairs {
        for p in a.positions() {
            let Some(q) = local_linear(b, p.t - dt) else {
                continue;
            };
            let Some(ps) = local_linear(a, p.t) else {
                continue;
            };
            sum += (ps - spatial.apply(&q)).norm_squared();
            n += 1;
        }
    }
    (sum, n)
}

/// Minimises a function on `[lo, hi]` by golden-section search.
pub fn golden_section_minimize(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a) > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    x.clamp(lo, hi)
}

/// Sub-frame clock offset: minimises the mean squared distance between matched
/// trajectories over `[coarse - halfwidth, coarse + halfwidth]`.
pub fn refine_time_offset(
    pairs: &[(&Trajectory, &Trajectory)],
    spatial: &SpatialSolution,
    coarse: f64,
    search_halfwidth: f64,
) -> Result<f64> {
    if alignment_cost(pairs, spatial, coarse).1 == 0 {
        return Err(Error::InsufficientOverlap);
    }
    let cost = |dt: f64| {
        let (s, n) = alignment_cost(pairs, spatial, dt);
        if n == 0 {
            f64::INFINITY
        } else {
            s / n as f64
        }
    };
    let lo = coarse - search_halfwidth;
    let hi = coarse + search_halfwidth;
    Ok(golden_section_minimize(cost, lo, hi, OFFSET_PRECISION))
}

/// Full Q-to-P transform: rigid fit, median offset, then sub-frame refinement
/// over `matched` trajectory pairs when any are given.
pub fn solve(
    c: &CorrespondenceSet,
    matched: &[(&Trajectory, &Trajectory)],
    search_halfwidth: f64,
) -> Result<Transform4D> {
    let spatial = solve_spatial(c)?;
    let coarse = estimate_time_offset_coarse(c)?;
    let offset = if matched.is_empty() {
        coarse
    } else {
        refine_time_offset(matched, &spatial, coarse, search_halfwidth)?
    };
    Ok(Transform4D::new(spatial.rotation, spatial.translation, offset))
}

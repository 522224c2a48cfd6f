//! Candidate position correspondences between two sensors.
//!
//! Every valid position of P is paired with its nearest position of Q in
//! motion-feature space. The raw list is then pruned by four pair-local
//! semantic checks: mutual nearest neighbour, bounding-box/class agreement,
//! neighbour-count agreement and agreement of the neighbour-count profile over
//! adjacent frames.
//!
//! Neighbour counts are taken in each endpoint's own frame of its own
//! database, so the checks need no clock alignment between the sensors.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureDatabase, MotionFeature};
use crate::model::{PosRef, TrajectoryDatabase};

/// Weights of the L1 feature distance and the acceptance threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchWeights {
    pub lambda_c: f64,
    pub lambda_alpha: f64,
    pub lambda_sigma: f64,
    pub d_th: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            lambda_c: 1.0,
            lambda_alpha: 1.0,
            lambda_sigma: 0.5,
            d_th: 0.5,
        }
    }
}

impl MatchWeights {
    pub fn validate(&self) -> Result<()> {
        let ls = [self.lambda_c, self.lambda_alpha, self.lambda_sigma];
        if ls.iter().chain([&self.d_th]).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "match weights and d_th must be finite and non-negative".into(),
            ));
        }
        if !ls.iter().any(|v| *v > 0.0) {
            return Err(Error::InvalidInput("at least one match weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    /// Maximum |dl| + |dw| + |dh| in meters.
    pub bbox_tolerance: f64,
    pub neighbor_radius: f64,
    pub count_tolerance: usize,
    /// Frames inspected on each side for the neighbourhood profile.
    pub k_frames: usize,
    pub hist_tolerance: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            bbox_tolerance: 0.5,
            neighbor_radius: 15.0,
            count_tolerance: 1,
            k_frames: 5,
            hist_tolerance: 2,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.bbox_tolerance >= 0.0) || !(self.neighbor_radius > 0.0) {
            return Err(Error::InvalidInput(
                "bbox_tolerance must be >= 0 and neighbor_radius > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of each semantic check; `None` when the check was not evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FilterFlags {
    pub mutual: Option<bool>,
    pub bbox: Option<bool>,
    pub count: Option<bool>,
    pub hist: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionMatch {
    pub p: PosRef,
    pub q: PosRef,
    pub feature_distance: f64,
    pub flags: FilterFlags,
}

#[inline]
fn raw_distance(a: &MotionFeature, b: &MotionFeature, w: &MatchWeights) -> f64 {
    w.lambda_c * (a.curvature - b.curvature).abs()
        + w.lambda_alpha * (a.velocity_mean - b.velocity_mean).abs()
        + w.lambda_sigma * (a.velocity_std() - b.velocity_std()).abs()
}

/// Weighted L1 distance over curvature, mean speed and speed standard deviation.
pub fn feature_distance(a: &MotionFeature, b: &MotionFeature, w: &MatchWeights) -> Result<f64> {
    if !a.valid || !b.valid {
        return Err(Error::InvalidFeature);
    }
    Ok(raw_distance(a, b, w))
}

/// Compact copy of the valid features for the nearest-neighbour scans, with
/// rows also ordered by mean speed so scans can stop early.
struct FeatureTable {
    refs: Vec<PosRef>,
    // curvature, mean, std
    rows: Vec<[f64; 3]>,
    by_speed: Vec<usize>,
    speeds: Vec<f64>,
}

impl FeatureTable {
    fn new(fdb: &FeatureDatabase) -> Self {
        let valid = fdb.valid();
        let rows: Vec<[f64; 3]> = valid
            .iter()
            .map(|(_, f)| [f.curvature, f.velocity_mean, f.velocity_std()])
            .collect();
        let mut by_speed: Vec<usize> = (0..rows.len()).collect();
        by_speed.sort_by(|a, b| rows[*a][1].total_cmp(&rows[*b][1]).then(a.cmp(b)));
        let speeds = by_speed.iter().map(|i| rows[*i][1]).collect();
        FeatureTable {
            refs: valid.iter().map(|(r, _)| *r).collect(),
            rows,
            by_speed,
            speeds,
        }
    }

    /// Index and distance of the nearest row; earliest row wins ties.
    ///
    /// Walks outward from `x`'s mean speed; the speed term alone bounds the
    /// distance from below, so the walk ends once it exceeds the best found.
    fn nearest(&self, x: &[f64; 3], w: &MatchWeights) -> Option<(usize, f64)> {
        let dist = |r: &[f64; 3]| {
            w.lambda_c * (x[0] - r[0]).abs()
                + w.lambda_alpha * (x[1] - r[1]).abs()
                + w.lambda_sigma * (x[2] - r[2]).abs()
        };
        let mut best: Option<(usize, f64)> = None;
        let consider = |best: &mut Option<(usize, f64)>, i: usize| {
            let d = dist(&self.rows[i]);
            if best.is_none_or(|(bi, bd)| d < bd || (d == bd && i < bi)) {
                *best = Some((i, d));
            }
        };
        let bound_exceeds = |k: usize, best: Option<(usize, f64)>| {
            best.is_some_and(|(_, bd)| w.lambda_alpha * (x[1] - self.speeds[k]).abs() > bd)
        };
        let start = self.speeds.partition_point(|s| *s < x[1]);
        let (mut lo, mut hi) = (start, start);
        let mut lo_open = lo > 0;
        let mut hi_open = hi < self.speeds.len();
        while lo_open || hi_open {
            if hi_open {
                if bound_exceeds(hi, best) {
                    hi_open = false;
                } else {
                    consider(&mut best, self.by_speed[hi]);
                    hi += 1;
                    hi_open = hi < self.speeds.len();
                }
            }
            if lo_open {
                if bound_exceeds(lo - 1, best) {
                    lo_open = false;
                } else {
                    consider(&mut best, self.by_speed[lo - 1]);
                    lo -= 1;
                    lo_open = lo > 0;
                }
            }
        }
        best
    }
}

fn row_of(f: &MotionFeature) -> [f64; 3] {
    [f.curvature, f.velocity_mean, f.velocity_std()]
}

/// For each valid P position, its nearest Q position, kept when closer than `d_th`.
pub fn motion_match(fp: &FeatureDatabase, fq: &FeatureDatabase, w: &MatchWeights) -> Vec<PositionMatch> {
    let table = FeatureTable::new(fq);
    if table.refs.is_empty() {
        return Vec::new();
    }
    fp.valid()
        .par_iter()
        .filter_map(|(pr, f)| {
            let (qi, d) = table.nearest(&row_of(f), w)?;
            (d < w.d_th).then(|| PositionMatch {
                p: *pr,
                q: table.refs[qi],
                feature_distance: d,
                flags: FilterFlags::default(),
            })
        })
        .collect()
}

/// Keeps a pair only when each endpoint is the other's nearest neighbour.
pub fn filter_mutual_nn(
    matches: &[PositionMatch],
    fp: &FeatureDatabase,
    fq: &FeatureDatabase,
    w: &MatchWeights,
) -> Vec<PositionMatch> {
    annotate_mutual(matches, fp, fq, w)
        .into_iter()
        .filter(|m| m.flags.mutual == Some(true))
        .collect()
}

fn annotate_mutual(
    matches: &[PositionMatch],
    fp: &FeatureDatabase,
    fq: &FeatureDatabase,
    w: &MatchWeights,
) -> Vec<PositionMatch> {
    let tp = FeatureTable::new(fp);
    let tq = FeatureTable::new(fq);
    let nearest_of = |table: &FeatureTable, f: &MotionFeature| table.nearest(&row_of(f), w).map(|(i, _)| table.refs[i]);
    // Each endpoint is looked up once even if it appears in many pairs.
    let mut qs: Vec<PosRef> = matches.iter().map(|m| m.q).collect();
    qs.sort_unstable();
    qs.dedup();
    let q_best: HashMap<PosRef, Option<PosRef>> = qs.par_iter().map(|q| (*q, nearest_of(&tp, fq.get(*q)))).collect();
    let mut ps: Vec<PosRef> = matches.iter().map(|m| m.p).collect();
    ps.sort_unstable();
    ps.dedup();
    let p_best: HashMap<PosRef, Option<PosRef>> = ps.par_iter().map(|p| (*p, nearest_of(&tq, fp.get(*p)))).collect();
    matches
        .iter()
        .map(|m| {
            let ok = fp.get(m.p).valid && fq.get(m.q).valid && p_best[&m.p] == Some(m.q) && q_best[&m.q] == Some(m.p);
            let mut m = *m;
            m.flags.mutual = Some(ok);
            m
        })
        .collect()
}

fn bbox_ok(m: &PositionMatch, db_p: &TrajectoryDatabase, db_q: &TrajectoryDatabase, eps: f64) -> bool {
    let (a, b) = (db_p.position(m.p), db_q.position(m.q));
    a.class == b.class && a.bbox.l1_distance(&b.bbox) <= eps
}

/// Keeps pairs of the same class whose boxes differ by at most `eps` in L1.
pub fn filter_bbox(
    matches: &[PositionMatch],
    db_p: &TrajectoryDatabase,
    db_q: &TrajectoryDatabase,
    eps: f64,
) -> Vec<PositionMatch> {
    retain_with(matches, |m| {
        let ok = bbox_ok(m, db_p, db_q, eps);
        m.flags.bbox = Some(ok);
        ok
    })
}

/// A database with a frame lookup for neighbourhood queries.
pub struct IndexedDatabase<'a> {
    db: &'a TrajectoryDatabase,
    by_frame: HashMap<u64, Vec<PosRef>>,
}

impl<'a> IndexedDatabase<'a> {
    pub fn new(db: &'a TrajectoryDatabase) -> Self {
        let mut by_frame: HashMap<u64, Vec<PosRef>> = HashMap::new();
        for (ti, t) in db.trajectories().iter().enumerate() {
            for (pi, p) in t.positions().iter().enumerate() {
                by_frame.entry(p.frame).or_default().push(PosRef::new(ti, pi));
            }
        }
        IndexedDatabase { db, by_frame }
    }

    pub fn db(&self) -> &'a TrajectoryDatabase {
        self.db
    }

    /// Positions of other trajectories within `radius` of `r`, in `r`'s frame.
    pub fn neighbor_count(&self, r: PosRef, radius: f64) -> usize {
        let me = self.db.position(r);
        self.by_frame.get(&me.frame).map_or(0, |refs| {
            refs.iter()
                .filter(|o| o.traj != r.traj && self.db.position(**o).distance(me) <= radius)
                .count()
        })
    }

    /// Neighbour count of trajectory `traj` at `frame`, if it was observed then.
    pub fn neighbor_count_at(&self, traj: usize, frame: u64, radius: f64) -> Option<usize> {
        let pos = self.db.trajectories()[traj].index_of_frame(frame)?;
        Some(self.neighbor_count(PosRef::new(traj, pos), radius))
    }

    /// Neighbour counts at frame offsets -k..-1, +1..+k around `r`.
    fn profile(&self, r: PosRef, radius: f64, k: usize) -> Vec<Option<usize>> {
        let frame = self.db.position(r).frame as i64;
        (1..=k as i64)
            .flat_map(|j| [frame - j, frame + j])
            .map(|f| {
                if f < 0 {
                    None
                } else {
                    self.neighbor_count_at(r.traj, f as u64, radius)
                }
            })
            .collect()
    }
}

fn count_ok(m: &PositionMatch, ip: &IndexedDatabase, iq: &IndexedDatabase, radius: f64, tol: usize) -> bool {
    ip.neighbor_count(m.p, radius).abs_diff(iq.neighbor_count(m.q, radius)) <= tol
}

/// Keeps pairs whose neighbour counts within `radius` differ by at most `count_tol`.
pub fn filter_neighbor_count(
    matches: &[PositionMatch],
    ip: &IndexedDatabase,
    iq: &IndexedDatabase,
    radius: f64,
    count_tol: usize,
) -> Vec<PositionMatch> {
    retain_with(matches, |m| {
        let ok = count_ok(m, ip, iq, radius, count_tol);
        m.flags.count = Some(ok);
        ok
    })
}

/// L1 distance between the neighbour-count profiles of the two endpoints over
/// `k` frames on each side. Offsets where either object was not observed are
/// left out.
pub fn neighborhood_distance(
    m: &PositionMatch,
    ip: &IndexedDatabase,
    iq: &IndexedDatabase,
    radius: f64,
    k: usize,
) -> usize {
    let a = ip.profile(m.p, radius, k);
    let b = iq.profile(m.q, radius, k);
    a.iter()
        .zip(&b)
        .filter_map(|(x, y)| Some(x.as_ref()?.abs_diff(*y.as_ref()?)))
        .sum()
}

/// Keeps pairs whose neighbourhood profiles over adjacent frames agree within `hist_tol`.
pub fn filter_neighborhood_distribution(
    matches: &[PositionMatch],
    ip: &IndexedDatabase,
    iq: &IndexedDatabase,
    radius: f64,
    k_frames: usize,
    hist_tol: usize,
) -> Vec<PositionMatch> {
    retain_with(matches, |m| {
        let ok = neighborhood_distance(m, ip, iq, radius, k_frames) <= hist_tol;
        m.flags.hist = Some(ok);
        ok
    })
}

fn retain_with(matches: &[PositionMatch], mut pred: impl FnMut(&mut PositionMatch) -> bool) -> Vec<PositionMatch> {
    matches
        .iter()
        .filter_map(|m| {
            let mut m = *m;
            pred(&mut m).then_some(m)
        })
        .collect()
}

/// Mutual nearest neighbour first, then the three pair-local checks.
pub fn filter_cascade(
    matches: &[PositionMatch],
    fp: &FeatureDatabase,
    fq: &FeatureDatabase,
    ip: &IndexedDatabase,
    iq: &IndexedDatabase,
    w: &MatchWeights,
    params: &FilterParams,
) -> Vec<PositionMatch> {
    let kept = filter_mutual_nn(matches, fp, fq, w);
    let kept = filter_bbox(&kept, ip.db(), iq.db(), params.bbox_tolerance);
    let kept = filter_neighbor_count(&kept, ip, iq, params.neighbor_radius, params.count_tolerance);
    filter_neighborhood_distribution(
        &kept,
        ip,
        iq,
        params.neighbor_radius,
        params.k_frames,
        params.hist_tolerance,
    )
}

/// Evaluates every check on every match without dropping any.
pub fn annotate_all(
    matches: &[PositionMatch],
    fp: &FeatureDatabase,
    fq: &FeatureDatabase,
    ip: &IndexedDatabase,
    iq: &IndexedDatabase,
    w: &MatchWeights,
    params: &FilterParams,
) -> Vec<PositionMatch> {
    let mut out = annotate_mutual(matches, fp, fq, w);
    for m in &mut out {
        m.flags.bbox = Some(bbox_ok(m, ip.db(), iq.db(), params.bbox_tolerance));
        m.flags.count = Some(count_ok(m, ip, iq, params.neighbor_radius, params.count_tolerance));
        m.flags.hist =
            Some(neighborhood_distance(m, ip, iq, params.neighbor_radius, params.k_frames) <= params.hist_tolerance);
    }
    out
}

/// Debug dump: `p_track,p_frame,q_track,q_frame,dist,mutual,bbox,count,hist`.
pub fn write_matches_csv<W: Write>(
    matches: &[PositionMatch],
    db_p: &TrajectoryDatabase,
    db_q: &TrajectoryDatabase,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "p_track", "p_frame", "q_track", "q_frame", "dist", "mutual", "bbox", "count", "hist",
    ])?;
    let flag = |f: Option<bool>| match f {
        Some(true) => "1",
        Some(false) => "0",
        None => "",
    };
    for m in matches {
        let (a, b) = (db_p.position(m.p), db_q.position(m.q));
        w.write_record([
            a.track_id.as_str(),
            &a.frame.to_string(),
            b.track_id.as_str(),
            &b.frame.to_string(),
            &crate::fmt6(m.feature_distance),
            flag(m.flags.mutual),
            flag(m.flags.bbox),
            flag(m.flags.count),
            flag(m.flags.hist),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract_features;
    use crate::model::{BoundingBox, ObjectClass, Position, TrackId, Trajectory};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feat(c: f64, a: f64, var: f64) -> MotionFeature {
        MotionFeature {
            curvature: c,
            velocity_mean: a,
            velocity_variance: var,
            valid: true,
        }
    }

    fn straight(id: &str, y: f64, speed: f64, n: u64, class: ObjectClass, bbox: BoundingBox) -> Trajectory {
        let tid = TrackId::new(id);
        let ps = (0..n)
            .map(|k| Position {
                location: Vector3::new(speed * 0.1 * k as f64, y, 0.8),
                t: 0.1 * k as f64,
                frame: k,
                bbox,
                class,
                track_id: tid.clone(),
            })
            .collect();
        Trajectory::new(tid, ps).unwrap()
    }

    fn car() -> BoundingBox {
        BoundingBox::new(4.5, 1.8, 1.5)
    }

    #[test]
    fn distance_examples() {
        let w1 = MatchWeights {
            lambda_c: 1.0,
            lambda_alpha: 1.0,
            lambda_sigma: 1.0,
            d_th: 1.0,
        };
        let a = feat(-0.9, 10.0, 0.25);
        assert_eq!(feature_distance(&a, &a, &w1).unwrap(), 0.0);
        // sigma 0.5 vs 1.0
        let b = feat(-0.7, 11.0, 1.0);
        assert_abs_diff_eq!(feature_distance(&a, &b, &w1).unwrap(), 1.7, epsilon = 1e-12);
        let w0 = MatchWeights {
            lambda_sigma: 0.0,
            ..w1
        };
        let c = feat(-0.7, 11.0, 9.0);
        assert_eq!(
            feature_distance(&a, &b, &w0).unwrap(),
            feature_distance(&a, &c, &w0).unwrap()
        );
        assert!(matches!(
            feature_distance(&a, &MotionFeature::INVALID, &w1),
            Err(Error::InvalidFeature)
        ));
    }

    #[test]
    fn weights_validation() {
        assert!(MatchWeights::default().validate().is_ok());
        let zero = MatchWeights {
            lambda_c: 0.0,
            lambda_alpha: 0.0,
            lambda_sigma: 0.0,
            d_th: 1.0,
        };
        assert!(zero.validate().is_err());
        assert!(MatchWeights {
            lambda_c: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn self_match_and_threshold_exclusion() {
        let db = TrajectoryDatabase::new(
            "P",
            vec![straight("a", 0.0, 5.0, 20, ObjectClass::Car, car())],
            0.1,
            50.0,
        )
        .unwrap();
        let f = extract_features(&db, 3).unwrap();
        let m = motion_match(&f, &f, &MatchWeights::default());
        assert_eq!(m.len(), f.num_valid());
        assert!(m.iter().all(|x| x.feature_distance == 0.0));

        let fast = TrajectoryDatabase::new(
            "Q",
            vec![straight("b", 0.0, 25.0, 20, ObjectClass::Car, car())],
            0.1,
            50.0,
        )
        .unwrap();
        let fq = extract_features(&fast, 3).unwrap();
        let w = MatchWeights {
            lambda_c: 0.0,
            lambda_alpha: 1.0,
            lambda_sigma: 0.0,
            d_th: 1.0,
        };
        assert!(motion_match(&f, &fq, &w).is_empty());
    }

    #[test]
    fn mutual_asymmetry_removed() {
        // p1 -> q1 is nearest for p1, but q1's nearest in P is p2.
        let fp = FeatureDatabase::from_rows(vec![vec![feat(-1.0, 10.0, 0.0), feat(-1.0, 10.9, 0.0)]]);
        let fq = FeatureDatabase::from_rows(vec![vec![feat(-1.0, 11.0, 0.0)]]);
        let w = MatchWeights {
            d_th: 5.0,
            ..Default::default()
        };
        let raw = motion_match(&fp, &fq, &w);
        assert_eq!(raw.len(), 2);
        let kept = filter_mutual_nn(&raw, &fp, &fq, &w);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].p, PosRef::new(0, 1));
    }

    #[test]
    fn mutual_matches_full_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rows = |n: usize| {
            (0..n)
                .map(|_| {
                    feat(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(0.0..15.0),
                        rng.gen_range(0.0..4.0),
                    )
                })
                .collect::<Vec<_>>()
        };
        let fp = FeatureDatabase::from_rows(vec![rows(120), rows(80)]);
        let fq = FeatureDatabase::from_rows(vec![rows(90), rows(110)]);
        let w = MatchWeights {
            d_th: 1e9,
            ..Default::default()
        };
        let raw = motion_match(&fp, &fq, &w);
        let kept: Vec<_> = filter_mutual_nn(&raw, &fp, &fq, &w)
            .iter()
            .map(|m| (m.p, m.q))
            .collect();

        // Brute force over the full distance matrix.
        let pv = fp.valid();
        let qv = fq.valid();
        let mut dist = vec![vec![0.0; qv.len()]; pv.len()];
        for (i, (_, a)) in pv.iter().enumerate() {
            for (j, (_, b)) in qv.iter().enumerate() {
                dist[i][j] = (a.curvature - b.curvature).abs()
                    + (a.velocity_mean - b.velocity_mean).abs()
                    + 0.5 * (a.velocity_variance.sqrt() - b.velocity_variance.sqrt()).abs();
            }
        }
        let argmin = |it: &mut dyn Iterator<Item = (usize, f64)>| {
            let mut best = (usize::MAX, f64::INFINITY);
            for (k, d) in it {
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        };
        let mut expected = Vec::new();
        for i in 0..pv.len() {
            let j = argmin(&mut dist[i].iter().copied().enumerate());
            let back = argmin(&mut (0..pv.len()).map(|k| (k, dist[k][j])));
            if back == i {
                expected.push((pv[i].0, qv[j].0));
            }
        }
        assert_eq!(kept, expected);
        assert!(!expected.is_empty());
    }

    fn two_dbs(p: Vec<Trajectory>, q: Vec<Trajectory>) -> (TrajectoryDatabase, TrajectoryDatabase) {
        (
            TrajectoryDatabase::new("P", p, 0.1, 100.0).unwrap(),
            TrajectoryDatabase::new("Q", q, 0.1, 100.0).unwrap(),
        )
    }

    fn pm(pt: usize, pp: usize, qt: usize, qp: usize) -> PositionMatch {
        PositionMatch {
            p: PosRef::new(pt, pp),
            q: PosRef::new(qt, qp),
            feature_distance: 0.0,
            flags: FilterFlags::default(),
        }
    }

    #[test]
    fn bbox_filter_cases() {
        let (p, q) = two_dbs(
            vec![straight("a", 0.0, 5.0, 5, ObjectClass::Car, car())],
            vec![
                straight("b", 0.0, 5.0, 5, ObjectClass::Car, car()),
                straight("c", 9.0, 5.0, 5, ObjectClass::Truck, car()),
                straight("d", 20.0, 5.0, 5, ObjectClass::Car, BoundingBox::new(4.6, 1.9, 1.55)),
            ],
        );
        let ms = vec![pm(0, 1, 0, 1), pm(0, 1, 1, 1), pm(0, 1, 2, 1)];
        let kept = filter_bbox(&ms, &p, &q, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].q.traj, 0);
        assert_eq!(kept[1].q.traj, 2);
        assert_eq!(kept[1].flags.bbox, Some(true));
        let strict = filter_bbox(&ms, &p, &q, 0.2);
        assert_eq!(strict.len(), 1);
    }

    #[test]
    fn neighbor_count_cases() {
        // P: lone object. Q: object with three neighbours.
        let (p, q) = two_dbs(
            vec![straight("a", 0.0, 5.0, 5, ObjectClass::Car, car())],
            vec![
                straight("b", 0.0, 5.0, 5, ObjectClass::Car, car()),
                straight("c", 3.0, 5.0, 5, ObjectClass::Car, car()),
                straight("d", 6.0, 5.0, 5, ObjectClass::Car, car()),
                straight("e", -3.0, 5.0, 5, ObjectClass::Car, car()),
            ],
        );
        let (ip, iq) = (IndexedDatabase::new(&p), IndexedDatabase::new(&q));
        assert_eq!(ip.neighbor_count(PosRef::new(0, 2), 15.0), 0);
        assert_eq!(iq.neighbor_count(PosRef::new(0, 2), 15.0), 3);
        let ms = vec![pm(0, 2, 0, 2)];
        assert!(filter_neighbor_count(&ms, &ip, &iq, 15.0, 1).is_empty());
        let lone = filter_neighbor_count(&ms, &ip, &ip, 15.0, 0);
        assert_eq!(lone.len(), 1);
    }

    #[test]
    fn neighbor_count_matches_quadratic_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trajs: Vec<_> = (0..12)
            .map(|i| {
                straight(
                    &format!("v{i}"),
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(3.0..12.0),
                    30,
                    ObjectClass::Car,
                    car(),
                )
            })
            .collect();
        let db = TrajectoryDatabase::new("P", trajs, 0.1, 100.0).unwrap();
        let idx = IndexedDatabase::new(&db);
        let all: Vec<(PosRef, &Position)> = db
            .trajectories()
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| {
                t.positions()
                    .iter()
                    .enumerate()
                    .map(move |(pi, p)| (PosRef::new(ti, pi), p))
            })
            .collect();
        for (r, p) in &all {
            let mut n = 0;
            for (o, q) in &all {
                if o.traj != r.traj && q.frame == p.frame && (q.location - p.location).norm() <= 10.0 {
                    n += 1;
                }
            }
            assert_eq!(idx.neighbor_count(*r, 10.0), n);
        }
    }

    #[test]
    fn neighborhood_profile_cases() {
        let (p, q) = two_dbs(
            vec![
                straight("a", 0.0, 5.0, 20, ObjectClass::Car, car()),
                straight("n", 4.0, 5.0, 20, ObjectClass::Car, car()),
            ],
            vec![
                straight("b", 0.0, 5.0, 20, ObjectClass::Car, car()),
                straight("m", 4.0, 5.0, 20, ObjectClass::Car, car()),
            ],
        );
        let (ip, iq) = (IndexedDatabase::new(&p), IndexedDatabase::new(&q));
        let m = pm(0, 10, 0, 10);
        assert_eq!(neighborhood_distance(&m, &ip, &iq, 15.0, 5), 0);
        assert_eq!(filter_neighborhood_distribution(&[m], &ip, &iq, 15.0, 5, 0).len(), 1);

        // Q's neighbour only exists for the first 8 frames.
        let (_, q2) = two_dbs(
            vec![],
            vec![
                straight("b", 0.0, 5.0, 20, ObjectClass::Car, car()),
                straight("m", 4.0, 5.0, 8, ObjectClass::Car, car()),
            ],
        );
        let iq2 = IndexedDatabase::new(&q2);
        // offsets -5..+5 around frame 10: frames 8, 9 missing below, 11..15 above -> 7 bins differ.
        assert_eq!(neighborhood_distance(&m, &ip, &iq2, 15.0, 5), 7);
    }

    #[test]
    fn pair_local_filters_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng, pre: &str| {
            (0..8)
                .map(|i| {
                    let class = if i % 3 == 0 {
                        ObjectClass::Truck
                    } else {
                        ObjectClass::Car
                    };
                    let b = BoundingBox::new(rng.gen_range(4.0..5.0), 1.8, 1.5);
                    straight(
                        &format!("{pre}{i}"),
                        rng.gen_range(-15.0..15.0),
                        rng.gen_range(3.0..12.0),
                        25,
                        class,
                        b,
                    )
                })
                .collect::<Vec<_>>()
        };
        let (p, q) = two_dbs(mk(&mut rng, "p"), mk(&mut rng, "q"));
        let (ip, iq) = (IndexedDatabase::new(&p), IndexedDatabase::new(&q));
        let ms: Vec<_> = (0..300)
            .map(|_| {
                pm(
                    rng.gen_range(0..8),
                    rng.gen_range(0..25),
                    rng.gen_range(0..8),
                    rng.gen_range(0..25),
                )
            })
            .collect();
        let a = filter_bbox(&ms, &p, &q, 0.5);
        let a = filter_neighbor_count(&a, &ip, &iq, 15.0, 1);
        let a = filter_neighborhood_distribution(&a, &ip, &iq, 15.0, 5, 2);
        let b = filter_neighborhood_distribution(&ms, &ip, &iq, 15.0, 5, 2);
        let b = filter_neighbor_count(&b, &ip, &iq, 15.0, 1);
        let b = filter_bbox(&b, &p, &q, 0.5);
        let key = |v: &[PositionMatch]| v.iter().map(|m| (m.p, m.q)).collect::<Vec<_>>();
        assert_eq!(key(&a), key(&b));
        // Subset and order-stable.
        let pos: Vec<usize> = a
            .iter()
            .map(|m| ms.iter().position(|x| x.p == m.p && x.q == m.q).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] <= w[1]));
    }

    proptest::proptest! {
        #[test]
        fn pruned_nearest_equals_full_scan(
            // coarse grids make exact ties common
            rows in proptest::collection::vec((-2i32..=2, 0i32..=8, 0i32..=4), 1..60),
            x in (-2i32..=2, 0i32..=8, 0i32..=4),
        ) {
            let f = |(c, a, v): (i32, i32, i32)| feat(c as f64 / 2.0, a as f64, v as f64);
            let table = FeatureTable::new(&FeatureDatabase::from_rows(vec![rows.iter().copied().map(f).collect()]));
            let w = MatchWeights::default();
            let q = row_of(&f(x));
            let mut full: Option<(usize, f64)> = None;
            for (i, r) in table.rows.iter().enumerate() {
                let d = w.lambda_c * (q[0] - r[0]).abs() + w.lambda_alpha * (q[1] - r[1]).abs() + w.lambda_sigma * (q[2] - r[2]).abs();
                if full.is_none_or(|(_, bd)| d < bd) {
                    full = Some((i, d));
                }
            }
            proptest::prop_assert_eq!(table.nearest(&q, &w), full);
        }
    }
}

//! End-to-end calibration of one recording session and fusion of successive
//! sessions.
//!
//! After feature matching and filtering, a consensus step picks the candidate
//! trajectory pairs that agree on one rigid transform. The main loop then
//! alternates between solving the transform from position pairs (S1), pairing
//! trajectories by majority vote and measuring how far apart they remain
//! (S2), and re-deriving position pairs inside the paired trajectories (S3).

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{self, rigid_fit, CorrespondenceSet, SpatialSolution};
use crate::features::{extract_features, FeatureDatabase, DEFAULT_WINDOW};
use crate::matcher::{
    feature_distance, filter_cascade, motion_match, FilterParams, IndexedDatabase, MatchWeights, PositionMatch,
};
use crate::model::{PosRef, Trajectory, TrajectoryDatabase, Transform4D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub max_iterations: usize,
    /// The loop stops once paired trajectories are on average closer than this.
    pub trajectory_distance_threshold: f64,
    pub weights: MatchWeights,
    pub filters: FilterParams,
    pub window: usize,
    /// Half-width of the sub-frame offset search; twice the frame period when unset.
    pub search_halfwidth: Option<f64>,
    /// Residual below which a pair supports a consensus hypothesis, meters.
    pub consensus_gate: f64,
    /// Residual below which a mapped Q position counts as matched in the score.
    pub score_gate: f64,
    /// Width of the window over matched timestamp differences used to find
    /// the initial clock offset, seconds.
    pub offset_window: f64,
    /// Sessions scoring below this are reported as not converged: a handful
    /// of coincidental pairs can be self-consistent enough to pass the
    /// distance threshold.
    pub min_score: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            max_iterations: 20,
            trajectory_distance_threshold: 0.3,
            weights: MatchWeights::default(),
            filters: FilterParams::default(),
            window: DEFAULT_WINDOW,
            search_halfwidth: None,
            consensus_gate: 1.5,
            score_gate: 1.5,
            offset_window: 2.0,
            min_score: 0.2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidInput("max_iterations must be at least 1".into()));
        }
        let positive = [
            ("trajectory_distance_threshold", self.trajectory_distance_threshold),
            ("consensus_gate", self.consensus_gate),
            ("score_gate", self.score_gate),
            ("offset_window", self.offset_window),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if let Some(h) = self.search_halfwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidInput("search_halfwidth must be positive".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::InvalidInput("min_score must be in [0, 1]".into()));
        }
        if self.window < 1 {
            return Err(Error::InvalidInput("window must be at least 1".into()));
        }
        self.weights.validate()?;
        self.filters.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSession {
    pub transform: Transform4D,
    pub score: f64,
    pub n_pp: usize,
    pub n_po: usize,
    pub iterations_used: usize,
    pub converged: bool,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

/// Session plus the intermediate state of the run, for diagnostics.
#[derive(Clone, Debug)]
pub struct CalibrationReport {
    pub session: CalibrationSession,
    pub raw_matches: usize,
    pub filtered_matches: usize,
    /// Position pairs used by the final solve.
    pub pairs: Vec<(PosRef, PosRef)>,
    /// `(P trajectory, Q trajectory)` index pairs from the final vote.
    pub trajectory_pairs: Vec<(usize, usize)>,
    /// Mean trajectory distance after each iteration.
    pub distance_history: Vec<f64>,
    /// Median timestamp difference of the final pairs, before refinement.
    pub coarse_time_offset: f64,
}

/// Current time in seconds, or `SOURCE_DATE_EPOCH` when set.
pub fn now_epoch() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return v;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn calibrate(
    db_p: &TrajectoryDatabase,
    db_q: &TrajectoryDatabase,
    cfg: &PipelineConfig,
) -> Result<CalibrationSession> {
    calibrate_detailed(db_p, db_q, cfg).map(|r| r.session)
}

/// Pair count, rms residual and position pairs of one initialization candidate.
type Candidate = (usize, f64, Vec<(PosRef, PosRef)>);

struct Run<'a> {
    db_p: &'a TrajectoryDatabase,
    db_q: &'a TrajectoryDatabase,
    fp: FeatureDatabase,
    fq: FeatureDatabase,
    cfg: &'a PipelineConfig,
    /// P frame period; the tolerance for time-nearest pairing is half of it.
    period: f64,
}

fn nearest_in_time(traj: &Trajectory, t: f64, tol: f64) -> Option<usize> {
    let i = traj.nearest_index(t);
    ((traj.positions()[i].t - t).abs() <= tol).then_some(i)
}

impl Run<'_> {
    fn p(&self, r: PosRef) -> &crate::model::Position {
        self.db_p.position(r)
    }

    fn q(&self, r: PosRef) -> &crate::model::Position {
        self.db_q.position(r)
    }

    fn correspondences(&self, pairs: &[(PosRef, PosRef)]) -> CorrespondenceSet {
        CorrespondenceSet::new(
            pairs
                .iter()
                .map(|(a, b)| (self.p(*a).clone(), self.q(*b).clone()))
                .collect(),
        )
    }

    /// Time-nearest pairs between P trajectory `a` and Q trajectory `b` when Q
    /// stamps are shifted by `dt`.
    fn dense_pairs(&self, a: usize, b: usize, dt: f64) -> Vec<(PosRef, PosRef)> {
        let ta = &self.db_p.trajectories()[a];
        let tb = &self.db_q.trajectories()[b];
        if tb.end_time() + dt < ta.start_time() - self.period || tb.start_time() + dt > ta.end_time() + self.period {
            return Vec::new();
        }
        tb.positions()
            .iter()
            .enumerate()
            .filter_map(|(j, q)| {
                nearest_in_time(ta, q.t + dt, self.period / 2.0).map(|i| (PosRef::new(a, i), PosRef::new(b, j)))
            })
            .collect()
    }

    /// For every Q trajectory the P trajectory holding most of its pairs;
    /// ties go to the smaller mean feature distance.
    fn vote(&self, pairs: &[(PosRef, PosRef)]) -> Vec<(usize, usize)> {
        let mut tally: BTreeMap<usize, BTreeMap<usize, (usize, f64, usize)>> = BTreeMap::new();
        for (p, q) in pairs {
            let e = tally.entry(q.traj).or_default().entry(p.traj).or_insert((0, 0.0, 0));
            e.0 += 1;
            if let Ok(d) = feature_distance(self.fp.get(*p), self.fq.get(*q), &self.cfg.weights) {
                e.1 += d;
                e.2 += 1;
            }
        }
        tally
            .into_iter()
            .filter_map(|(b, votes)| {
                let mean = |v: &(usize, f64, usize)| if v.2 > 0 { v.1 / v.2 as f64 } else { f64::INFINITY };
                votes
                    .iter()
                    .min_by(|x, y| y.1 .0.cmp(&x.1 .0).then(mean(x.1).total_cmp(&mean(y.1))))
                    .map(|(a, _)| (*a, b))
            })
            .collect()
    }

    /// Transform, rms residual and coarse (median) offset from `pairs`.
    fn solve(&self, pairs: &[(PosRef, PosRef)], traj_pairs: &[(usize, usize)]) -> Result<(Transform4D, f64, f64)> {
        let c = self.correspondences(pairs);
        let spatial = estimator::solve_spatial(&c)?;
        let coarse = estimator::estimate_time_offset_coarse(&c)?;
        let matched: Vec<(&Trajectory, &Trajectory)> = traj_pairs
            .iter()
            .map(|(a, b)| (&self.db_p.trajectories()[*a], &self.db_q.trajectories()[*b]))
            .collect();
        let halfwidth = self.cfg.search_halfwidth.unwrap_or(2.0 * self.period);
        let offset = match estimator::refine_time_offset(&matched, &spatial, coarse, halfwidth) {
            Ok(d) => d,
            Err(Error::InsufficientOverlap) => coarse,
            Err(e) => return Err(e),
        };
        Ok((
            Transform4D::new(spatial.rotation, spatial.translation, offset),
            spatial.rms_residual,
            coarse,
        ))
    }

    /// Overlap-weighted mean of the norm of the average displacement between
    /// paired trajectories.
    fn trajectory_distance(&self, traj_pairs: &[(usize, usize)], tf: &Transform4D) -> f64 {
        let mut total = 0.0;
        let mut weight = 0usize;
        for (a, b) in traj_pairs {
            let ta = &self.db_p.trajectories()[*a];
            let mut sum = Vector3::zeros();
            let mut n = 0usize;
            for q in self.db_q.trajectories()[*b].positions() {
                if let Some(x) = ta.interpolate(tf.apply_time(q.t)) {
                    sum += x - tf.apply_point(&q.location);
                    n += 1;
                }
            }
            if n > 0 {
                total += (sum / n as f64).norm() * n as f64;
                weight += n;
            }
        }
        if weight == 0 {
            f64::INFINITY
        } else {
            total / weight as f64
        }
    }

    fn mean_distance(&self, a: usize, b: usize, tf: &Transform4D) -> Option<f64> {
        let ta = &self.db_p.trajectories()[a];
        let tb = &self.db_q.trajectories()[b];
        if tf.apply_time(tb.end_time()) < ta.start_time() || tf.apply_time(tb.start_time()) > ta.end_time() {
            return None;
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for q in tb.positions() {
            if let Some(x) = ta.interpolate(tf.apply_time(q.t)) {
                sum += (x - tf.apply_point(&q.location)).norm();
                n += 1;
            }
        }
        (n >= 3).then(|| sum / n as f64)
    }

    /// Time-nearest position pairs inside paired trajectories whose residual
    /// passes the gate; Q trajectories without a partner are paired with the
    /// closest P trajectory when it passes the same gate on average.
    fn reassociate(&self, traj_pairs: &[(usize, usize)], tf: &Transform4D, rms: f64) -> Vec<(PosRef, PosRef)> {
        let gate = (3.0 * rms).max(0.1);
        let mut all_pairs: Vec<(usize, usize)> = traj_pairs.to_vec();
        let paired: std::collections::HashSet<usize> = traj_pairs.iter().map(|x| x.1).collect();
        for b in 0..self.db_q.trajectories().len() {
            if paired.contains(&b) {
                continue;
            }
            let best = (0..self.db_p.trajectories().len())
                .filter_map(|a| self.mean_distance(a, b, tf).map(|d| (a, d)))
                .min_by(|x, y| x.1.total_cmp(&y.1));
            if let Some((a, d)) = best {
                if d < gate {
                    all_pairs.push((a, b));
                }
            }
        }
        let mut out = Vec::new();
        for (a, b) in all_pairs {
            for (pr, qr) in self.dense_pairs(a, b, tf.time_offset()) {
                if (self.p(pr).location - tf.apply_point(&self.q(qr).location)).norm() < gate {
                    out.push((pr, qr));
                }
            }
        }
        out.sort();
        out
    }

    /// Dense, mutually consistent starting pairs from the filtered matches.
    fn initialize(&self, matches: &[PositionMatch]) -> Result<Vec<(PosRef, PosRef)>> {
        let deltas: Vec<f64> = matches.iter().map(|m| self.p(m.p).t - self.q(m.q).t).collect();
        let window = self.cfg.offset_window;
        let mut best: Option<Candidate> = None;
        for d0 in offset_peaks(&deltas, window, 3, window) {
            if let Some((n, rms, pairs)) = self.consensus(matches, &deltas, d0)? {
                let better = match &best {
                    None => true,
                    Some((bn, br, _)) => n > *bn || (n == *bn && rms < *br),
                };
                if better {
                    best = Some((n, rms, pairs));
                }
            }
        }
        best.map(|b| b.2).ok_or(Error::NoCandidateMatches {
            raw: matches.len(),
            filtered: 0,
        })
    }

    /// Best rigid hypothesis from one or two candidate trajectory pairs near
    /// the offset `d0`, grown over all trajectories.
    ///
    /// Candidate pairs are the trajectory pairs most often hit by matches
    /// whose timestamp difference lies within half the offset window of
    /// `d0`. Every clock shift within that window, in frame steps, is tried;
    /// a hypothesis is scored by the number of time-nearest candidate pairs
    /// it explains within the consensus gate.
    fn consensus(&self, matches: &[PositionMatch], deltas: &[f64], d0: f64) -> Result<Option<Candidate>> {
        const MAX_CANDIDATES: usize = 40;
        const HYPOTHESIS_SAMPLES: usize = 32;
        let half = self.cfg.offset_window / 2.0;
        let mut votes: HashMap<(usize, usize), usize> = HashMap::new();
        for (m, d) in matches.iter().zip(deltas) {
            if (d - d0).abs() <= half {
                *votes.entry((m.p.traj, m.q.traj)).or_default() += 1;
            }
        }
        let mut ranked: Vec<((usize, usize), usize)> = votes.into_iter().collect();
        ranked.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        ranked.truncate(MAX_CANDIDATES);

        let steps = (half / self.period).ceil() as i64;
        let mut best: Option<(usize, f64, f64, SpatialSolution)> = None;
        for k in -steps..=steps {
            let dt = d0 + k as f64 * self.period;
            let dense: Vec<Vec<(PosRef, PosRef)>> = ranked
                .iter()
                .map(|((a, b), _)| self.dense_pairs(*a, *b, dt))
                .filter(|v| v.len() >= 3)
                .collect();
            if dense.is_empty() {
                continue;
            }
            // Hypotheses only seed the full solve; a few dozen evenly spaced
            // pairs per trajectory are enough to rank them.
            let pts: Vec<Vec<(Vector3<f64>, Vector3<f64>)>> = dense
                .iter()
                .map(|v| {
                    let step = v.len().div_ceil(HYPOTHESIS_SAMPLES);
                    v.iter()
                        .step_by(step)
                        .map(|(a, b)| (self.p(*a).location, self.q(*b).location))
                        .collect()
                })
                .collect();
            let count = |s: &SpatialSolution| {
                pts.iter()
                    .flatten()
                    .filter(|(p, q)| (p - s.apply(q)).norm() < self.cfg.consensus_gate)
                    .count()
            };
            let fit = |idx: &[usize]| -> Option<SpatialSolution> {
                let (p, q): (Vec<_>, Vec<_>) = idx.iter().flat_map(|i| pts[*i].iter().copied()).unzip();
                rigid_fit(&p, &q, &vec![1.0; p.len()]).ok()
            };
            let mut consider = |s: SpatialSolution| {
                let n = count(&s);
                let better = match &best {
                    None => true,
                    Some((bn, br, _, _)) => n > *bn || (n == *bn && s.rms_residual < *br),
                };
                if better {
                    best = Some((n, s.rms_residual, dt, s));
                }
            };
            for i in 0..dense.len() {
                if let Some(s) = fit(&[i]) {
                    consider(s);
                }
                for j in (i + 1)..dense.len() {
                    if let Some(s) = fit(&[i, j]) {
                        consider(s);
                    }
                }
            }
        }
        let Some((_, _, dt, hyp)) = best else {
            return Ok(None);
        };

        // Grow from the hypothesis across every trajectory, then re-associate
        // once more with the refined clock offset.
        let tf = Transform4D::new(hyp.rotation, hyp.translation, dt);
        let grown = self.reassociate(&[], &tf, self.cfg.consensus_gate / 3.0);
        if grown.len() < 3 {
            return Ok(None);
        }
        let votes = self.vote(&grown);
        let (tf, rms, _) = match self.solve(&grown, &votes) {
            Ok(x) => x,
            Err(Error::DegenerateGeometry { .. }) | Err(Error::TooFewPairs(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let pairs = self.reassociate(&votes, &tf, rms);
        if pairs.len() < 3 {
            return Ok(None);
        }
        Ok(Some((pairs.len(), rms, pairs)))
    }
}

/// Up to `k` centres of the densest windows of width `width` over `values`,
/// at least `separation` apart, densest first.
fn offset_peaks(values: &[f64], width: f64, k: usize, separation: f64) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut windows: Vec<(usize, f64)> = Vec::new();
    let mut hi = 0;
    for lo in 0..v.len() {
        hi = hi.max(lo);
        while hi < v.len() && v[hi] - v[lo] <= width {
            hi += 1;
        }
        let median = v[lo + (hi - lo - 1) / 2];
        windows.push((hi - lo, median));
    }
    windows.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.total_cmp(&b.1)));
    let mut peaks: Vec<f64> = Vec::new();
    for (_, c) in windows {
        if peaks.len() == k {
            break;
        }
        if peaks.iter().all(|p| (p - c).abs() >= separation) {
            peaks.push(c);
        }
    }
    peaks
}

pub fn calibrate_detailed(
    db_p: &TrajectoryDatabase,
    db_q: &TrajectoryDatabase,
    cfg: &PipelineConfig,
) -> Result<CalibrationReport> {
    cfg.validate()?;
    let fp = extract_features(db_p, cfg.window)?;
    let fq = extract_features(db_q, cfg.window)?;
    let raw = motion_match(&fp, &fq, &cfg.weights);
    let ip = IndexedDatabase::new(db_p);
    let iq = IndexedDatabase::new(db_q);
    let filtered = filter_cascade(&raw, &fp, &fq, &ip, &iq, &cfg.weights, &cfg.filters);
    let no_matches = Error::NoCandidateMatches {
        raw: raw.len(),
        filtered: filtered.len(),
    };
    if filtered.len() < 3 {
        return Err(no_matches);
    }
    let run = Run {
        db_p,
        db_q,
        fp,
        fq,
        cfg,
        period: db_p.frame_period(),
    };
    let mut pairs = match run.initialize(&filtered) {
        Ok(p) => p,
        Err(Error::NoCandidateMatches { .. }) | Err(Error::DegenerateGeometry { .. }) | Err(Error::TooFewPairs(_)) => {
            return Err(no_matches)
        }
        Err(e) => return Err(e),
    };

    let mut transform = Transform4D::identity();
    let mut traj_pairs = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut coarse_offset = 0.0;
    let mut iterations = 0;
    let mut solved_pairs = pairs.clone();
    for iter in 1..=cfg.max_iterations {
        let votes = run.vote(&pairs);
        let (tf, rms, coarse) = match run.solve(&pairs, &votes) {
            Ok(x) => x,
            Err(e) if iter == 1 => {
                return Err(match e {
                    Error::DegenerateGeometry { .. } | Error::TooFewPairs(_) => no_matches,
                    other => other,
                })
            }
            Err(_) => break,
        };
        iterations = iter;
        transform = tf;
        coarse_offset = coarse;
        traj_pairs = votes;
        solved_pairs = pairs.clone();
        let distance = run.trajectory_distance(&traj_pairs, &transform);
        history.push(distance);
        if distance < cfg.trajectory_distance_threshold {
            converged = true;
            break;
        }
        let next = run.reassociate(&traj_pairs, &transform, rms);
        if next == pairs || next.len() < 3 {
            break;
        }
        pairs = next;
    }

    let (score, n_pp, n_po) = score_session(&transform, db_p, db_q, cfg.score_gate);
    let converged = converged && score >= cfg.min_score;
    Ok(CalibrationReport {
        session: CalibrationSession {
            transform,
            score,
            n_pp,
            n_po,
            iterations_used: iterations,
            converged,
            created_at: now_epoch(),
        },
        raw_matches: raw.len(),
        filtered_matches: filtered.len(),
        pairs: solved_pairs,
        trajectory_pairs: traj_pairs,
        distance_history: history,
        coarse_time_offset: coarse_offset,
    })
}

/// Session quality `min(1, 2 n_pp / n_po)` under `transform`.
///
/// `n_po` counts positions of both databases that fall inside both sensors'
/// range spheres and inside the other sensor's recorded time span, all in
/// P's frame and clock. `n_pp` counts one-to-one pairs of a mapped Q position
/// and a P position at most half a frame apart in time and `gate` apart in
/// space, assigned closest first.
pub fn score_session(
    transform: &Transform4D,
    db_p: &TrajectoryDatabase,
    db_q: &TrajectoryDatabase,
    gate: f64,
) -> (f64, usize, usize) {
    let span = |db: &TrajectoryDatabase| {
        db.trajectories()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |acc, t| {
                (acc.0.min(t.start_time()), acc.1.max(t.end_time()))
            })
    };
    let (p0, p1) = span(db_p);
    let (q0, q1) = span(db_q);
    let (q0, q1) = (transform.apply_time(q0), transform.apply_time(q1));
    let origin_q = *transform.translation();
    let (rp, rq) = (db_p.sensing_range(), db_q.sensing_range());

    let mut n_po = 0usize;
    for t in db_p.trajectories() {
        for p in t.positions() {
            if p.location.norm() <= rp && (p.location - origin_q).norm() <= rq && (q0..=q1).contains(&p.t) {
                n_po += 1;
            }
        }
    }
    let mut mapped = Vec::with_capacity(db_q.num_positions());
    for t in db_q.trajectories() {
        for q in t.positions() {
            let x = transform.apply_point(&q.location);
            let tm = transform.apply_time(q.t);
            if q.location.norm() <= rq && x.norm() <= rp && (p0..=p1).contains(&tm) {
                n_po += 1;
            }
            mapped.push((x, tm));
        }
    }

    let period = db_p.frame_period();
    let mut buckets: HashMap<i64, Vec<(usize, Vector3<f64>, f64)>> = HashMap::new();
    let mut next = 0usize;
    for t in db_p.trajectories() {
        for p in t.positions() {
            buckets
                .entry((p.t / period).round() as i64)
                .or_default()
                .push((next, p.location, p.t));
            next += 1;
        }
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (qi, (x, tm)) in mapped.iter().enumerate() {
        let k = (tm / period).round() as i64;
        for kk in [k - 1, k, k + 1] {
            let Some(bucket) = buckets.get(&kk) else { continue };
            for (pi, loc, t) in bucket {
                if (t - tm).abs() <= period / 2.0 {
                    let d = (loc - x).norm();
                    if d < gate {
                        candidates.push((d, qi, *pi));
                    }
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_q = vec![false; mapped.len()];
    let mut used_p = vec![false; next];
    let mut n_pp = 0usize;
    for (_, qi, pi) in candidates {
        if !used_q[qi] && !used_p[pi] {
            used_q[qi] = true;
            used_p[pi] = true;
            n_pp += 1;
        }
    }
    let score = if n_po == 0 {
        0.0
    } else {
        (2.0 * n_pp as f64 / n_po as f64).min(1.0)
    };
    (score, n_pp, n_po)
}

/// Score-weighted fusion of the stored state with a new session.
pub fn update_continuous(prev: &CalibrationSession, new: &CalibrationSession) -> Result<CalibrationSession> {
    let (s1, s2) = (prev.score, new.score);
    if !(s1 + s2 > 0.0) {
        return Err(Error::BothZeroScore);
    }
    if s1 == 0.0 {
        return Ok(new.clone());
    }
    if s2 == 0.0 {
        return Ok(prev.clone());
    }
    let (w1, w2) = (s1 / (s1 + s2), s2 / (s1 + s2));
    let (a, b) = (&prev.transform, &new.transform);
    let translation = a.translation() * w1 + b.translation() * w2;
    let time_offset = a.time_offset() * w1 + b.time_offset() * w2;
    let qa = a.rotation().into_inner();
    let mut qb = b.rotation().into_inner();
    if qa.coords.dot(&qb.coords) < 0.0 {
        qb = -qb;
    }
    let blended: Quaternion<f64> = qa * w1 + qb * w2;
    let rotation = UnitQuaternion::from_quaternion(blended);
    let best = if s2 >= s1 { new } else { prev };
    Ok(CalibrationSession {
        transform: Transform4D::new(rotation, translation, time_offset),
        score: s1.max(s2),
        n_pp: best.n_pp,
        n_po: best.n_po,
        iterations_used: best.iterations_used,
        converged: best.converged,
        created_at: new.created_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{diagonal_poses, make_pair, Layout, ScenarioConfig};
    use approx::assert_abs_diff_eq;

    fn session(score: f64, t: Vector3<f64>, yaw: f64, dt: f64) -> CalibrationSession {
        CalibrationSession {
            transform: Transform4D::from_yaw_deg(yaw, t, dt),
            score,
            n_pp: (score * 100.0) as usize,
            n_po: 200,
            iterations_used: 3,
            converged: true,
            created_at: 0,
        }
    }

    #[test]
    fn fusion_zero_weight_returns_other() {
        let a = session(0.0, Vector3::new(9.0, 9.0, 9.0), 40.0, 3.0);
        let b = session(0.8, Vector3::new(1.0, 0.0, 0.0), 10.0, 0.5);
        assert_eq!(update_continuous(&a, &b).unwrap(), b);
        assert_eq!(update_continuous(&b, &a).unwrap(), b);
        assert!(matches!(update_continuous(&a, &a), Err(Error::BothZeroScore)));
    }

    #[test]
    fn fusion_equal_scores_is_midpoint() {
        let a = session(0.8, Vector3::new(1.0, 0.0, 0.0), 10.0, 0.4);
        let b = session(0.8, Vector3::new(3.0, 0.0, 0.0), 20.0, 0.6);
        let f = update_continuous(&a, &b).unwrap();
        assert!((f.transform.translation() - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        assert_abs_diff_eq!(f.transform.time_offset(), 0.5, epsilon = 1e-12);
        let yaw = f.transform.rotation().euler_angles().2.to_degrees();
        assert_abs_diff_eq!(yaw, 15.0, epsilon = 1e-9);
        assert_eq!(f.score, 0.8);
    }

    #[test]
    fn fusion_is_idempotent_and_hemisphere_safe() {
        let a = session(0.6, Vector3::new(1.0, 2.0, 3.0), 179.0, 0.25);
        let b = session(0.9, Vector3::new(1.0, 2.0, 3.0), 179.0, 0.25);
        let f = update_continuous(&a, &b).unwrap();
        assert!(f.transform.rotation().angle_to(a.transform.rotation()) < 1e-9);
        assert!((f.transform.translation() - a.transform.translation()).norm() < 1e-9);
        assert_eq!(f.score, 0.9);
        assert_eq!(f.n_pp, b.n_pp);
        // 179 and -179 degrees blend to 180, not 0.
        let c = session(0.6, Vector3::zeros(), -179.0, 0.0);
        let g = update_continuous(&a, &c).unwrap();
        assert!(
            g.transform
                .rotation()
                .angle_to(&UnitQuaternion::from_euler_angles(0.0, 0.0, std::f64::consts::PI))
                < 0.01
        );
    }

    #[test]
    fn score_of_truth_and_garbage() {
        let pair = make_pair(&ScenarioConfig {
            n_vehicles: 40,
            duration: 60.0,
            noise_sigma: 0.0,
            ..ScenarioConfig::default()
        })
        .unwrap();
        let (s, n_pp, n_po) = score_session(&pair.truth, &pair.db_p, &pair.db_q, 1.5);
        assert!(s > 0.95, "score {s} ({n_pp}/{n_po})");
        let far = Transform4D::new(*pair.truth.rotation(), Vector3::new(500.0, 0.0, 0.0), 0.5);
        let (s, n_pp, _) = score_session(&far, &pair.db_p, &pair.db_q, 1.5);
        assert_eq!((s, n_pp), (0.0, 0));
        let empty = TrajectoryDatabase::new("Q", vec![], 0.1, 60.0).unwrap();
        assert_eq!(score_session(&pair.truth, &pair.db_p, &empty, 1.5).0, 0.0);
    }

    #[test]
    fn peaks_find_dense_offsets() {
        let mut v = vec![0.5; 10];
        v.extend([0.6, 0.4, 3.0, 3.0, 3.0, -7.0]);
        let p = offset_peaks(&v, 0.05, 3, 0.5);
        assert_eq!(p[0], 0.5);
        assert_eq!(p[1], 3.0);
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn noiseless_scene_is_recovered_exactly() {
        for (layout, rot, dt) in [(Layout::FourWay, 37.0, 1.234), (Layout::ThreeWay, 110.0, 4.56)] {
            let (pose_p, pose_q) = diagonal_poses(rot, dt);
            let cfg = ScenarioConfig {
                layout,
                n_vehicles: 60,
                duration: 60.0,
                noise_sigma: 0.0,
                bbox_noise: 0.0,
                pose_p,
                pose_q,
                seed: 3,
                ..ScenarioConfig::default()
            };
            let pair = make_pair(&cfg).unwrap();
            let r = calibrate_detailed(&pair.db_p, &pair.db_q, &PipelineConfig::default()).unwrap();
            let est = r.session.transform;
            assert!(est.rotation().angle_to(pair.truth.rotation()).to_degrees() < 1e-6);
            assert!((est.translation() - pair.truth.translation()).norm() < 1e-6);
            assert!((est.time_offset() - pair.truth.time_offset()).abs() < 1e-4);
            assert!(r.session.converged && r.session.iterations_used <= 2);
            assert!(r.session.score > 0.95);
            assert!(r.distance_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
    }

    #[test]
    fn empty_input_reports_no_candidates() {
        let pair = make_pair(&ScenarioConfig {
            n_vehicles: 0,
            ..ScenarioConfig::default()
        })
        .unwrap();
        assert!(matches!(
            calibrate(&pair.db_p, &pair.db_q, &PipelineConfig::default()),
            Err(Error::NoCandidateMatches { raw: 0, filtered: 0 })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = PipelineConfig::default();
        assert!(c.validate().is_ok());
        c.max_iterations = 0;
        assert!(c.validate().is_err());
        let c = PipelineConfig {
            trajectory_distance_threshold: -1.0,
            ..PipelineConfig::default()
        };
        assert!(c.validate().is_err());
    }
}

//! Error metrics against ground truth and the parameter-sweep harness.

use std::io::Write;

use nalgebra::UnitQuaternion;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt6;
use crate::model::Transform4D;
use crate::pipeline::{calibrate, update_continuous, CalibrationSession, PipelineConfig};
use crate::simulator::{diagonal_poses, make_pair, ScenarioConfig};

pub const DEFAULT_RTE_THRESHOLD: f64 = 1.0;
pub const DEFAULT_RRE_THRESHOLD: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rre_deg: f64,
    pub rte_m: f64,
    pub toe_s: f64,
    pub success: bool,
    /// Absolute residual Euler angles (x, y, z) in degrees.
    pub euler_err_deg: [f64; 3],
    /// Absolute translation error per axis in meters.
    pub translation_err_m: [f64; 3],
}

/// Absolute residual Euler angles of `truth⁻¹ · estimated`, intrinsic Z-Y-X,
/// in degrees, ordered (x, y, z).
pub fn euler_errors(estimated: &UnitQuaternion<f64>, truth: &UnitQuaternion<f64>) -> [f64; 3] {
    let (roll, pitch, yaw) = (truth.inverse() * estimated).euler_angles();
    [
        roll.to_degrees().abs(),
        pitch.to_degrees().abs(),
        yaw.to_degrees().abs(),
    ]
}

/// Sum of the absolute residual Euler angles, degrees.
pub fn rre(estimated: &UnitQuaternion<f64>, truth: &UnitQuaternion<f64>) -> f64 {
    euler_errors(estimated, truth).iter().sum()
}

pub fn rte(estimated: &nalgebra::Vector3<f64>, truth: &nalgebra::Vector3<f64>) -> f64 {
    (truth - estimated).norm()
}

pub fn toe(estimated: f64, truth: f64) -> f64 {
    (truth - estimated).abs()
}

pub fn success(report: &MetricReport, rte_threshold: f64, rre_threshold: f64) -> bool {
    report.rte_m < rte_threshold && report.rre_deg < rre_threshold
}

/// All metrics of `estimated` against `truth`, with success at the given
/// RRE threshold and the default 1 m RTE threshold.
pub fn evaluate(estimated: &Transform4D, truth: &Transform4D, rre_threshold: f64) -> MetricReport {
    let d = truth.translation() - estimated.translation();
    let euler = euler_errors(estimated.rotation(), truth.rotation());
    let mut r = MetricReport {
        rre_deg: euler.iter().sum(),
        rte_m: d.norm(),
        toe_s: toe(estimated.time_offset(), truth.time_offset()),
        success: false,
        euler_err_deg: euler,
        translation_err_m: [d.x.abs(), d.y.abs(), d.z.abs()],
    };
    r.success = success(&r, DEFAULT_RTE_THRESHOLD, rre_threshold);
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Noise,
    NVehicles,
    Rotation,
    TimeOffset,
    Passes,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(SweepAxis::Noise),
            "n_vehicles" => Ok(SweepAxis::NVehicles),
            "rotation" => Ok(SweepAxis::Rotation),
            "time_offset" => Ok(SweepAxis::TimeOffset),
            "passes" => Ok(SweepAxis::Passes),
            _ => Err(Error::InvalidInput(format!(
                "unknown sweep axis {s:?} (expected noise, n_vehicles, rotation, time_offset or passes)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Scenario for every cell; its sensor poses are replaced by the diagonal
    /// placement built from `rotation_deg` and `time_offset`.
    pub scenario: ScenarioConfig,
    pub pipeline: PipelineConfig,
    pub rotation_deg: f64,
    pub time_offset: f64,
    pub rre_threshold: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: SweepAxis::Noise,
            values: vec![0.2],
            seeds: (0..5).collect(),
            scenario: ScenarioConfig::default(),
            pipeline: PipelineConfig::default(),
            rotation_deg: 0.0,
            time_offset: 0.5,
            rre_threshold: DEFAULT_RRE_THRESHOLD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub seed: u64,
    pub rre_deg: f64,
    pub rte_m: f64,
    pub toe_s: f64,
    pub success: bool,
    pub score: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub axis_value: f64,
    pub runs: usize,
    pub median_rre_deg: f64,
    pub median_rte_m: f64,
    pub median_toe_s: f64,
    pub success_rate: f64,
}

/// Median treating NaN as +inf; `NaN` for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v: Vec<f64> = values
        .iter()
        .map(|x| if x.is_nan() { f64::INFINITY } else { *x })
        .collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a.is_infinite() || b.is_infinite() {
            b
        } else {
            0.5 * (a + b)
        }
    }
}

/// Scenario of one sweep cell before the pass index is applied.
pub fn cell_scenario(cfg: &SweepConfig, value: f64, seed: u64) -> ScenarioConfig {
    let mut sc = cfg.scenario.clone();
    sc.seed = seed;
    let (mut rot, mut off) = (cfg.rotation_deg, cfg.time_offset);
    match cfg.axis {
        SweepAxis::Noise => sc.noise_sigma = value,
        SweepAxis::NVehicles => sc.n_vehicles = value.round().max(0.0) as usize,
        SweepAxis::Rotation => rot = value,
        SweepAxis::TimeOffset => off = value,
        SweepAxis::Passes => {}
    }
    let (pp, pq) = diagonal_poses(rot, off);
    sc.pose_p = pp;
    sc.pose_q = pq;
    sc
}

/// Seed of pass `pass` of a multi-pass run; pass 0 keeps the cell seed.
pub fn pass_seed(seed: u64, pass: usize) -> u64 {
    seed.wrapping_add((pass as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Calibrates `passes` independent recordings of one scenario and fuses them
/// in order. Failed passes are skipped; `None` when every pass fails.
pub fn run_passes(
    scenario: &ScenarioConfig,
    pipeline: &PipelineConfig,
    passes: usize,
) -> Result<Option<(CalibrationSession, Transform4D)>> {
    let mut fused: Option<CalibrationSession> = None;
    let mut truth = scenario.ground_truth();
    for pass in 0..passes.max(1) {
        let sc = ScenarioConfig {
            seed: pass_seed(scenario.seed, pass),
            ..scenario.clone()
        };
        let pair = make_pair(&sc)?;
        truth = pair.truth;
        let session = match calibrate(&pair.db_p, &pair.db_q, pipeline) {
            Ok(s) => s,
            Err(Error::NoCandidateMatches { .. })
            | Err(Error::DegenerateGeometry { .. })
            | Err(Error::TooFewPairs(_)) => continue,
            Err(e) => return Err(e),
        };
        fused = Some(match fused {
            None => session,
            Some(prev) => match update_continuous(&prev, &session) {
                Ok(f) => f,
                Err(Error::BothZeroScore) => prev,
                Err(e) => return Err(e),
            },
        });
    }
    Ok(fused.map(|s| (s, truth)))
}

fn run_cell(cfg: &SweepConfig, value: f64, seed: u64) -> SweepRow {
    let scenario = cell_scenario(cfg, value, seed);
    let passes = if cfg.axis == SweepAxis::Passes {
        value.round().max(1.0) as usize
    } else {
        1
    };
    let failed = SweepRow {
        axis_value: value,
        seed,
        rre_deg: f64::INFINITY,
        rte_m: f64::INFINITY,
        toe_s: f64::INFINITY,
        success: false,
        score: 0.0,
        iterations: 0,
    };
    match run_passes(&scenario, &cfg.pipeline, passes) {
        Ok(Some((session, truth))) => {
            let m = evaluate(&session.transform, &truth, cfg.rre_threshold);
            SweepRow {
                rre_deg: m.rre_deg,
                rte_m: m.rte_m,
                toe_s: m.toe_s,
                success: m.success,
                score: session.score,
                iterations: session.iterations_used,
                ..failed
            }
        }
        _ => failed,
    }
}

/// Runs every `(value, seed)` cell in parallel; rows come back in grid order
/// (values outer, seeds inner) and a failed cell never aborts the sweep.
pub fn run_sweep(cfg: &SweepConfig) -> Result<(Vec<SweepRow>, Vec<SweepSummary>)> {
    cfg.scenario.validate()?;
    cfg.pipeline.validate()?;
    let grid: Vec<(f64, u64)> = cfg
        .values
        .iter()
        .flat_map(|v| cfg.seeds.iter().map(move |s| (*v, *s)))
        .collect();
    let rows: Vec<SweepRow> = grid.par_iter().map(|(v, s)| run_cell(cfg, *v, *s)).collect();
    let summary = cfg
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| summarize(*v, &rows[i * cfg.seeds.len()..(i + 1) * cfg.seeds.len()]))
        .collect();
    Ok((rows, summary))
}

pub fn summarize(axis_value: f64, rows: &[SweepRow]) -> SweepSummary {
    let col = |f: fn(&SweepRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    SweepSummary {
        axis_value,
        runs: rows.len(),
        median_rre_deg: median(&col(|r| r.rre_deg)),
        median_rte_m: median(&col(|r| r.rte_m)),
        median_toe_s: median(&col(|r| r.toe_s)),
        success_rate: if rows.is_empty() {
            0.0
        } else {
            rows.iter().filter(|r| r.success).count() as f64 / rows.len() as f64
        },
    }
}

pub fn write_rows_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "axis_value",
        "seed",
        "rre_deg",
        "rte_m",
        "toe_s",
        "success",
        "score",
        "iterations",
    ])?;
    for r in rows {
        w.write_record([
            fmt6(r.axis_value),
            r.seed.to_string(),
            fmt6(r.rre_deg),
            fmt6(r.rte_m),
            fmt6(r.toe_s),
            r.success.to_string(),
            fmt6(r.score),
            r.iterations.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_summary_csv<W: Write>(rows: &[SweepSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "axis_value",
        "runs",
        "median_rre_deg",
        "median_rte_m",
        "median_toe_s",
        "success_rate",
    ])?;
    for r in rows {
        w.write_record([
            fmt6(r.axis_value),
            r.runs.to_string(),
            fmt6(r.median_rre_deg),
            fmt6(r.median_rte_m),
            fmt6(r.median_toe_s),
            fmt6(r.success_rate),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

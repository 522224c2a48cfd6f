mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use trajcal::eval::{evaluate, run_sweep, write_rows_csv, write_summary_csv, MetricReport, SweepConfig};
use trajcal::io::{load_database, load_json, load_transform, save_database, save_json};
use trajcal::pipeline::{calibrate_detailed, update_continuous, CalibrationSession};
use trajcal::simulator::{make_pair, Layout};
use trajcal::store::{SessionStore, STORE_DIR_ENV};
use trajcal::{fmt6, Error, Transform4D};

use config::FileConfig;

#[derive(Parser)]
#[command(
    name = "trajcal",
    version,
    about = "Spatio-temporal calibration of two roadside sensors from tracked trajectories"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: dbP.jsonl, dbQ.jsonl and ground_truth.json.
    Simulate(SimulateArgs),
    /// Estimate the Q-to-P transform from two trajectory databases.
    Calibrate(CalibrateArgs),
    /// Compare a session or transform against ground truth.
    Evaluate(EvaluateArgs),
    /// Run simulate, calibrate and evaluate over a parameter grid.
    Sweep(SweepArgs),
    /// Fuse session files in order into one score-weighted session.
    FuseSessions(FuseArgs),
}

#[derive(Args)]
struct ScenarioOverrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Position noise standard deviation, meters.
    #[arg(long)]
    noise: Option<f64>,
    /// Q-to-P clock offset, seconds.
    #[arg(long)]
    offset: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioOverrides,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// four_way, three_way or sidewalk.
    #[arg(long)]
    layout: Option<Layout>,
    #[arg(long)]
    n_vehicles: Option<usize>,
    /// Yaw of Q relative to P, degrees.
    #[arg(long)]
    rotation: Option<f64>,
}

#[derive(Args)]
struct PipelineOverrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Feature distance threshold for motion matching.
    #[arg(long)]
    d_th: Option<f64>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    pipeline: PipelineOverrides,
    #[arg(long)]
    input_p: PathBuf,
    #[arg(long)]
    input_q: PathBuf,
    /// Session JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ground-truth transform; prints error metrics.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Fuse the session into the session store.
    #[arg(long)]
    continuous: bool,
    #[arg(long, env = STORE_DIR_ENV)]
    store_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Session JSON or bare transform JSON.
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Metric report JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Success threshold on the rotation error, degrees.
    #[arg(long, default_value_t = trajcal::eval::DEFAULT_RRE_THRESHOLD)]
    rre_threshold: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    scenario: ScenarioOverrides,
    /// Output directory for sweep_rows.csv and sweep_summary.csv.
    #[arg(long)]
    out: PathBuf,
    /// noise, n_vehicles, rotation, time_offset or passes.
    #[arg(long)]
    axis: Option<trajcal::eval::SweepAxis>,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Number of seeds, starting at --seed (default 0).
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    d_th: Option<f64>,
}

#[derive(Args)]
struct FuseArgs {
    /// Session files, oldest first.
    #[arg(long = "session", required = true)]
    sessions: Vec<PathBuf>,
    /// Fused session JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure that maps to exit code 2.
#[derive(Debug)]
struct QualityFailure(String);

impl std::fmt::Display for QualityFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for QualityFailure {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::FuseSessions(a) => cmd_fuse(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<QualityFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{}: no such file", path.display());
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn print_transform(tf: &Transform4D) {
    let (roll, pitch, yaw) = tf.rotation().euler_angles();
    let t = tf.translation();
    println!(
        "  rotation (roll, pitch, yaw) deg: {} {} {}",
        fmt6(roll.to_degrees()),
        fmt6(pitch.to_degrees()),
        fmt6(yaw.to_degrees())
    );
    println!("  translation m: {} {} {}", fmt6(t.x), fmt6(t.y), fmt6(t.z));
    println!("  time offset s: {}", fmt6(tf.time_offset()));
}

fn print_session(s: &CalibrationSession) {
    print_transform(&s.transform);
    println!("  score: {} (n_pp {}, n_po {})", fmt6(s.score), s.n_pp, s.n_po);
    println!("  iterations: {}, converged: {}", s.iterations_used, s.converged);
}

fn print_metrics(m: &MetricReport) {
    println!(
        "  RRE {} deg, RTE {} m, TOE {} s, success {}",
        fmt6(m.rre_deg),
        fmt6(m.rte_m),
        fmt6(m.toe_s),
        m.success
    );
}

fn cmd_simulate(a: SimulateArgs) -> anyhow::Result<ExitCode> {
    let file = FileConfig::load(a.scenario.config.as_deref())?;
    let mut sec = file.scenario;
    if let Some(v) = a.scenario.seed {
        sec.seed = v;
    }
    if let Some(v) = a.scenario.noise {
        sec.noise_sigma = v;
    }
    if let Some(v) = a.scenario.offset {
        sec.time_offset = v;
    }
    if let Some(v) = a.layout {
        sec.layout = v;
    }
    if let Some(v) = a.n_vehicles {
        sec.n_vehicles = v;
    }
    if let Some(v) = a.rotation {
        sec.rotation_deg = v;
    }
    let cfg = sec.to_config();
    cfg.validate().context("invalid scenario")?;
    ensure_dir(&a.out)?;
    if cfg.n_vehicles == 0 {
        warn!("n_vehicles is 0: writing empty databases");
    }
    let pair = make_pair(&cfg)?;
    save_database(&pair.db_p, a.out.join("dbP.jsonl"))?;
    save_database(&pair.db_q, a.out.join("dbQ.jsonl"))?;
    save_json(&pair.truth, a.out.join("ground_truth.json"))?;
    println!(
        "wrote {}: P {} tracks / {} positions, Q {} tracks / {} positions",
        a.out.display(),
        pair.db_p.trajectories().len(),
        pair.db_p.num_positions(),
        pair.db_q.trajectories().len(),
        pair.db_q.num_positions()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_calibrate(a: CalibrateArgs) -> anyhow::Result<ExitCode> {
    require_file(&a.input_p)?;
    require_file(&a.input_q)?;
    if let Some(t) = &a.truth {
        require_file(t)?;
    }
    if let Some(o) = &a.out {
        ensure_parent(o)?;
    }
    let mut cfg = FileConfig::load(a.pipeline.config.as_deref())?.pipeline;
    if let Some(v) = a.pipeline.max_iter {
        cfg.max_iterations = v;
    }
    if let Some(v) = a.pipeline.d_th {
        cfg.weights.d_th = v;
    }
    cfg.validate().context("invalid pipeline configuration")?;
    let store = if a.continuous {
        Some(SessionStore::open(
            a.store_dir.clone().unwrap_or_else(SessionStore::default_dir),
        )?)
    } else {
        None
    };

    let db_p = load_database(&a.input_p)?;
    let db_q = load_database(&a.input_q)?;
    info!(
        "loaded {} P and {} Q positions",
        db_p.num_positions(),
        db_q.num_positions()
    );
    let report = match calibrate_detailed(&db_p, &db_q, &cfg) {
        Ok(r) => r,
        Err(e @ Error::NoCandidateMatches { .. }) => return Err(QualityFailure(e.to_string()).into()),
        Err(e) => return Err(e.into()),
    };
    info!(
        "{} raw matches, {} after filtering, {} final pairs",
        report.raw_matches,
        report.filtered_matches,
        report.pairs.len()
    );
    let session = report.session;
    println!("session:");
    print_session(&session);
    if let Some(out) = &a.out {
        save_json(&session, out)?;
    }
    if let Some(t) = &a.truth {
        let truth = load_transform(t)?;
        println!("against ground truth:");
        print_metrics(&evaluate(
            &session.transform,
            &truth,
            trajcal::eval::DEFAULT_RRE_THRESHOLD,
        ));
    }
    if let Some(store) = store {
        if session.converged {
            let fused = store.commit(&session)?;
            println!("fused state ({}):", store.dir().display());
            print_session(&fused);
        } else {
            warn!("session did not converge; not added to {}", store.dir().display());
        }
    }
    if session.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(QualityFailure("calibration did not converge".into()).into())
    }
}

/// Accepts a session file or a bare transform file.
fn load_estimate(path: &Path) -> anyhow::Result<Transform4D> {
    if let Ok(s) = load_json::<CalibrationSession>(path) {
        return Ok(s.transform);
    }
    load_transform(path).with_context(|| format!("{} is neither a session nor a transform", path.display()))
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<ExitCode> {
    require_file(&a.session)?;
    require_file(&a.truth)?;
    if let Some(o) = &a.out {
        ensure_parent(o)?;
    }
    let est = load_estimate(&a.session)?;
    let truth = load_transform(&a.truth)?;
    let report = evaluate(&est, &truth, a.rre_threshold);
    print_metrics(&report);
    if let Some(out) = &a.out {
        save_json(&report, out)?;
    }
    if report.success {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(QualityFailure("estimate outside the success thresholds".into()).into())
    }
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<ExitCode> {
    let file = FileConfig::load(a.scenario.config.as_deref())?;
    let mut sec = file.scenario;
    if let Some(v) = a.scenario.noise {
        sec.noise_sigma = v;
    }
    if let Some(v) = a.scenario.offset {
        sec.time_offset = v;
    }
    let mut pipeline = file.pipeline;
    if let Some(v) = a.max_iter {
        pipeline.max_iterations = v;
    }
    if let Some(v) = a.d_th {
        pipeline.weights.d_th = v;
    }
    let mut seeds = file.sweep.seeds;
    if a.seeds.is_some() || a.scenario.seed.is_some() {
        let start = a.scenario.seed.unwrap_or(0);
        let n = a.seeds.unwrap_or(seeds.len() as u64);
        seeds = (start..start + n).collect();
    }
    let cfg = SweepConfig {
        axis: a.axis.unwrap_or(file.sweep.axis),
        values: a.values.unwrap_or(file.sweep.values),
        seeds,
        scenario: sec.to_config(),
        pipeline,
        rotation_deg: sec.rotation_deg,
        time_offset: sec.time_offset,
        rre_threshold: file.sweep.rre_threshold,
    };
    ensure_dir(&a.out)?;
    let (rows, summary) = run_sweep(&cfg)?;
    let rows_path = a.out.join("sweep_rows.csv");
    let summary_path = a.out.join("sweep_summary.csv");
    write_rows_csv(
        &rows,
        fs::File::create(&rows_path).with_context(|| rows_path.display().to_string())?,
    )?;
    write_summary_csv(
        &summary,
        fs::File::create(&summary_path).with_context(|| summary_path.display().to_string())?,
    )?;
    println!("axis_value  runs  median_rre_deg  median_rte_m  median_toe_s  success_rate");
    for s in &summary {
        println!(
            "{:>10}  {:>4}  {:>14}  {:>12}  {:>12}  {:>12}",
            fmt6(s.axis_value),
            s.runs,
            fmt6(s.median_rre_deg),
            fmt6(s.median_rte_m),
            fmt6(s.median_toe_s),
            fmt6(s.success_rate)
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_fuse(a: FuseArgs) -> anyhow::Result<ExitCode> {
    for s in &a.sessions {
        require_file(s)?;
    }
    if let Some(o) = &a.out {
        ensure_parent(o)?;
    }
    let mut fused: Option<CalibrationSession> = None;
    for path in &a.sessions {
        let s: CalibrationSession = load_json(path)?;
        fused = Some(match fused {
            None => s,
            Some(prev) => match update_continuous(&prev, &s) {
                Ok(f) => f,
                Err(e @ Error::BothZeroScore) => {
                    warn!("{}: {e}", path.display());
                    prev
                }
                Err(e) => return Err(e.into()),
            },
        });
    }
    let fused = fused.expect("at least one session");
    if fused.score == 0.0 {
        return Err(QualityFailure("every session has zero score".into()).into());
    }
    println!("fused session:");
    print_session(&fused);
    if let Some(out) = &a.out {
        save_json(&fused, out)?;
    }
    Ok(ExitCode::SUCCESS)
}

//! Synthetic intersection traffic observed by two roadside sensors.
//!
//! Paths are analytic: straight lanes joined by circular fillets. Both sensors
//! fire on a shared world trigger every `frame_period`; each stamps a frame
//! with its own clock, so the Q stamps are the P stamps shifted by the
//! ground-truth clock offset. Observed track ids are `"{object}.{segment}"`,
//! where a new segment starts whenever the object leaves and re-enters range.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, ObjectClass, Position, TrackId, Trajectory, TrajectoryDatabase, Transform4D};

/// Distance from the intersection centre to where vehicles enter and leave.
pub const ARM_LENGTH: f64 = 150.0;
/// Lateral offsets of the two right-hand lanes from the road centre line.
pub const LANE_OFFSETS: [f64; 2] = [1.75, 5.25];
/// Default sensor separation on the intersection diagonal.
pub const SENSOR_SEPARATION: f64 = 28.8;
pub const SENSOR_HEIGHT: f64 = 4.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    FourWay,
    ThreeWay,
    Sidewalk,
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "four_way" => Ok(Layout::FourWay),
            "three_way" => Ok(Layout::ThreeWay),
            "sidewalk" => Ok(Layout::Sidewalk),
            _ => Err(Error::InvalidInput(format!(
                "unknown layout {s:?} (expected four_way, three_way or sidewalk)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub layout: Layout,
    /// Objects crossing the scene over the union of both capture windows.
    pub n_vehicles: usize,
    /// Length of each sensor's capture window in its own clock, seconds.
    pub duration: f64,
    pub frame_period: f64,
    pub range_p: f64,
    pub range_q: f64,
    /// World-to-sensor transforms; the time part maps world time to stamps.
    pub pose_p: Transform4D,
    pub pose_q: Transform4D,
    pub noise_sigma: f64,
    /// Per-dimension standard deviation of reported box sizes.
    pub bbox_noise: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let (pose_p, pose_q) = diagonal_poses(0.0, 0.5);
        ScenarioConfig {
            layout: Layout::FourWay,
            n_vehicles: 100,
            duration: 120.0,
            frame_period: 0.1,
            range_p: 60.0,
            range_q: 60.0,
            pose_p,
            pose_q,
            noise_sigma: 0.2,
            bbox_noise: 0.05,
            dropout_rate: 0.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::InvalidInput(format!("{field}: {msg}")));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration", "must be positive");
        }
        if !(self.frame_period > 0.0 && self.frame_period.is_finite()) {
            return bad("frame_period", "must be positive");
        }
        if !(self.range_p > 0.0) || !(self.range_q > 0.0) {
            return bad("range_p/range_q", "must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be finite and >= 0");
        }
        if !(self.bbox_noise >= 0.0 && self.bbox_noise.is_finite()) {
            return bad("bbox_noise", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate", "must be in [0, 1)");
        }
        Ok(())
    }

    /// Exact Q-to-P transform implied by the two poses.
    pub fn ground_truth(&self) -> Transform4D {
        self.pose_p.compose(&self.pose_q.inverse())
    }
}

/// World-to-sensor transform for a sensor mounted at `centre` with the given
/// attitude, whose clock reads `world + clock_offset`.
pub fn sensor_pose(
    centre: Vector3<f64>,
    roll_deg: f64,
    pitch_deg: f64,
    yaw_deg: f64,
    clock_offset: f64,
) -> Transform4D {
    let mount = UnitQuaternion::from_euler_angles(roll_deg.to_radians(), pitch_deg.to_radians(), yaw_deg.to_radians());
    let inv = mount.inverse();
    Transform4D::new(inv, -(inv * centre), clock_offset)
}

/// Two slightly tilted sensors on opposite corners of the intersection,
/// `SENSOR_SEPARATION` apart. Q is yawed by `rotation_deg` relative to P and
/// its clock lags P's by `time_offset`, so the Q-to-P offset is `time_offset`.
pub fn diagonal_poses(rotation_deg: f64, time_offset: f64) -> (Transform4D, Transform4D) {
    let h = SENSOR_SEPARATION / (2.0 * 2f64.sqrt());
    let pose_p = sensor_pose(Vector3::new(-h, -h, SENSOR_HEIGHT), 0.3, -0.5, 45.0, 0.0);
    let pose_q = sensor_pose(
        Vector3::new(h, h, SENSOR_HEIGHT),
        -0.4,
        0.6,
        45.0 + rotation_deg,
        -time_offset,
    );
    (pose_p, pose_q)
}

#[derive(Clone, Copy, Debug)]
enum Segment {
    Line {
        a: Vector2<f64>,
        dir: Vector2<f64>,
        len: f64,
    },
    Arc {
        c: Vector2<f64>,
        r: f64,
        a0: f64,
        sweep: f64,
    },
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Line { len, .. } => len,
            Segment::Arc { r, sweep, .. } => r * sweep.abs(),
        }
    }

    fn at(&self, s: f64) -> Vector2<f64> {
        match *self {
            Segment::Line { a, dir, .. } => a + dir * s,
            Segment::Arc { c, r, a0, sweep } => {
                let th = a0 + sweep.signum() * s / r;
                c + Vector2::new(th.cos(), th.sin()) * r
            }
        }
    }
}

/// Arc-length parameterised planar path.
#[derive(Clone, Debug)]
pub struct Path {
    segments: Vec<Segment>,
    starts: Vec<f64>,
    length: f64,
}

fn cross(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

impl Path {
    /// Polyline through `waypoints` with each interior corner replaced by a
    /// tangent circular arc of radius `radius`.
    pub fn filleted(waypoints: &[Vector2<f64>], radius: f64) -> Path {
        let mut segments = Vec::new();
        let mut cursor = waypoints[0];
        for i in 1..waypoints.len() {
            let v = waypoints[i];
            let d1 = (v - waypoints[i - 1]).normalize();
            if i + 1 < waypoints.len() {
                let d2 = (waypoints[i + 1] - v).normalize();
                let turn = cross(&d1, &d2).atan2(d1.dot(&d2));
                let tlen = radius * (turn.abs() / 2.0).tan();
                let t1 = v - d1 * tlen;
                segments.push(Segment::Line {
                    a: cursor,
                    dir: d1,
                    len: (t1 - cursor).norm(),
                });
                if turn.abs() > 1e-12 {
                    let normal = if turn > 0.0 {
                        Vector2::new(-d1.y, d1.x)
                    } else {
                        Vector2::new(d1.y, -d1.x)
                    };
                    let c = t1 + normal * radius;
                    let a0 = (t1.y - c.y).atan2(t1.x - c.x);
                    segments.push(Segment::Arc {
                        c,
                        r: radius,
                        a0,
                        sweep: turn,
                    });
                }
                cursor = v + d2 * tlen;
            } else {
                segments.push(Segment::Line {
                    a: cursor,
                    dir: d1,
                    len: (v - cursor).norm(),
                });
            }
        }
        let mut starts = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for s in &segments {
            starts.push(acc);
            acc += s.length();
        }
        Path {
            segments,
            starts,
            length: acc,
        }
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Point at arc length `s`, clamped to the path.
    pub fn at(&self, s: f64) -> Vector2<f64> {
        let s = s.clamp(0.0, self.length);
        let i = self.starts.partition_point(|x| *x <= s).saturating_sub(1);
        self.segments[i].at(s - self.starts[i])
    }
}

/// Smoothly varying speed `v0 (1 + a sin(w t + phi))` integrated in closed form.
#[derive(Clone, Copy, Debug)]
pub struct SpeedProfile {
    pub v0: f64,
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

impl SpeedProfile {
    pub fn distance(&self, tau: f64) -> f64 {
        let SpeedProfile {
            v0,
            amplitude,
            omega,
            phase,
        } = *self;
        v0 * tau - v0 * amplitude / omega * ((omega * tau + phase).cos() - phase.cos())
    }

    pub fn speed(&self, tau: f64) -> f64 {
        self.v0 * (1.0 + self.amplitude * (self.omega * tau + self.phase).sin())
    }

    /// Time at which `distance` reaches `s`.
    pub fn time_at(&self, s: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, s / (self.v0 * (1.0 - self.amplitude)) + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.distance(mid) < s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// One simulated object: its path, speed and size.
#[derive(Clone, Debug)]
pub struct Actor {
    pub path: Path,
    pub speed: SpeedProfile,
    pub class: ObjectClass,
    pub bbox: BoundingBox,
    /// World time at which the object is at the start of its path.
    pub t_enter: f64,
}

impl Actor {
    pub fn location(&self, t: f64) -> Option<Vector3<f64>> {
        let tau = t - self.t_enter;
        if tau < 0.0 {
            return None;
        }
        let s = self.speed.distance(tau);
        if s > self.path.length() {
            return None;
        }
        let xy = self.path.at(s);
        Some(Vector3::new(xy.x, xy.y, self.bbox.height / 2.0))
    }
}

fn arm_dir(arm: usize) -> Vector2<f64> {
    let a = arm as f64 * std::f64::consts::FRAC_PI_2;
    Vector2::new(a.cos().round(), a.sin().round())
}

fn right_of(d: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(d.y, -d.x)
}

/// Lane path entering on arm `from` and leaving on arm `to`.
fn road_path(from: usize, to: usize, lane_in: f64, lane_out: f64, radius: f64) -> Path {
    let d1 = -arm_dir(from);
    let d2 = arm_dir(to);
    let start = arm_dir(from) * ARM_LENGTH + right_of(d1) * lane_in;
    let end = d2 * ARM_LENGTH + right_of(d2) * lane_out;
    if (d1 - d2).norm() < 1e-9 {
        return Path::filleted(&[start, end], radius);
    }
    // Corner where the two lane centre lines meet.
    let w = end - start;
    let alpha = cross(&w, &(-d2)) / cross(&d1, &(-d2));
    let corner = start + d1 * alpha;
    Path::filleted(&[start, corner, end], radius)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn vehicle_body(rng: &mut ChaCha8Rng) -> (ObjectClass, BoundingBox) {
    if rng.gen_bool(0.15) {
        let b = BoundingBox::new(uniform(rng, 7.0, 12.0), uniform(rng, 2.4, 2.6), uniform(rng, 3.0, 3.8));
        (ObjectClass::Truck, b)
    } else {
        let b = BoundingBox::new(uniform(rng, 4.2, 5.0), uniform(rng, 1.7, 2.0), uniform(rng, 1.4, 1.7));
        (ObjectClass::Car, b)
    }
}

fn speed_profile(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> SpeedProfile {
    SpeedProfile {
        v0: uniform(rng, lo, hi),
        amplitude: uniform(rng, 0.05, 0.15),
        omega: uniform(rng, 0.2, 0.6),
        phase: uniform(rng, 0.0, std::f64::consts::TAU),
    }
}

fn road_actor(rng: &mut ChaCha8Rng, arms: &[usize]) -> Actor {
    let from = arms[rng.gen_range(0..arms.len())];
    let straight = (from + 2) % 4;
    let left = (from + 3) % 4;
    let right = (from + 1) % 4;
    let options: Vec<(usize, f64)> = [(straight, 0.6), (left, 0.2), (right, 0.2)]
        .into_iter()
        .filter(|(a, _)| arms.contains(a))
        .collect();
    let total: f64 = options.iter().map(|o| o.1).sum();
    let mut pick = uniform(rng, 0.0, total);
    let mut to = options[0].0;
    for (a, w) in &options {
        if pick < *w {
            to = *a;
            break;
        }
        pick -= w;
    }
    let radius = uniform(rng, 8.0, 20.0);
    let (lane_in, lane_out, lo, hi) = if to == straight {
        let l = LANE_OFFSETS[rng.gen_range(0..2)];
        (l, l, 6.0, 13.0)
    } else if to == left {
        (LANE_OFFSETS[0], LANE_OFFSETS[0], 4.0, 9.0)
    } else {
        (LANE_OFFSETS[1], LANE_OFFSETS[1], 4.0, 9.0)
    };
    let path = road_path(from, to, lane_in, lane_out, radius);
    let speed = speed_profile(rng, lo, hi);
    let (class, bbox) = vehicle_body(rng);
    Actor {
        path,
        speed,
        class,
        bbox,
        t_enter: 0.0,
    }
}

fn sidewalk_actor(rng: &mut ChaCha8Rng) -> Actor {
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let heading = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    if rng.gen_bool(0.3) {
        // Bicycle in the kerbside lane.
        let y = side * 5.0;
        let path = Path::filleted(
            &[Vector2::new(-heading * 80.0, y), Vector2::new(heading * 80.0, y)],
            1.0,
        );
        let bbox = BoundingBox::new(uniform(rng, 1.6, 1.9), uniform(rng, 0.5, 0.7), uniform(rng, 1.5, 1.8));
        return Actor {
            path,
            speed: speed_profile(rng, 3.0, 6.0),
            class: ObjectClass::Bicycle,
            bbox,
            t_enter: 0.0,
        };
    }
    let y = side * (8.5 + heading * side * 0.7);
    let len_a = uniform(rng, 20.0, 40.0);
    let len_b = uniform(rng, 20.0, 40.0);
    let start = Vector2::new(-heading * len_a, y);
    let waypoints = if rng.gen_bool(0.4) {
        // Crosses the street on the crosswalk at x = 0, then carries on.
        let y2 = -side * (8.5 - heading * side * 0.7);
        let x = uniform(rng, -1.5, 1.5);
        vec![
            start,
            Vector2::new(x, y),
            Vector2::new(x, y2),
            Vector2::new(x + heading * len_b, y2),
        ]
    } else {
        vec![start, Vector2::new(heading * len_b, y)]
    };
    let bbox = BoundingBox::new(uniform(rng, 0.5, 0.8), uniform(rng, 0.5, 0.8), uniform(rng, 1.5, 1.9));
    Actor {
        path: Path::filleted(&waypoints, uniform(rng, 1.0, 3.0)),
        speed: speed_profile(rng, 0.5, 2.0),
        class: ObjectClass::Pedestrian,
        bbox,
        t_enter: 0.0,
    }
}

/// World-time window covered by either sensor's capture window.
fn world_window(cfg: &ScenarioConfig) -> (f64, f64) {
    let (dp, dq) = (cfg.pose_p.time_offset(), cfg.pose_q.time_offset());
    ((-dp).min(-dq), (cfg.duration - dp).max(cfg.duration - dq))
}

/// Objects of the scenario with their crossing times drawn uniformly over the
/// world window.
pub fn generate_actors(cfg: &ScenarioConfig) -> Vec<Actor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w0, w1) = world_window(cfg);
    (0..cfg.n_vehicles)
        .map(|_| {
            let mut actor = match cfg.layout {
                Layout::FourWay => road_actor(&mut rng, &[0, 1, 2, 3]),
                Layout::ThreeWay => road_actor(&mut rng, &[0, 2, 3]),
                Layout::Sidewalk => sidewalk_actor(&mut rng),
            };
            let t_mid = uniform(&mut rng, w0, w1);
            actor.t_enter = t_mid - actor.speed.time_at(actor.path.length() / 2.0);
            actor
        })
        .collect()
}

/// World-frame trajectories sampled on the shared trigger `k * frame_period`.
/// Track ids are the object index and world frame numbers count from the
/// first trigger of the world window.
pub fn generate_world_trajectories(cfg: &ScenarioConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let fp = cfg.frame_period;
    let (w0, w1) = world_window(cfg);
    let k_min = (w0 / fp).floor() as i64 - 1;
    let k_max = (w1 / fp).ceil() as i64 + 1;
    let mut out = Vec::new();
    for (i, actor) in generate_actors(cfg).iter().enumerate() {
        let id = TrackId::new(i.to_string());
        let positions: Vec<Position> = (k_min..=k_max)
            .filter_map(|k| {
                let t = k as f64 * fp;
                actor.location(t).map(|location| Position {
                    location,
                    t,
                    frame: (k - k_min) as u64,
                    bbox: actor.bbox,
                    class: actor.class,
                    track_id: id.clone(),
                })
            })
            .collect();
        if !positions.is_empty() {
            out.push(Trajectory::new(id, positions)?);
        }
    }
    Ok(out)
}

/// Measurement model of one sensor.
#[derive(Clone, Copy, Debug)]
pub struct SensorModel {
    pub pose: Transform4D,
    pub range: f64,
    pub frame_period: f64,
    /// Capture window `[0, duration)` in the sensor's clock.
    pub duration: f64,
    pub noise_sigma: f64,
    pub bbox_noise: f64,
    pub dropout_rate: f64,
}

/// Object id of an observed track id `"{object}.{segment}"`.
pub fn object_of(track: &TrackId) -> &str {
    track.as_str().split('.').next().unwrap_or("")
}

/// Maps world trajectories into a sensor's frame and clock, keeps stamps
/// inside the capture window and positions within range, adds noise and
/// dropout, and splits tracks where the object leaves range.
pub fn observe(
    world: &[Trajectory],
    sensor_id: &str,
    model: &SensorModel,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryDatabase> {
    if !(model.noise_sigma >= 0.0) || !(0.0..1.0).contains(&model.dropout_rate) {
        return Err(Error::InvalidInput("noise must be >= 0 and dropout in [0, 1)".into()));
    }
    let noise = Normal::new(0.0, model.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let box_noise = Normal::new(0.0, model.bbox_noise).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let dt = model.pose.time_offset();
    // Sub-frame phase of this sensor's trigger on its own clock; frame numbers
    // count whole periods from the phase, so half-period offsets do not tie.
    let phase = dt - model.frame_period * (dt / model.frame_period).floor();
    let mut trajectories = Vec::new();
    for w in world {
        let mut segment = 0usize;
        let mut current: Vec<Position> = Vec::new();
        let mut last_visible: Option<u64> = None;
        let mut flush = |current: &mut Vec<Position>, segment: &mut usize| -> Result<()> {
            if current.len() >= 2 {
                let id = current[0].track_id.clone();
                trajectories.push(Trajectory::new(id, std::mem::take(current))?);
                *segment += 1;
            } else if !current.is_empty() {
                current.clear();
                *segment += 1;
            }
            Ok(())
        };
        for p in w.positions() {
            let stamp = p.t + dt;
            if !(0.0..model.duration).contains(&stamp) {
                continue;
            }
            let x = model.pose.apply_point(&p.location);
            if x.norm() > model.range {
                continue;
            }
            if let Some(prev) = last_visible {
                if p.frame != prev + 1 {
                    flush(&mut current, &mut segment)?;
                }
            }
            last_visible = Some(p.frame);
            // Draw noise before dropout so the stream does not depend on which
            // positions survive.
            let n = Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
            let b = [box_noise.sample(rng), box_noise.sample(rng), box_noise.sample(rng)];
            let keep = model.dropout_rate == 0.0 || rng.gen::<f64>() >= model.dropout_rate;
            if !keep {
                continue;
            }
            let bbox = BoundingBox::new(
                (p.bbox.length + b[0]).max(0.1),
                (p.bbox.width + b[1]).max(0.1),
                (p.bbox.height + b[2]).max(0.1),
            );
            let frame = ((stamp - phase) / model.frame_period).round().max(0.0) as u64;
            current.push(Position {
                location: if model.noise_sigma > 0.0 { x + n } else { x },
                t: stamp,
                frame,
                bbox: if model.bbox_noise > 0.0 { bbox } else { p.bbox },
                class: p.class,
                track_id: TrackId::new(format!("{}.{}", w.track_id(), segment)),
            });
        }
        flush(&mut current, &mut segment)?;
    }
    TrajectoryDatabase::new(sensor_id, trajectories, model.frame_period, model.range)
}

/// Both observed databases and the exact Q-to-P transform.
#[derive(Clone, Debug)]
pub struct SimulatedPair {
    pub db_p: TrajectoryDatabase,
    pub db_q: TrajectoryDatabase,
    pub truth: Transform4D,
}

impl SimulatedPair {
    /// Whether a P and a Q position show the same object at the same instant.
    pub fn is_true_match(&self, p: &Position, q: &Position) -> bool {
        object_of(&p.track_id) == object_of(&q.track_id)
            && (p.t - self.truth.apply_time(q.t)).abs() < self.db_p.frame_period() / 2.0
    }
}

pub fn make_pair(cfg: &ScenarioConfig) -> Result<SimulatedPair> {
    let world = generate_world_trajectories(cfg)?;
    let model = |pose: Transform4D, range: f64| SensorModel {
        pose,
        range,
        frame_period: cfg.frame_period,
        duration: cfg.duration,
        noise_sigma: cfg.noise_sigma,
        bbox_noise: cfg.bbox_noise,
        dropout_rate: cfg.dropout_rate,
    };
    let mut rng_p = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_p.set_stream(1);
    let mut rng_q = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_q.set_stream(2);
    let db_p = observe(&world, "P", &model(cfg.pose_p, cfg.range_p), &mut rng_p)?;
    let db_q = observe(&world, "Q", &model(cfg.pose_q, cfg.range_q), &mut rng_q)?;
    Ok(SimulatedPair {
        db_p,
        db_q,
        truth: cfg.ground_truth(),
    })
}

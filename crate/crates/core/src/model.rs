//! Domain types shared by every stage: timestamped positions, trajectories,
//! per-sensor trajectory databases and the rigid-plus-clock transform that
//! relates two sensors.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque tracker-assigned identifier. Cheap to clone.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrackId(Arc<str>);

impl TrackId {
    pub fn new(id: impl AsRef<str>) -> Self {
        TrackId(Arc::from(id.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for TrackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for TrackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TrackId {
    fn from(s: &str) -> Self {
        TrackId::new(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Truck,
    Pedestrian,
    Bicycle,
    Other,
}

impl ObjectClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Bicycle => "bicycle",
            ObjectClass::Other => "other",
        }
    }
}

/// Object extent in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn new(length: f64, width: f64, height: f64) -> Self {
        BoundingBox { length, width, height }
    }

    pub fn is_valid(&self) -> bool {
        [self.length, self.width, self.height]
            .iter()
            .all(|d| d.is_finite() && *d > 0.0)
    }

    /// Sum of absolute per-dimension differences.
    pub fn l1_distance(&self, other: &BoundingBox) -> f64 {
        (self.length - other.length).abs() + (self.width - other.width).abs() + (self.height - other.height).abs()
    }
}

/// One observation of one tracked object, in the owning sensor's frame and clock.
#[derive(Clone, Debug, PartialEq)]
pub struct Position {
    pub location: Vector3<f64>,
    /// Seconds on the owning sensor's clock.
    pub t: f64,
    pub frame: u64,
    pub bbox: BoundingBox,
    pub class: ObjectClass,
    pub track_id: TrackId,
}

impl Position {
    pub fn distance(&self, other: &Position) -> f64 {
        (self.location - other.location).norm()
    }
}

/// Time-ordered observations of a single object.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    track_id: TrackId,
    positions: Vec<Position>,
}

impl Trajectory {
    pub fn new(track_id: TrackId, positions: Vec<Position>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidInput(format!("track {track_id} has no positions")));
        }
        let class = positions[0].class;
        for (i, p) in positions.iter().enumerate() {
            if p.track_id != track_id {
                return Err(Error::InvalidInput(format!(
                    "position {i} of track {track_id} carries track id {}",
                    p.track_id
                )));
            }
            if p.class != class {
                return Err(Error::InvalidInput(format!(
                    "track {track_id} mixes classes {} and {}",
                    class.as_str(),
                    p.class.as_str()
                )));
            }
            if !p.bbox.is_valid() {
                return Err(Error::InvalidInput(format!(
                    "position {i} of track {track_id} has a non-positive bounding box"
                )));
            }
            if !p.t.is_finite() || !p.location.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "position {i} of track {track_id} is not finite"
                )));
            }
            if i > 0 {
                let prev = &positions[i - 1];
                if p.t <= prev.t || p.frame <= prev.frame {
                    return Err(Error::DegenerateTimestep {
                        track_id: track_id.to_string(),
                        index: i,
                    });
                }
            }
        }
        Ok(Trajectory { track_id, positions })
    }

    pub fn track_id(&self) -> &TrackId {
        &self.track_id
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn class(&self) -> ObjectClass {
        self.positions[0].class
    }

    pub fn start_time(&self) -> f64 {
        self.positions[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.positions[self.positions.len() - 1].t
    }

    /// Index of the sample observed at `frame`, if any.
    pub fn index_of_frame(&self, frame: u64) -> Option<usize> {
        self.positions.binary_search_by_key(&frame, |p| p.frame).ok()
    }

    /// Index of the sample whose timestamp is closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let i = self.positions.partition_point(|p| p.t < t);
        if i == 0 {
            0
        } else if i == self.positions.len() {
            i - 1
        } else if (self.positions[i].t - t) < (t - self.positions[i - 1].t) {
            i
        } else {
            i - 1
        }
    }

    /// Piecewise-linear position at time `t`, or `None` outside the observed span.
    pub fn interpolate(&self, t: f64) -> Option<Vector3<f64>> {
        let ps = &self.positions;
        if t < ps[0].t || t > ps[ps.len() - 1].t {
            return None;
        }
        let i = ps.partition_point(|p| p.t < t);
        if i == 0 {
            return Some(ps[0].location);
        }
        let (a, b) = (&ps[i - 1], &ps[i]);
        let f = (t - a.t) / (b.t - a.t);
        Some(a.location + (b.location - a.location) * f)
    }

    fn map(&self, tf: &Transform4D) -> Trajectory {
        Trajectory {
            track_id: self.track_id.clone(),
            positions: self.positions.iter().map(|p| tf.apply(p)).collect(),
        }
    }
}

/// All trajectories reported by one sensor over a recording window.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDatabase {
    sensor_id: String,
    trajectories: Vec<Trajectory>,
    frame_period: f64,
    sensing_range: f64,
}

impl TrajectoryDatabase {
    pub fn new(
        sensor_id: impl Into<String>,
        trajectories: Vec<Trajectory>,
        frame_period: f64,
        sensing_range: f64,
    ) -> Result<Self> {
        if !(frame_period > 0.0 && frame_period.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "frame_period must be positive, got {frame_period}"
            )));
        }
        if !(sensing_range > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sensing_range must be positive, got {sensing_range}"
            )));
        }
        let mut seen = HashSet::new();
        for traj in &trajectories {
            if !seen.insert(traj.track_id().clone()) {
                return Err(Error::InvalidInput(format!("duplicate track id {}", traj.track_id())));
            }
        }
        Ok(TrajectoryDatabase {
            sensor_id: sensor_id.into(),
            trajectories,
            frame_period,
            sensing_range,
        })
    }

    pub fn sensor_id(&self) -> &str {
        &self.sensor_id
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    pub fn sensing_range(&self) -> f64 {
        self.sensing_range
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_positions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn position(&self, r: PosRef) -> &Position {
        &self.trajectories[r.traj].positions[r.pos]
    }

    /// Every position expressed through `tf`; ids, boxes and frames are kept.
    pub fn transformed(&self, tf: &Transform4D) -> TrajectoryDatabase {
        TrajectoryDatabase {
            sensor_id: self.sensor_id.clone(),
            trajectories: self.trajectories.iter().map(|t| t.map(tf)).collect(),
            frame_period: self.frame_period,
            sensing_range: self.sensing_range,
        }
    }
}

/// Address of a position inside a database: trajectory index, position index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PosRef {
    pub traj: usize,
    pub pos: usize,
}

impl PosRef {
    pub fn new(traj: usize, pos: usize) -> Self {
        PosRef { traj, pos }
    }
}

/// Rigid rotation and translation plus a constant clock offset.
///
/// `apply` maps `(x, t)` to `(R x + T, t + time_offset)`. The rotation is kept
/// as a unit quaternion with non-negative scalar part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "TransformRecord", into = "TransformRecord")]
pub struct Transform4D {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
    time_offset: f64,
}

impl Transform4D {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>, time_offset: f64) -> Self {
        Transform4D {
            rotation: canonical(rotation),
            translation,
            time_offset,
        }
    }

    pub fn identity() -> Self {
        Transform4D::new(UnitQuaternion::identity(), Vector3::zeros(), 0.0)
    }

    /// Builds from intrinsic Z-Y-X Euler angles in degrees.
    pub fn from_euler_deg(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>, time_offset: f64) -> Self {
        let q = UnitQuaternion::from_euler_angles(roll.to_radians(), pitch.to_radians(), yaw.to_radians());
        Transform4D::new(q, translation, time_offset)
    }

    pub fn from_yaw_deg(yaw: f64, translation: Vector3<f64>, time_offset: f64) -> Self {
        Transform4D::from_euler_deg(0.0, 0.0, yaw, translation, time_offset)
    }

    /// Builds from a rotation matrix; the matrix is projected onto SO(3).
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>, time_offset: f64) -> Self {
        let rot = Rotation3::from_matrix(rotation);
        Transform4D::new(UnitQuaternion::from_rotation_matrix(&rot), translation, time_offset)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn time_offset(&self) -> f64 {
        self.time_offset
    }

    pub fn apply_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn apply_time(&self, t: f64) -> f64 {
        t + self.time_offset
    }

    pub fn apply(&self, p: &Position) -> Position {
        Position {
            location: self.apply_point(&p.location),
            t: self.apply_time(p.t),
            ..p.clone()
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Transform4D) -> Transform4D {
        Transform4D::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
            self.time_offset + other.time_offset,
        )
    }

    pub fn inverse(&self) -> Transform4D {
        let inv = self.rotation.inverse();
        Transform4D::new(inv, -(inv * self.translation), -self.time_offset)
    }
}

impl Default for Transform4D {
    fn default() -> Self {
        Transform4D::identity()
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let q = UnitQuaternion::new_normalize(q.into_inner());
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformRecord {
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    tx: f64,
    ty: f64,
    tz: f64,
    dt: f64,
}

impl From<TransformRecord> for Transform4D {
    fn from(r: TransformRecord) -> Self {
        let q = UnitQuaternion::new_normalize(Quaternion::new(r.qw, r.qx, r.qy, r.qz));
        Transform4D::new(q, Vector3::new(r.tx, r.ty, r.tz), r.dt)
    }
}

impl From<Transform4D> for TransformRecord {
    fn from(tf: Transform4D) -> Self {
        let q = tf.rotation.quaternion();
        TransformRecord {
            qw: q.w,
            qx: q.i,
            qy: q.j,
            qz: q.k,
            tx: tf.translation.x,
            ty: tf.translation.y,
            tz: tf.translation.z,
            dt: tf.time_offset,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pos(x: f64, y: f64, z: f64, t: f64) -> Position {
        Position {
            location: Vector3::new(x, y, z),
            t,
            frame: 0,
            bbox: BoundingBox::new(4.5, 1.8, 1.5),
            class: ObjectClass::Car,
            track_id: TrackId::new("a"),
        }
    }

    fn assert_pos_eq(a: &Position, b: &Position, tol: f64) {
        assert_abs_diff_eq!(a.location.x, b.location.x, epsilon = tol);
        assert_abs_diff_eq!(a.location.y, b.location.y, epsilon = tol);
        assert_abs_diff_eq!(a.location.z, b.location.z, epsilon = tol);
        assert_abs_diff_eq!(a.t, b.t, epsilon = tol);
    }

    #[test]
    fn identity_apply() {
        let p = pos(1.0, 2.0, 3.0, 5.0);
        assert_eq!(Transform4D::identity().apply(&p), p);
    }

    #[test]
    fn quarter_turn_yaw() {
        let tf = Transform4D::from_yaw_deg(90.0, Vector3::zeros(), 0.0);
        let q = tf.apply(&pos(1.0, 0.0, 0.0, 0.0));
        assert_pos_eq(&q, &pos(0.0, 1.0, 0.0, 0.0), 1e-12);
    }

    #[test]
    fn yaw30_matrix_and_sandwich_agree() {
        let tf = Transform4D::from_yaw_deg(30.0, Vector3::new(10.0, -5.0, 2.0), 0.5);
        let out = tf.apply(&pos(2.0, 0.0, 0.0, 1.0));

        // Hand-rolled rotation matrix.
        let (s, c) = 30f64.to_radians().sin_cos();
        let by_matrix = [c * 2.0 + 10.0, s * 2.0 - 5.0, 2.0];

        // Quaternion sandwich q v q*, with q = (cos 15°, 0, 0, sin 15°).
        let (hs, hc) = 15f64.to_radians().sin_cos();
        let qmul = |a: [f64; 4], b: [f64; 4]| {
            [
                a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
            ]
        };
        let q = [hc, 0.0, 0.0, hs];
        let qc = [hc, 0.0, 0.0, -hs];
        let r = qmul(qmul(q, [0.0, 2.0, 0.0, 0.0]), qc);
        let by_sandwich = [r[1] + 10.0, r[2] - 5.0, r[3] + 2.0];

        for k in 0..3 {
            assert_abs_diff_eq!(by_matrix[k], by_sandwich[k], epsilon = 1e-12);
            assert_abs_diff_eq!(out.location[k], by_matrix[k], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(out.t, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.location.x, 11.732050807568877, epsilon = 1e-12);
    }

    #[test]
    fn invert_pure_translation() {
        let tf = Transform4D::new(UnitQuaternion::identity(), Vector3::new(1.0, 2.0, 3.0), 4.0);
        let inv = tf.inverse();
        assert_eq!(*inv.translation(), Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(inv.time_offset(), -4.0);
        assert_eq!(Transform4D::identity().inverse(), Transform4D::identity());
    }

    #[test]
    fn invert_round_trip_yaw73() {
        let tf = Transform4D::from_yaw_deg(73.0, Vector3::new(5.0, 1.0, 0.0), 1.2);
        let inv = tf.inverse();
        let mut state = 7u64;
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 200.0 - 100.0
        };
        for _ in 0..100 {
            let p = pos(next(), next(), next(), next());
            assert_pos_eq(&inv.apply(&tf.apply(&p)), &p, 1e-9);
        }
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let b = Transform4D::from_euler_deg(3.0, -2.0, 140.0, Vector3::new(1.0, 2.0, 3.0), -0.25);
        let c = Transform4D::identity().compose(&b);
        assert_abs_diff_eq!(c.rotation().angle_to(b.rotation()), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((c.translation() - b.translation()).norm(), 0.0, epsilon = 1e-12);
        let id = b.compose(&b.inverse());
        assert!(id.rotation().angle() < 1e-9);
        assert!(id.translation().norm() < 1e-9);
        assert!(id.time_offset().abs() < 1e-12);
    }

    #[test]
    fn canonical_scalar_part_non_negative() {
        let q = UnitQuaternion::new_normalize(Quaternion::new(-0.5, 0.5, 0.5, 0.5));
        let tf = Transform4D::new(q, Vector3::zeros(), 0.0);
        assert!(tf.rotation().w >= 0.0);
    }

    #[test]
    fn json_field_names() {
        let tf = Transform4D::from_yaw_deg(90.0, Vector3::new(1.0, 2.0, 3.0), 0.5);
        let v: serde_json::Value = serde_json::to_value(tf).unwrap();
        for key in ["qw", "qx", "qy", "qz", "tx", "ty", "tz", "dt"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: Transform4D = serde_json::from_value(v).unwrap();
        assert_abs_diff_eq!(back.rotation().angle_to(tf.rotation()), 0.0, epsilon = 1e-12);
        assert!(serde_json::from_str::<Transform4D>(r#"{"qw":1,"qx":0,"qy":0,"qz":0,"tx":0,"ty":0,"tz":0}"#).is_err());
    }

    #[test]
    fn trajectory_rejects_unsorted_and_bad_boxes() {
        let mut a = pos(0.0, 0.0, 0.0, 1.0);
        let mut b = pos(1.0, 0.0, 0.0, 0.5);
        b.frame = 1;
        assert!(matches!(
            Trajectory::new(TrackId::new("a"), vec![a.clone(), b.clone()]),
            Err(Error::DegenerateTimestep { index: 1, .. })
        ));
        a.bbox.width = 0.0;
        assert!(Trajectory::new(TrackId::new("a"), vec![a]).is_err());
        assert!(Trajectory::new(TrackId::new("a"), vec![]).is_err());
    }

    #[test]
    fn database_rejects_duplicate_ids() {
        let t = Trajectory::new(TrackId::new("a"), vec![pos(0.0, 0.0, 0.0, 0.0)]).unwrap();
        assert!(TrajectoryDatabase::new("P", vec![t.clone(), t.clone()], 0.1, 50.0).is_err());
        assert!(TrajectoryDatabase::new("P", vec![t.clone()], 0.0, 50.0).is_err());
        assert!(TrajectoryDatabase::new("P", vec![t], 0.1, 50.0).is_ok());
    }

    #[test]
    fn interpolation_and_nearest() {
        let ps: Vec<_> = (0..4)
            .map(|i| {
                let mut p = pos(i as f64, 0.0, 0.0, i as f64 * 0.1);
                p.frame = i;
                p
            })
            .collect();
        let tr = Trajectory::new(TrackId::new("a"), ps).unwrap();
        assert_abs_diff_eq!(tr.interpolate(0.15).unwrap().x, 1.5, epsilon = 1e-12);
        assert!(tr.interpolate(0.31).is_none());
        assert_eq!(tr.nearest_index(0.16), 2);
        assert_eq!(tr.nearest_index(-3.0), 0);
        assert_eq!(tr.index_of_frame(2), Some(2));
    }

    fn arb_transform() -> impl Strategy<Value = Transform4D> {
        (
            -180.0..180.0f64,
            -90.0..90.0f64,
            -180.0..180.0f64,
            prop::array::uniform3(-100.0..100.0f64),
            -20.0..20.0f64,
        )
            .prop_map(|(r, p, y, t, dt)| Transform4D::from_euler_deg(r, p, y, Vector3::new(t[0], t[1], t[2]), dt))
    }

    fn arb_pos() -> impl Strategy<Value = Position> {
        (prop::array::uniform3(-100.0..100.0f64), -100.0..100.0f64).prop_map(|(x, t)| pos(x[0], x[1], x[2], t))
    }

    proptest! {
        #[test]
        fn prop_invert_recovers(tf in arb_transform(), p in arb_pos()) {
            let back = tf.inverse().apply(&tf.apply(&p));
            prop_assert!((back.location - p.location).amax() < 1e-9);
            prop_assert!((back.t - p.t).abs() < 1e-9);
        }

        #[test]
        fn prop_compose_is_pointwise(a in arb_transform(), b in arb_transform(), p in arb_pos()) {
            let lhs = a.compose(&b).apply(&p);
            let rhs = a.apply(&b.apply(&p));
            prop_assert!((lhs.location - rhs.location).amax() < 1e-9);
            prop_assert!((lhs.t - rhs.t).abs() < 1e-9);
        }

        #[test]
        fn prop_compose_associative(a in arb_transform(), b in arb_transform(), c in arb_transform(), p in arb_pos()) {
            let l = a.compose(&b).compose(&c).apply(&p);
            let r = a.compose(&b.compose(&c)).apply(&p);
            prop_assert!((l.location - r.location).amax() < 1e-9);
            prop_assert!((l.t - r.t).abs() < 1e-9);
        }

        #[test]
        fn prop_rigid(tf in arb_transform(), p in arb_pos(), q in arb_pos()) {
            let d0 = p.distance(&q);
            let d1 = tf.apply(&p).distance(&tf.apply(&q));
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn prop_rotation_orthonormal(tf in arb_transform()) {
            let r = tf.rotation_matrix();
            prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            prop_assert!((tf.rotation().norm() - 1.0).abs() < 1e-9);
            prop_assert!(tf.rotation().w >= 0.0);
        }
    }
}

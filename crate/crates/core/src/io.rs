//! JSON Lines persistence for trajectory databases and JSON for transforms.
//!
//! The first line of a database file is a header object with a `meta` key;
//! every following line is one position:
//!
//! ```text
//! {"meta":{"sensor_id":"P","frame_period":0.1,"sensing_range":50.0}}
//! {"sensor_id":"P","track_id":"7.0","frame":12,"t":1.2,"x":3.1,"y":-4.0,"z":0.8,"l":4.5,"w":1.8,"h":1.5,"class":"car"}
//! ```
//!
//! Positions of one track must appear in time order; tracks may interleave.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, ObjectClass, Position, TrackId, Trajectory, TrajectoryDatabase, Transform4D};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    sensor_id: String,
    frame_period: f64,
    sensing_range: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: Meta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    sensor_id: String,
    track_id: String,
    frame: u64,
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    l: f64,
    w: f64,
    h: f64,
    class: ObjectClass,
}

pub fn write_database<W: Write>(db: &TrajectoryDatabase, mut out: W) -> Result<()> {
    if !db.sensing_range().is_finite() {
        return Err(Error::InvalidInput("sensing_range must be finite to serialize".into()));
    }
    let header = Header {
        meta: Meta {
            sensor_id: db.sensor_id().to_string(),
            frame_period: db.frame_period(),
            sensing_range: db.sensing_range(),
        },
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    for traj in db.trajectories() {
        for p in traj.positions() {
            let rec = Record {
                sensor_id: db.sensor_id().to_string(),
                track_id: p.track_id.to_string(),
                frame: p.frame,
                t: p.t,
                x: p.location.x,
                y: p.location.y,
                z: p.location.z,
                l: p.bbox.length,
                w: p.bbox.width,
                h: p.bbox.height,
                class: p.class,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
        }
    }
    Ok(())
}

/// Parses a database; `source` names the input in error messages.
pub fn read_database<R: BufRead>(input: R, source: &str) -> Result<TrajectoryDatabase> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut header: Option<Meta> = None;
    // Track order follows first appearance.
    let mut order: Vec<String> = Vec::new();
    let mut tracks: BTreeMap<String, Vec<Position>> = BTreeMap::new();

    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if header.is_none() {
            let h: Header =
                serde_json::from_str(trimmed).map_err(|e| parse_err(lineno, format!("expected meta header: {e}")))?;
            header = Some(h.meta);
            continue;
        }
        let rec: Record = serde_json::from_str(trimmed).map_err(|e| parse_err(lineno, e.to_string()))?;
        let meta = header.as_ref().unwrap();
        if rec.sensor_id != meta.sensor_id {
            return Err(parse_err(
                lineno,
                format!("sensor_id {} does not match header {}", rec.sensor_id, meta.sensor_id),
            ));
        }
        let pos = Position {
            location: Vector3::new(rec.x, rec.y, rec.z),
            t: rec.t,
            frame: rec.frame,
            bbox: BoundingBox::new(rec.l, rec.w, rec.h),
            class: rec.class,
            track_id: TrackId::new(&rec.track_id),
        };
        if !pos.bbox.is_valid() {
            return Err(parse_err(lineno, "bounding box dimensions must be positive".into()));
        }
        let entry = tracks.entry(rec.track_id.clone()).or_insert_with(|| {
            order.push(rec.track_id.clone());
            Vec::new()
        });
        if let Some(last) = entry.last() {
            if pos.t <= last.t || pos.frame <= last.frame {
                return Err(parse_err(
                    lineno,
                    format!("track {} is not strictly increasing in time", rec.track_id),
                ));
            }
        }
        entry.push(pos);
    }

    let meta = header.ok_or_else(|| parse_err(1, "missing meta header".into()))?;
    let trajectories = order
        .into_iter()
        .map(|id| {
            let positions = tracks.remove(&id).unwrap();
            Trajectory::new(TrackId::new(&id), positions)
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryDatabase::new(meta.sensor_id, trajectories, meta.frame_period, meta.sensing_range)
}

pub fn save_database(db: &TrajectoryDatabase, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_database(db, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_database(path: impl AsRef<Path>) -> Result<TrajectoryDatabase> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_database(BufReader::new(file), &path.display().to_string())
}

pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn load_transform(path: impl AsRef<Path>) -> Result<Transform4D> {
    load_json(path)
}

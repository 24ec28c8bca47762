//! TUM RGB-D trajectory text: `timestamp tx ty tz qx qy qz qw` per line,
//! camera-to-world, `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

/// Maximum timestamp gap (seconds) for matching a query to a trajectory entry.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl TrajectoryEntry {
    pub fn from_pose(timestamp: f64, pose: &RigidTransform) -> Self {
        Self {
            timestamp,
            translation: *pose.translation(),
            rotation: pose.quaternion(),
        }
    }

    /// Camera-to-world transform.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::from_quaternion(self.rotation, self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    /// Entries must have strictly increasing timestamps.
    pub fn new(entries: Vec<TrajectoryEntry>) -> Result<Self> {
        if let Some(w) = entries.windows(2).find(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(Error::Config(format!(
                "timestamps not strictly increasing at {}",
                w[1].timestamp
            )));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry closest in time to `t`, if within [`ASSOCIATION_TOLERANCE`].
    pub fn nearest(&self, t: f64) -> Result<&TrajectoryEntry> {
        let i = self.entries.partition_point(|e| e.timestamp < t);
        let candidates = [i.checked_sub(1), Some(i)];
        candidates
            .iter()
            .flatten()
            .filter_map(|&j| self.entries.get(j))
            .min_by(|a, b| (a.timestamp - t).abs().total_cmp(&(b.timestamp - t).abs()))
            .filter(|e| (e.timestamp - t).abs() <= ASSOCIATION_TOLERANCE)
            .ok_or_else(|| {
                Error::Association(format!(
                    "no trajectory entry within {ASSOCIATION_TOLERANCE} s of t = {t}"
                ))
            })
    }

    /// Transform taking points in the camera at `t_from` to the camera at `t_to`:
    /// `inverse(pose_to) ∘ pose_from`.
    pub fn relative_pose(&self, t_from: f64, t_to: f64) -> Result<RigidTransform> {
        let from = self.nearest(t_from)?.pose();
        let to = self.nearest(t_to)?.pose();
        Ok(to.inverse().compose(&from))
    }
}

pub fn parse_trajectory(text: &str, origin: &Path) -> Result<Trajectory> {
    let mut entries: Vec<TrajectoryEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg,
        };
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|_| err(format!("bad number {tok:?}"))))
            .collect::<Result<_>>()?;
        if values.len() != 8 {
            return Err(err(format!(
                "expected 8 fields \"timestamp tx ty tz qx qy qz qw\", got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        let q = Quaternion::new(values[7], values[4], values[5], values[6]);
        if q.norm() < 1e-9 {
            return Err(err("zero quaternion".into()));
        }
        let entry = TrajectoryEntry {
            timestamp: values[0],
            translation: Vector3::new(values[1], values[2], values[3]),
            rotation: UnitQuaternion::from_quaternion(q),
        };
        if let Some(prev) = entries.last() {
            if entry.timestamp <= prev.timestamp {
                return Err(err(format!(
                    "timestamp {} not after {}",
                    entry.timestamp, prev.timestamp
                )));
            }
        }
        entries.push(entry);
    }
    Trajectory::new(entries)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text, path)
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for e in traj.entries() {
        let q = e.rotation.quaternion();
        writeln!(
            out,
            "{:.6} {} {} {} {} {} {} {}",
            e.timestamp, e.translation.x, e.translation.y, e.translation.z, q.i, q.j, q.k, q.w
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

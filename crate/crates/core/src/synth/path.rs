//! Camera trajectories through a scene.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    /// Sideways dolly along x, looking ahead.
    Line,
    /// Arc around the look-at target.
    Arc,
    /// Small circle around the start position, always facing the target.
    Orbit,
}

impl FromStr for PathKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(Self::Line),
            "arc" => Ok(Self::Arc),
            "orbit" => Ok(Self::Orbit),
            other => Err(Error::Config(format!("unknown trajectory {other:?} (arc, line, orbit)"))),
        }
    }
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Line => "line",
            Self::Arc => "arc",
            Self::Orbit => "orbit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSpec {
    pub kind: PathKind,
    pub frames: usize,
    pub eye: Vector3<f64>,
    pub target: Vector3<f64>,
    /// Line length, arc angle (radians) or orbit radius.
    pub extent: f64,
}

impl PathSpec {
    pub fn new(kind: PathKind, frames: usize) -> Self {
        let extent = match kind {
            PathKind::Line => 0.8,
            PathKind::Arc => 0.35,
            PathKind::Orbit => 0.25,
        };
        Self {
            kind,
            frames,
            eye: Vector3::new(0.0, -0.2, 0.0),
            target: Vector3::new(0.0, 0.4, 3.5),
            extent,
        }
    }

    /// Camera-to-world poses. Rows point along world +y.
    pub fn poses(&self) -> Result<Vec<RigidTransform>> {
        if self.frames == 0 {
            return Err(Error::Config("trajectory needs at least one frame".into()));
        }
        let down = Vector3::new(0.0, 1.0, 0.0);
        let n = self.frames;
        (0..n)
            .map(|i| {
                let s = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 - 0.5 };
                let eye = match self.kind {
                    PathKind::Line => self.eye + Vector3::new(self.extent * s, 0.0, 0.0),
                    PathKind::Arc => {
                        let r = self.eye - self.target;
                        let a = self.extent * s;
                        let (sin, cos) = a.sin_cos();
                        self.target + Vector3::new(cos * r.x + sin * r.z, r.y, -sin * r.x + cos * r.z)
                    }
                    PathKind::Orbit => {
                        let a = std::f64::consts::TAU * i as f64 / n as f64;
                        self.eye + self.extent * Vector3::new(a.cos(), 0.4 * a.sin(), a.sin())
                    }
                };
                RigidTransform::look_at(eye, self.target, down)
            })
            .collect()
    }
}

/// The middle frame.
pub fn keyframe_index(frames: usize) -> usize {
    frames / 2
}

/// Indices of all other frames, nearest (in sequence order) first; ties go
/// to the earlier frame.
pub fn neighbors_by_distance(frames: usize, keyframe: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..frames).filter(|&i| i != keyframe).collect();
    idx.sort_by_key(|&i| (i.abs_diff(keyframe), i));
    idx
}

//! Rendered sequences as training samples or as files on disk.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::noise::{simulate_predictions, NoiseModel};
use super::path::{keyframe_index, neighbors_by_distance, PathKind, PathSpec};
use super::scene::{render_view, RenderedView, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::io::{save_depth, save_labels, save_rgb, save_trajectory, FrameRecord, SequenceManifest, Trajectory, TrajectoryEntry};
use crate::learning::{Frame, NeighborFrame, SequenceSample};

/// Frame rate of written trajectories.
pub const FRAME_RATE: f64 = 30.0;

/// Pinhole camera with a roughly 58 degree horizontal field of view.
pub fn default_intrinsics(width: usize, height: usize) -> Result<CameraIntrinsics> {
    let f = 0.9 * width as f64;
    CameraIntrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
}

/// Renders every pose.
pub fn render_sequence(scene: &SceneSpec, poses: &[RigidTransform], k: &CameraIntrinsics) -> Vec<RenderedView> {
    poses.par_iter().map(|p| render_view(scene, p, k)).collect()
}

/// Keyframe in the middle of `poses`, all other frames as neighbors,
/// nearest first.
pub fn sequence_sample(scene: &SceneSpec, poses: &[RigidTransform], k: &CameraIntrinsics) -> Result<SequenceSample> {
    if poses.is_empty() {
        return Err(Error::DegenerateSample("empty trajectory".into()));
    }
    let views = render_sequence(scene, poses, k);
    let key = keyframe_index(poses.len());
    let neighbors = neighbors_by_distance(poses.len(), key)
        .into_iter()
        .map(|i| NeighborFrame {
            frame: Frame {
                rgb: views[i].rgb.clone(),
                depth: views[i].depth.clone(),
            },
            pose_from_keyframe: poses[i].inverse().compose(&poses[key]),
        })
        .collect();
    Ok(SequenceSample {
        intrinsics: *k,
        keyframe: Frame {
            rgb: views[key].rgb.clone(),
            depth: views[key].depth.clone(),
        },
        gt: views[key].labels.clone(),
        neighbors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSetConfig {
    pub sequences: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
}

impl Default for SyntheticSetConfig {
    fn default() -> Self {
        Self {
            sequences: 6,
            frames: 9,
            width: 32,
            height: 24,
            num_classes: 6,
        }
    }
}

/// Random scenes, each seen along a randomly jittered line, arc or orbit.
pub fn synthetic_set(config: &SyntheticSetConfig, seed: u64) -> Result<Vec<SequenceSample>> {
    let k = default_intrinsics(config.width, config.height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.sequences)
        .map(|s| {
            let scene = SceneSpec::random(&mut rng, config.num_classes);
            let kind = [PathKind::Line, PathKind::Arc, PathKind::Orbit][s % 3];
            let mut path = PathSpec::new(kind, config.frames);
            path.eye += nalgebra::Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2), rng.random_range(0.0..0.6));
            path.target += nalgebra::Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3), 0.0);
            sequence_sample(&scene, &path.poses()?, &k)
        })
        .collect()
}

/// Writes a rendered sequence in the on-disk formats: `rgb/`, `depth/`,
/// `label/` and simulated `scores/` per frame, `intrinsics.txt`,
/// `trajectory.txt`, `scene.txt` and `manifest.txt`. Returns the manifest path.
pub fn write_sequence(
    dir: &Path,
    scene: &SceneSpec,
    poses: &[RigidTransform],
    k: &CameraIntrinsics,
    noise: &NoiseModel,
) -> Result<PathBuf> {
    if poses.is_empty() {
        return Err(Error::Config("no frames to write".into()));
    }
    for sub in ["rgb", "depth", "label", "scores"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let views = render_sequence(scene, poses, k);
    let records = views
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let name = format!("{i:06}");
            let rec = FrameRecord {
                id: i,
                timestamp: i as f64 / FRAME_RATE,
                rgb: dir.join(format!("rgb/{name}.ppm")),
                depth: dir.join(format!("depth/{name}.pgm")),
                label: Some(dir.join(format!("label/{name}.pgm"))),
                scores: Some(dir.join(format!("scores/{name}.mvft"))),
            };
            save_rgb(&rec.rgb, &v.rgb)?;
            save_depth(&rec.depth, &v.depth)?;
            save_labels(rec.label.as_ref().unwrap(), &v.labels)?;
            let scores = simulate_predictions(&v.labels, scene.num_classes, noise, &mut noise.view_rng(i as u64))?;
            scores.save_mvft(rec.scores.as_ref().unwrap())?;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("intrinsics.txt", k.to_line() + "\n")?;
    write("scene.txt", scene.to_text())?;
    let entries = records
        .iter()
        .zip(poses)
        .map(|(r, p)| TrajectoryEntry::from_pose(r.timestamp, p))
        .collect();
    save_trajectory(&dir.join("trajectory.txt"), &Trajectory::new(entries)?)?;
    let key = keyframe_index(poses.len());
    let manifest = SequenceManifest {
        num_classes: scene.num_classes,
        intrinsics: dir.join("intrinsics.txt"),
        trajectory: dir.join("trajectory.txt"),
        keyframe: records[key].clone(),
        neighbors: neighbors_by_distance(poses.len(), key)
            .into_iter()
            .map(|i| records[i].clone())
            .collect(),
    };
    let path = dir.join("manifest.txt");
    manifest.save(&path)?;
    Ok(path)
}

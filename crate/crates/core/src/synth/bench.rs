//! Fusion-gain experiment: noisy per-frame predictions of a rendered
//! sequence, fused into the keyframe and scored against its ground truth.

use rayon::prelude::*;

use super::noise::{simulate_predictions, NoiseModel};
use super::scene::{render, SceneSpec};
use crate::error::Result;
use crate::fusion::{fuse, uniform_subset, FusionMethod, ViewPrediction};
use crate::geometry::{compute_warp_grid, mask_occlusions, CameraIntrinsics, RigidTransform, OCCLUSION_TOLERANCE};
use crate::metrics::{argmax_labels, ConfusionMatrix, Scores};
use crate::warp::bilinear_sample;

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub single: ConfusionMatrix,
    pub fused: ConfusionMatrix,
    /// Frames fused, keyframe included.
    pub frames: usize,
}

impl BenchmarkReport {
    pub fn single_scores(&self) -> Result<Scores> {
        self.single.scores()
    }

    pub fn fused_scores(&self) -> Result<Scores> {
        self.fused.scores()
    }
}

/// Simulates predictions for every frame of `poses`, fuses `frames` of them
/// (the keyframe plus others spread evenly over the sequence) into the
/// keyframe with `method`, and scores single-view and fused labelings.
/// View `i` uses the noise stream `i`.
pub fn run_fusion_benchmark(
    scene: &SceneSpec,
    poses: &[RigidTransform],
    keyframe: usize,
    k: &CameraIntrinsics,
    noise: &NoiseModel,
    frames: usize,
    method: FusionMethod,
) -> Result<BenchmarkReport> {
    let kc = scene.num_classes;
    let (key_depth, key_gt) = render(scene, &poses[keyframe], k);
    let key_scores = simulate_predictions(&key_gt, kc, noise, &mut noise.view_rng(keyframe as u64))?;
    let others: Vec<usize> = (0..poses.len()).filter(|&i| i != keyframe).collect();
    let chosen: Vec<usize> = uniform_subset(others.len(), frames.saturating_sub(1))
        .into_iter()
        .map(|j| others[j])
        .collect();
    let warped = chosen
        .par_iter()
        .map(|&i| {
            let (depth, gt) = render(scene, &poses[i], k);
            let scores = simulate_predictions(&gt, kc, noise, &mut noise.view_rng(i as u64))?;
            let pose = poses[i].inverse().compose(&poses[keyframe]);
            let mut grid = compute_warp_grid(&key_depth, &pose, k)?;
            mask_occlusions(&mut grid, &key_depth, &depth, &pose, k, OCCLUSION_TOLERANCE)?;
            Ok(ViewPrediction::from_sampled(bilinear_sample(&scores, &grid), i + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let single_pred = argmax_labels(&key_scores);
    let mut views = vec![ViewPrediction::keyframe(key_scores)];
    views.extend(warped);
    let fused_pred = argmax_labels(&fuse(method, &views)?);
    let mut single = ConfusionMatrix::new(kc);
    single.accumulate(&single_pred, &key_gt)?;
    let mut fused = ConfusionMatrix::new(kc);
    fused.accumulate(&fused_pred, &key_gt)?;
    Ok(BenchmarkReport {
        single,
        fused,
        frames: views.len(),
    })
}

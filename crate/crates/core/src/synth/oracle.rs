//! Brute-force label warping by forward splatting, independent of the
//! grid and sampler machinery.

use nalgebra::Vector3;

use crate::geometry::{CameraIntrinsics, DepthMap, RigidTransform, OCCLUSION_TOLERANCE};
use crate::tensor::{LabelMap, IGNORE};

/// Splats every source pixel with valid depth into the target view
/// (nearest pixel, closest surface wins) and keeps the label where the
/// splatted depth agrees with the target's own depth within 2 cm.
/// Everything else is IGNORE.
pub fn oracle_warp(
    source_labels: &LabelMap,
    source_depth: &DepthMap,
    target_depth: &DepthMap,
    pose_source_to_target: &RigidTransform,
    k: &CameraIntrinsics,
) -> LabelMap {
    let (h, w) = (target_depth.height(), target_depth.width());
    let mut zbuf = vec![f64::INFINITY; h * w];
    let mut label = vec![IGNORE; h * w];
    let (r, t) = (pose_source_to_target.rotation(), pose_source_to_target.translation());
    for y in 0..source_depth.height() {
        for x in 0..source_depth.width() {
            let Some(z) = source_depth.get(y, x) else {
                continue;
            };
            let p = Vector3::new(z * (x as f64 - k.cx) / k.fx, z * (y as f64 - k.cy) / k.fy, z);
            let q = r * p + t;
            if q.z <= 0.0 {
                continue;
            }
            let u = (k.fx * q.x / q.z + k.cx).round();
            let v = (k.fy * q.y / q.z + k.cy).round();
            if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                continue;
            }
            let i = v as usize * w + u as usize;
            if q.z < zbuf[i] {
                zbuf[i] = q.z;
                label[i] = source_labels.get(y, x);
            }
        }
    }
    for (i, l) in label.iter_mut().enumerate() {
        let agrees = target_depth
            .get(i / w, i % w)
            .is_some_and(|zt| (zbuf[i] - zt).abs() <= OCCLUSION_TOLERANCE);
        if !agrees {
            *l = IGNORE;
        }
    }
    LabelMap::from_vec(h, w, label).expect("target size")
}

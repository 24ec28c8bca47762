//! Pinhole camera, rigid transforms and warp-grid construction.
//!
//! A warp grid is indexed by pixels of the *target* view (the keyframe), is
//! computed from the target depth, and stores where each target pixel lands
//! in the *source* view. Sampling a source map through the grid therefore
//! synthesizes that map as seen from the target camera.
//!
//! Normalized coordinates place pixel centers at `(2x + 1) / W - 1`, so the
//! outer image edges sit at `-1` and `+1`. With this convention a 2x2 average
//! of normalized coordinates is exactly the normalized coordinate of the
//! coarse pixel covering the block, which is what lets coarser grids be
//! produced by average pooling.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::tensor::{Mask, Shape, Tensor};

/// Depths at or beyond this many meters are treated as missing.
pub const MAX_DEPTH: f64 = 100.0;

/// Tolerance used to accept a rotation matrix as orthonormal.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Depth disagreement (meters) beyond which a warped pixel counts as occluded.
pub const OCCLUSION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite: {self:?}"
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("zero image size".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Parses the one-line text form `fx fy cx cy width height`.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let (line_no, line) = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .find(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .ok_or_else(|| Error::format(origin, "no intrinsics line"))?;
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(parse_err(format!(
                "expected \"fx fy cx cy width height\", got {} fields",
                fields.len()
            )));
        }
        let f = |i: usize| {
            fields[i]
                .parse::<f64>()
                .map_err(|e| parse_err(format!("field {}: {e}", i + 1)))
        };
        let u = |i: usize| {
            fields[i]
                .parse::<usize>()
                .map_err(|e| parse_err(format!("field {}: {e}", i + 1)))
        };
        Self::new(f(0)?, f(1)?, f(2)?, f(3)?, u(4)?, u(5)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    /// Intrinsics of the same camera at `1 / 2^levels` resolution, using the
    /// same pixel-center convention as the warp grids.
    pub fn downscaled(&self, levels: u32) -> Result<Self> {
        let s = (1usize << levels) as f64;
        Self::new(
            self.fx / s,
            self.fy / s,
            (self.cx + 0.5) / s - 0.5,
            (self.cy + 0.5) / s - 0.5,
            self.width >> levels,
            self.height >> levels,
        )
    }
}

/// Rigid-body transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Checks that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entries".into()));
        }
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho_err > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation not orthonormal (max |R^T R - I| = {ortho_err:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation determinant {det}, expected +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis` followed by translation `t`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let rot = if axis.norm() == 0.0 || angle == 0.0 {
            Matrix3::identity()
        } else {
            Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
        };
        Self {
            rotation: rot,
            translation: t,
        }
    }

    /// Camera-to-world pose of a camera at `eye` looking at `target`, with
    /// image rows pointing along `down` as closely as possible.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidTransform("eye equals target".into()))?;
        let x = down
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidTransform("view direction parallel to down".into()))?;
        let y = z.cross(&x);
        Self::new(Matrix3::from_columns(&[x, y, z]), eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Largest absolute entry difference to `other`, rotation and translation.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation)
            .amax()
            .max((self.translation - other.translation).amax())
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// Inverse projection of pixel `(x, y)` at depth `z`.
pub fn backproject(pixel: [f64; 2], z: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(z > 0.0) {
        return Err(Error::InvalidDepth(z));
    }
    Ok(Vector3::new(
        z * (pixel[0] - k.cx) / k.fx,
        z * (pixel[1] - k.cy) / k.fy,
        z,
    ))
}

/// Pinhole projection. `None` for points on or behind the image plane.
pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> Option<[f64; 2]> {
    if !(p.z > 0.0) {
        return None;
    }
    Some([k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy])
}

/// Where target pixel `pixel` with depth `z` lands in the source view, in
/// source pixel coordinates, together with its depth in the source camera.
pub fn warp_pixel(
    pixel: [f64; 2],
    z: f64,
    pose_target_to_source: &RigidTransform,
    k: &CameraIntrinsics,
) -> Option<([f64; 2], f64)> {
    let p = backproject(pixel, z, k).ok()?;
    let q = pose_target_to_source.transform_point(&p);
    project(&q, k).map(|x| (x, q.z))
}

#[inline]
pub fn normalize_coord(x: f64, size: usize) -> f64 {
    (2.0 * x + 1.0) / size as f64 - 1.0
}

#[inline]
pub fn unnormalize_coord(u: f64, size: usize) -> f64 {
    ((u + 1.0) * size as f64 - 1.0) / 2.0
}

/// Metric depth image. Zero, negative, non-finite or too-large values are missing.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, fill: f64) -> Self {
        Self {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Size(format!(
                "{} depths for {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw stored value, including missing markers.
    pub fn raw(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, z: f64) {
        self.data[y * self.width + x] = z;
    }

    /// Depth at `(y, x)` if valid.
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Option<f64> {
        let z = self.data[y * self.width + x];
        is_valid_depth(z).then_some(z)
    }

    /// Bilinear depth at a continuous pixel location; `None` unless all four
    /// taps are inside the image and valid.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let (x0, fx) = tap(x, self.width)?;
        let (y0, fy) = tap(y, self.height)?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let z00 = self.get(y0, x0)?;
        let z01 = self.get(y0, x1)?;
        let z10 = self.get(y1, x0)?;
        let z11 = self.get(y1, x1)?;
        Some(
            (1.0 - fy) * ((1.0 - fx) * z00 + fx * z01) + fy * ((1.0 - fx) * z10 + fx * z11),
        )
    }

    /// Depth as a single-channel tensor, missing values as 0.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|&z| if is_valid_depth(z) { z } else { 0.0 })
            .collect();
        Tensor::from_vec(Shape::new(1, self.height, self.width), data).expect("depth shape")
    }
}

#[inline]
pub fn is_valid_depth(z: f64) -> bool {
    z.is_finite() && z > 0.0 && z < MAX_DEPTH
}

/// Sub-pixel coordinates this close to an integer are snapped onto it so that
/// round-off in normalization never pushes an exact node off the image.
pub(crate) const SNAP_EPS: f64 = 1e-9;

/// Splits a continuous coordinate into the lower tap index and the fractional
/// weight of the upper tap. `None` if the two taps would leave `[0, size)`.
#[inline]
pub(crate) fn tap(x: f64, size: usize) -> Option<(usize, f64)> {
    let r = x.round();
    let x = if (x - r).abs() < SNAP_EPS { r } else { x };
    if !(x >= 0.0 && x <= (size - 1) as f64) {
        return None;
    }
    if size == 1 {
        return Some((0, 0.0));
    }
    let x0 = (x.floor() as usize).min(size - 2);
    Some((x0, x - x0 as f64))
}

/// Per-target-pixel normalized source coordinates with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpGrid {
    height: usize,
    width: usize,
    coords: Vec<[f64; 2]>,
    valid: Mask,
}

impl WarpGrid {
    /// Grid mapping every pixel onto itself.
    pub fn identity(height: usize, width: usize) -> Self {
        let mut coords = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                coords.push([
                    normalize_coord(x as f64, width),
                    normalize_coord(y as f64, height),
                ]);
            }
        }
        Self {
            height,
            width,
            coords,
            valid: Mask::new(height, width, true),
        }
    }

    /// Builds a grid from raw parts; invalid entries are zeroed.
    pub fn from_parts(height: usize, width: usize, coords: Vec<[f64; 2]>, valid: Mask) -> Result<Self> {
        if coords.len() != height * width || valid.height() != height || valid.width() != width {
            return Err(Error::Shape("warp grid parts disagree in size".into()));
        }
        let mut g = Self {
            height,
            width,
            coords,
            valid,
        };
        for (c, v) in g.coords.iter_mut().zip(g.valid.data()) {
            if !v {
                *c = [0.0, 0.0];
            }
        }
        Ok(g)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn validity(&self) -> &Mask {
        &self.valid
    }

    /// Normalized `(u, v)` of a valid entry.
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Option<[f64; 2]> {
        let i = y * self.width + x;
        self.valid.data()[i].then(|| self.coords[i])
    }

    /// Invalidates entries where `keep` is false.
    pub fn restrict(&mut self, keep: &Mask) {
        self.valid = self.valid.and(keep);
        for (c, v) in self.coords.iter_mut().zip(self.valid.data()) {
            if !v {
                *c = [0.0, 0.0];
            }
        }
    }
}

/// Warp grid from target depth and the target-to-source pose.
///
/// Invalid where the target depth is missing, the point ends up on or behind
/// the source image plane, or the projection falls outside the source image.
/// Source and target share the intrinsics `k`.
pub fn compute_warp_grid(
    depth_target: &DepthMap,
    pose_target_to_source: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<WarpGrid> {
    let (h, w) = (depth_target.height(), depth_target.width());
    if (h, w) != (k.height, k.width) {
        return Err(Error::Shape(format!(
            "depth is {h}x{w} but intrinsics describe {}x{}",
            k.height, k.width
        )));
    }
    let mut coords = vec![[0.0; 2]; h * w];
    let mut valid = Mask::new(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let Some(z) = depth_target.get(y, x) else {
                continue;
            };
            let Some(([sx, sy], _)) = warp_pixel([x as f64, y as f64], z, pose_target_to_source, k)
            else {
                continue;
            };
            if tap(sx, w).is_none() || tap(sy, h).is_none() {
                continue;
            }
            coords[y * w + x] = [normalize_coord(sx, w), normalize_coord(sy, h)];
            valid.set(y, x, true);
        }
    }
    WarpGrid::from_parts(h, w, coords, valid)
}

/// Invalidates grid entries whose warped depth disagrees with the source
/// view's own depth (bilinearly interpolated) by more than `tolerance`
/// meters, i.e. target pixels that are occluded in the source view.
pub fn mask_occlusions(
    grid: &mut WarpGrid,
    depth_target: &DepthMap,
    depth_source: &DepthMap,
    pose_target_to_source: &RigidTransform,
    k: &CameraIntrinsics,
    tolerance: f64,
) -> Result<()> {
    let (h, w) = (grid.height(), grid.width());
    if (depth_source.height(), depth_source.width()) != (h, w)
        || (depth_target.height(), depth_target.width()) != (h, w)
    {
        return Err(Error::Shape("depth maps disagree with grid size".into()));
    }
    let mut keep = Mask::new(h, w, true);
    for y in 0..h {
        for x in 0..w {
            if grid.get(y, x).is_none() {
                continue;
            }
            let consistent = depth_target
                .get(y, x)
                .and_then(|z| warp_pixel([x as f64, y as f64], z, pose_target_to_source, k))
                .and_then(|([sx, sy], zs)| {
                    depth_source
                        .sample_bilinear(sx, sy)
                        .map(|observed| (observed - zs).abs() <= tolerance)
                })
                .unwrap_or(false);
            keep.set(y, x, consistent);
        }
    }
    grid.restrict(&keep);
    Ok(())
}

/// Grid pyramid by 2x2 average pooling. Entry `l` has size `(H / 2^l, W / 2^l)`;
/// entry 0 is `grid` itself. A coarse entry is valid only if all four of its
/// finer entries are.
pub fn downsample_grid(grid: &WarpGrid, levels: usize) -> Result<Vec<WarpGrid>> {
    let div = 1usize
        .checked_shl(levels as u32)
        .filter(|d| *d != 0)
        .ok_or_else(|| Error::Shape(format!("{levels} levels is too many")))?;
    if !grid.height.is_multiple_of(div) || !grid.width.is_multiple_of(div) {
        return Err(Error::Shape(format!(
            "{}x{} grid is not divisible by 2^{levels}",
            grid.height, grid.width
        )));
    }
    let mut out = Vec::with_capacity(levels + 1);
    out.push(grid.clone());
    for _ in 0..levels {
        let fine = out.last().unwrap();
        let (h, w) = (fine.height / 2, fine.width / 2);
        let mut coords = vec![[0.0; 2]; h * w];
        let mut valid = Mask::new(h, w, false);
        for y in 0..h {
            for x in 0..w {
                let taps = [
                    fine.get(2 * y, 2 * x),
                    fine.get(2 * y, 2 * x + 1),
                    fine.get(2 * y + 1, 2 * x),
                    fine.get(2 * y + 1, 2 * x + 1),
                ];
                if taps.iter().all(Option::is_some) {
                    let mut acc = [0.0; 2];
                    for t in taps.iter().flatten() {
                        acc[0] += t[0];
                        acc[1] += t[1];
                    }
                    coords[y * w + x] = [0.25 * acc[0], 0.25 * acc[1]];
                    valid.set(y, x, true);
                }
            }
        }
        out.push(WarpGrid::from_parts(h, w, coords, valid)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn k160() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 160.0, 120.0, 320, 240).unwrap()
    }

    #[test]
    fn backproject_examples() {
        let k = k160();
        assert_eq!(backproject([160.0, 120.0], 2.0, &k).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        let k0 = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 10, 10).unwrap();
        assert_eq!(backproject([50.0, 0.0], 1.0, &k0).unwrap(), Vector3::new(0.5, 0.0, 1.0));
        assert!(matches!(backproject([1.0, 1.0], 0.0, &k), Err(Error::InvalidDepth(_))));
        assert!(matches!(backproject([1.0, 1.0], -1.0, &k), Err(Error::InvalidDepth(_))));
    }

    #[test]
    fn project_examples() {
        let k = k160();
        assert_eq!(project(&Vector3::new(0.0, 0.0, 5.0), &k), Some([160.0, 120.0]));
        assert_eq!(project(&Vector3::new(1.0, 0.0, 2.0), &k), Some([210.0, 120.0]));
        assert_eq!(project(&Vector3::new(1.0, 0.0, 0.0), &k), None);
        assert_eq!(project(&Vector3::new(1.0, 0.0, -2.0), &k), None);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, -0.1, 4, 4).is_err());
        let k = CameraIntrinsics::parse("# cam\n525 525 159.5 119.5 320 240\n", Path::new("k")).unwrap();
        assert_eq!(k.width, 320);
        let back = CameraIntrinsics::parse(&k.to_line(), Path::new("k")).unwrap();
        assert_eq!(back, k);
        let err = CameraIntrinsics::parse("1 2 3\n", Path::new("k")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn transform_algebra() {
        let id = RigidTransform::identity();
        assert_eq!(id.inverse(), id);
        let t = RigidTransform::from_translation(Vector3::new(1.0, -2.0, 3.0));
        assert_eq!(*t.inverse().translation(), Vector3::new(-1.0, 2.0, -3.0));
        let rz = RigidTransform::from_axis_angle(Vector3::z(), FRAC_PI_2, Vector3::zeros());
        let r180 = rz.compose(&rz);
        let expected = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r180.rotation() - expected).amax() < 1e-12);
    }

    #[test]
    fn rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
        let m = Matrix3::identity() * 1.001;
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn identity_warp_grid() {
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 6.0, 16, 12).unwrap();
        let mut depth = DepthMap::new(12, 16, 2.0);
        depth.set(3, 4, 0.0);
        depth.set(5, 5, f64::NAN);
        let g = compute_warp_grid(&depth, &RigidTransform::identity(), &k).unwrap();
        let id = WarpGrid::identity(12, 16);
        for y in 0..12 {
            for x in 0..16 {
                if (y, x) == (3, 4) || (y, x) == (5, 5) {
                    assert!(g.get(y, x).is_none());
                } else {
                    let a = g.get(y, x).unwrap();
                    let b = id.get(y, x).unwrap();
                    assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
                }
            }
        }
        let bad = DepthMap::new(10, 16, 1.0);
        assert!(matches!(
            compute_warp_grid(&bad, &RigidTransform::identity(), &k),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn behind_camera_is_invalid() {
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 6.0, 16, 12).unwrap();
        let depth = DepthMap::new(12, 16, 1.0);
        let pose = RigidTransform::from_translation(Vector3::new(0.0, 0.0, -3.0));
        let g = compute_warp_grid(&depth, &pose, &k).unwrap();
        assert_eq!(g.validity().count_valid(), 0);
    }

    #[test]
    fn downsample_examples() {
        let id = WarpGrid::identity(8, 12);
        let pyr = downsample_grid(&id, 2).unwrap();
        assert_eq!(pyr.len(), 3);
        for (l, g) in pyr.iter().enumerate() {
            assert_eq!((g.height(), g.width()), (8 >> l, 12 >> l));
            let want = WarpGrid::identity(8 >> l, 12 >> l);
            for (a, b) in g.coords().iter().zip(want.coords()) {
                assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
            }
        }

        let mut valid = Mask::new(4, 4, true);
        valid.set(1, 1, false);
        let g = WarpGrid::from_parts(4, 4, vec![[0.25, -0.5]; 16], valid).unwrap();
        let pyr = downsample_grid(&g, 2).unwrap();
        assert!(!pyr[1].validity().get(0, 0));
        assert_eq!(pyr[1].get(0, 1), Some([0.25, -0.5]));
        assert_eq!(pyr[1].get(1, 1), Some([0.25, -0.5]));
        assert!(!pyr[2].validity().get(0, 0));

        let g = WarpGrid::from_parts(4, 4, vec![[0.25, -0.5]; 16], Mask::new(4, 4, true)).unwrap();
        for level in downsample_grid(&g, 2).unwrap() {
            assert!(level.coords().iter().all(|c| *c == [0.25, -0.5]));
        }
        assert!(matches!(downsample_grid(&WarpGrid::identity(6, 4), 2), Err(Error::Shape(_))));
    }

    #[test]
    fn downscaled_intrinsics_match_grid_convention() {
        let k = CameraIntrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24).unwrap();
        let kc = k.downscaled(1).unwrap();
        assert_eq!((kc.width, kc.height), (16, 12));
        // Fine pixel x maps to coarse (x + 0.5) / 2 - 0.5.
        assert!((kc.cx - 7.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn project_backproject_roundtrip(x in 0.0f64..320.0, y in 0.0f64..240.0, z in 0.1f64..50.0) {
            let k = k160();
            let p = backproject([x, y], z, &k).unwrap();
            let back = project(&p, &k).unwrap();
            prop_assert!((back[0] - x).abs() < 1e-9 && (back[1] - y).abs() < 1e-9);
        }

        #[test]
        fn projective_invariance(px in -2.0f64..2.0, py in -2.0f64..2.0, pz in 0.1f64..10.0, s in 0.01f64..100.0) {
            let k = k160();
            let a = project(&Vector3::new(px, py, pz), &k).unwrap();
            let b = project(&Vector3::new(s * px, s * py, s * pz), &k).unwrap();
            prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }

        #[test]
        fn compose_inverse_is_identity(ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
                                       angle in -3.0f64..3.0, t in proptest::array::uniform3(-5.0f64..5.0)) {
            let a = RigidTransform::from_axis_angle(Vector3::new(ax, ay, az), angle, Vector3::from(t));
            let id = RigidTransform::identity();
            prop_assert!(a.compose(&a.inverse()).max_abs_diff(&id) < 1e-9);
            prop_assert!(a.inverse().compose(&a).max_abs_diff(&id) < 1e-9);
        }

        #[test]
        fn valid_grid_entries_in_unit_square(angle in -0.4f64..0.4, t in proptest::array::uniform3(-0.5f64..0.5),
                                             depths in proptest::collection::vec(0.0f64..6.0, 12 * 16)) {
            let k = CameraIntrinsics::new(14.0, 14.0, 7.5, 5.5, 16, 12).unwrap();
            let depth = DepthMap::from_vec(12, 16, depths).unwrap();
            let pose = RigidTransform::from_axis_angle(Vector3::new(0.3, 1.0, 0.1), angle, Vector3::from(t));
            let g = compute_warp_grid(&depth, &pose, &k).unwrap();
            for y in 0..12 {
                for x in 0..16 {
                    if let Some([u, v]) = g.get(y, x) {
                        prop_assert!((-1.0..=1.0).contains(&u) && (-1.0..=1.0).contains(&v));
                        prop_assert!(depth.get(y, x).is_some());
                    }
                }
            }
        }

        #[test]
        fn normalization_roundtrip(x in 0.0f64..639.0, w in 2usize..640) {
            let x = x.min((w - 1) as f64);
            prop_assert!((unnormalize_coord(normalize_coord(x, w), w) - x).abs() < 1e-12 * w as f64);
        }
    }
}

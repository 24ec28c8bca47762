//! Axis-aligned scenes with closed-form ray casting.
//!
//! World axes follow the camera convention: x right, y down, z forward, so
//! the floor of a room is its max-y face.
//!
//! Scene file, one item per line, `#` comments:
//!
//! ```text
//! classes 5
//! room min=-3,-1.5,-2 max=3,1.2,6 wall=1 floor=2 ceiling=1
//! rect axis=z at=4 u=-1,1 v=-0.5,0.5 class=3
//! box min=-0.5,0.5,2.5 max=0.5,1.2,3.5 class=4 color=0.8,0.2,0.2
//! ```
//!
//! A `rect` lies in the plane `axis = at` and spans `u` and `v` along the
//! remaining two axes in x, y, z order. `color` defaults to the class color.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, RigidTransform};
use crate::tensor::{Label, LabelMap, Shape, Tensor};

/// Rays closer than this are ignored, so surfaces never self-intersect.
const HIT_EPS: f64 = 1e-9;
/// Checker period of the surface texture, in meters.
const CHECKER: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub class: Label,
    pub color: [f64; 3],
}

/// Distinct, fixed color per class.
pub fn class_color(class: Label) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.55, 0.55, 0.55],
        [0.85, 0.75, 0.55],
        [0.45, 0.30, 0.20],
        [0.20, 0.35, 0.80],
        [0.80, 0.20, 0.20],
        [0.25, 0.70, 0.30],
        [0.85, 0.80, 0.20],
        [0.60, 0.30, 0.70],
    ];
    let base = PALETTE[class as usize % PALETTE.len()];
    let shade = 1.0 - 0.3 * ((class as usize / PALETTE.len()) % 3) as f64;
    base.map(|c| c * shade)
}

impl Material {
    pub fn of_class(class: Label) -> Self {
        Self {
            class,
            color: class_color(class),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Rect {
        axis: usize,
        at: f64,
        u: [f64; 2],
        v: [f64; 2],
        material: Material,
    },
    Box {
        min: Vector3<f64>,
        max: Vector3<f64>,
        material: Material,
    },
}

/// A box seen from inside.
#[derive(Debug, Clone, PartialEq)]
pub struct Room {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub wall: Material,
    pub floor: Material,
    pub ceiling: Material,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub room: Option<Room>,
    pub primitives: Vec<Primitive>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals the camera depth for rays with unit z in the camera frame.
    pub t: f64,
    pub point: Vector3<f64>,
    /// Axis of the surface normal.
    pub axis: usize,
    pub material: Material,
}

/// The two axes other than `axis`, in increasing order.
fn plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

fn slab(o: &Vector3<f64>, d: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<(f64, usize, f64, usize)> {
    let (mut t0, mut a0, mut t1, mut a1) = (f64::NEG_INFINITY, 0, f64::INFINITY, 0);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
            continue;
        }
        let (mut n, mut f) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
        if n > f {
            std::mem::swap(&mut n, &mut f);
        }
        if n > t0 {
            t0 = n;
            a0 = a;
        }
        if f < t1 {
            t1 = f;
            a1 = a;
        }
    }
    (t0 <= t1).then_some((t0, a0, t1, a1))
}

impl Primitive {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match self {
            Primitive::Rect { axis, at, u, v, material } => {
                let a = *axis;
                if d[a] == 0.0 {
                    return None;
                }
                let t = (at - o[a]) / d[a];
                if t <= HIT_EPS {
                    return None;
                }
                let p = o + d * t;
                let (i, j) = plane_axes(a);
                (p[i] >= u[0] && p[i] <= u[1] && p[j] >= v[0] && p[j] <= v[1]).then_some(Hit {
                    t,
                    point: p,
                    axis: a,
                    material: *material,
                })
            }
            Primitive::Box { min, max, material } => {
                let (t0, a0, t1, a1) = slab(o, d, min, max)?;
                let (t, axis) = if t0 > HIT_EPS {
                    (t0, a0)
                } else if t1 > HIT_EPS {
                    (t1, a1)
                } else {
                    return None;
                };
                Some(Hit {
                    t,
                    point: o + d * t,
                    axis,
                    material: *material,
                })
            }
        }
    }
}

impl Room {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let (_, _, t, axis) = slab(o, d, &self.min, &self.max)?;
        if t <= HIT_EPS {
            return None;
        }
        let point = o + d * t;
        let material = if axis == 1 {
            if d.y > 0.0 {
                self.floor
            } else {
                self.ceiling
            }
        } else {
            self.wall
        };
        Some(Hit { t, point, axis, material })
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::Config(format!("classes {} not in 1..=255", self.num_classes)));
        }
        let mut materials: Vec<Material> = Vec::new();
        if let Some(r) = &self.room {
            if (0..3).any(|a| r.min[a] >= r.max[a]) {
                return Err(Error::Config("room min must be below max".into()));
            }
            materials.extend([r.wall, r.floor, r.ceiling]);
        }
        for p in &self.primitives {
            match p {
                Primitive::Rect { axis, u, v, material, .. } => {
                    if *axis > 2 || u[0] >= u[1] || v[0] >= v[1] {
                        return Err(Error::Config("degenerate rect".into()));
                    }
                    materials.push(*material);
                }
                Primitive::Box { min, max, material } => {
                    if (0..3).any(|a| min[a] >= max[a]) {
                        return Err(Error::Config("box min must be below max".into()));
                    }
                    materials.push(*material);
                }
            }
        }
        if let Some(m) = materials.iter().find(|m| m.class as usize >= self.num_classes) {
            return Err(Error::Config(format!("class {} >= classes {}", m.class, self.num_classes)));
        }
        Ok(())
    }

    /// Nearest surface along `o + t d`, `t > 0`.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(o, d))
            .chain(self.room.as_ref().and_then(|r| r.intersect(o, d)))
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }

    /// Surface hit by the ray through continuous pixel `(x, y)` of a camera at
    /// `pose` (camera-to-world). The hit's `t` is the camera depth.
    pub fn cast_pixel(&self, pose: &RigidTransform, k: &CameraIntrinsics, x: f64, y: f64) -> Option<Hit> {
        let dir_cam = Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
        let dir = pose.rotation() * dir_cam;
        self.cast(pose.translation(), &dir)
    }

    /// Exact depth at a continuous pixel location; `None` on a miss.
    pub fn depth_at(&self, pose: &RigidTransform, k: &CameraIntrinsics, x: f64, y: f64) -> Option<f64> {
        self.cast_pixel(pose, k, x, y).map(|h| h.t)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        parse_scene(text, origin)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_scene(&text, path)
    }

    pub fn to_text(&self) -> String {
        let v = |p: &Vector3<f64>| format!("{},{},{}", p.x, p.y, p.z);
        let c = |m: &Material| format!("{},{},{}", m.color[0], m.color[1], m.color[2]);
        let mut out = format!("classes {}\n", self.num_classes);
        if let Some(r) = &self.room {
            out += &format!(
                "room min={} max={} wall={} floor={} ceiling={}\n",
                v(&r.min),
                v(&r.max),
                r.wall.class,
                r.floor.class,
                r.ceiling.class
            );
        }
        for p in &self.primitives {
            match p {
                Primitive::Rect { axis, at, u, v: vv, material } => {
                    out += &format!(
                        "rect axis={} at={at} u={},{} v={},{} class={} color={}\n",
                        ["x", "y", "z"][*axis],
                        u[0],
                        u[1],
                        vv[0],
                        vv[1],
                        material.class,
                        c(material)
                    );
                }
                Primitive::Box { min, max, material } => {
                    out += &format!("box min={} max={} class={} color={}\n", v(min), v(max), material.class, c(material));
                }
            }
        }
        out
    }

    /// [`SceneSpec::random`] drawn from a ChaCha8 generator seeded with `seed`.
    pub fn from_seed(seed: u64, num_classes: usize) -> Result<Self> {
        if num_classes < 4 {
            return Err(Error::Config(format!("random scenes need at least 4 classes, got {num_classes}")));
        }
        Ok(Self::random(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed), num_classes))
    }

    /// A room of 4+ classes with a few boxes and wall panels at random.
    /// Keeps clear of the camera region around the origin.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, num_classes: usize) -> Self {
        assert!(num_classes >= 4);
        let room = Room {
            min: Vector3::new(-3.0, -1.5, -2.0),
            max: Vector3::new(3.0, 1.2, 6.0),
            wall: Material::of_class(1),
            floor: Material::of_class(2),
            ceiling: Material::of_class(1),
        };
        let mut primitives = Vec::new();
        let object_classes = 3..num_classes as Label;
        for _ in 0..rng.random_range(3..6) {
            let class = rng.random_range(object_classes.clone());
            let (cx, cz) = (rng.random_range(-1.8..1.8), rng.random_range(2.2..4.5));
            let (sx, sy, sz) = (rng.random_range(0.3..0.9), rng.random_range(0.3..1.2), rng.random_range(0.3..0.8));
            primitives.push(Primitive::Box {
                min: Vector3::new(cx - sx / 2.0, 1.2 - sy, cz - sz / 2.0),
                max: Vector3::new(cx + sx / 2.0, 1.2, cz + sz / 2.0),
                material: Material::of_class(class),
            });
        }
        for _ in 0..rng.random_range(1..3) {
            let class = rng.random_range(object_classes.clone());
            let (cx, cy) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..0.3));
            let (w, h) = (rng.random_range(0.4..1.2), rng.random_range(0.3..0.8));
            primitives.push(Primitive::Rect {
                axis: 2,
                at: 5.99,
                u: [cx - w / 2.0, cx + w / 2.0],
                v: [cy - h / 2.0, cy + h / 2.0],
                material: Material::of_class(class),
            });
        }
        Self {
            num_classes,
            room: Some(room),
            primitives,
        }
    }
}

fn parse_scene(text: &str, origin: &Path) -> Result<SceneSpec> {
    let mut num_classes = None;
    let mut room = None;
    let mut primitives = Vec::new();
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
        let mut toks = line.split_whitespace();
        let kind = toks.next().unwrap();
        if kind == "classes" {
            let n = toks.next().and_then(|t| t.parse().ok()).ok_or_else(|| err("bad classes".into()))?;
            num_classes = Some(n);
            continue;
        }
        let mut fields = std::collections::BTreeMap::new();
        for t in toks {
            let (k, v) = t.split_once('=').ok_or_else(|| err(format!("expected key=value, got {t:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(format!("{kind} lacks {k}=")));
        let nums = |k: &str, n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = get(k)?
                .split(',')
                .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad number in {k}="))))
                .collect::<Result<_>>()?;
            if v.len() != n || v.iter().any(|x| !x.is_finite()) {
                return Err(err(format!("{k}= needs {n} finite values")));
            }
            Ok(v)
        };
        let vec3 = |k: &str| nums(k, 3).map(|v| Vector3::new(v[0], v[1], v[2]));
        let class = |k: &str| get(k)?.parse::<Label>().map_err(|_| err(format!("bad class in {k}=")));
        let material = |k: &str| -> Result<Material> {
            let mut m = Material::of_class(class(k)?);
            if fields.contains_key("color") {
                let c = nums("color", 3)?;
                m.color = [c[0], c[1], c[2]];
            }
            Ok(m)
        };
        match kind {
            "room" => {
                room = Some(Room {
                    min: vec3("min")?,
                    max: vec3("max")?,
                    wall: Material::of_class(class("wall")?),
                    floor: Material::of_class(class("floor")?),
                    ceiling: Material::of_class(class("ceiling")?),
                })
            }
            "rect" => {
                let axis = match get("axis")? {
                    "x" => 0,
                    "y" => 1,
                    "z" => 2,
                    other => return Err(err(format!("bad axis {other:?}"))),
                };
                let at = get("at")?.parse::<f64>().map_err(|_| err("bad at=".into()))?;
                let (u, v) = (nums("u", 2)?, nums("v", 2)?);
                primitives.push(Primitive::Rect {
                    axis,
                    at,
                    u: [u[0], u[1]],
                    v: [v[0], v[1]],
                    material: material("class")?,
                });
            }
            "box" => primitives.push(Primitive::Box {
                min: vec3("min")?,
                max: vec3("max")?,
                material: material("class")?,
            }),
            other => return Err(err(format!("unknown item {other:?}"))),
        }
    }
    let scene = SceneSpec {
        num_classes: num_classes.ok_or_else(|| Error::format(origin, "scene lacks `classes`"))?,
        room,
        primitives,
    };
    scene.validate()?;
    Ok(scene)
}

/// One rendered view. Missed rays have class 0, missing depth and black color.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub rgb: Tensor,
    pub depth: DepthMap,
    pub labels: LabelMap,
}

fn shade(hit: &Hit) -> [f64; 3] {
    let (i, j) = plane_axes(hit.axis);
    let cell = (hit.point[i] / CHECKER).floor() as i64 + (hit.point[j] / CHECKER).floor() as i64;
    let f = if cell.rem_euclid(2) == 0 { 1.0 } else { 0.8 };
    hit.material.color.map(|c| c * f)
}

/// Renders color, exact depth and class of each pixel center.
pub fn render_view(scene: &SceneSpec, pose: &RigidTransform, k: &CameraIntrinsics) -> RenderedView {
    let (h, w) = (k.height, k.width);
    let rows: Vec<Vec<Option<Hit>>> = (0..h)
        .into_par_iter()
        .map(|y| (0..w).map(|x| scene.cast_pixel(pose, k, x as f64, y as f64)).collect())
        .collect();
    let mut rgb = Tensor::zeros(Shape::new(3, h, w));
    let mut depth = DepthMap::new(h, w, 0.0);
    let mut labels = LabelMap::new(h, w, 0);
    for (y, row) in rows.iter().enumerate() {
        for (x, hit) in row.iter().enumerate() {
            if let Some(hit) = hit {
                depth.set(y, x, hit.t);
                labels.set(y, x, hit.material.class);
                for (c, v) in shade(hit).into_iter().enumerate() {
                    rgb.set(c, y, x, v);
                }
            }
        }
    }
    RenderedView { rgb, depth, labels }
}

pub fn render(scene: &SceneSpec, pose: &RigidTransform, k: &CameraIntrinsics) -> (DepthMap, LabelMap) {
    let v = render_view(scene, pose, k);
    (v.depth, v.labels)
}

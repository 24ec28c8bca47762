//! Sequence manifest: a keyframe plus neighbor frames with their files.
//!
//! ```text
//! mvseg-manifest 1
//! classes 5
//! intrinsics intrinsics.txt
//! trajectory trajectory.txt
//! keyframe 12
//! frame id=12 time=0.400000 rgb=rgb/000012.ppm depth=depth/000012.pgm label=label/000012.pgm
//! frame id=11 time=0.366667 rgb=rgb/000011.ppm depth=depth/000011.pgm scores=scores/000011.mvft
//! ```
//!
//! Blank lines and `#` comments are ignored. Relative paths resolve against
//! the manifest's directory. Neighbors keep the order of their `frame` lines,
//! which should be nearest-first along the trajectory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const HEADER: &str = "mvseg-manifest 1";

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub id: usize,
    pub timestamp: f64,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub label: Option<PathBuf>,
    /// Precomputed class scores for this frame (`MVFT`).
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    pub num_classes: usize,
    pub intrinsics: PathBuf,
    pub trajectory: PathBuf,
    pub keyframe: FrameRecord,
    pub neighbors: Vec<FrameRecord>,
}

impl SequenceManifest {
    /// Keyframe followed by the neighbors.
    pub fn frames(&self) -> impl Iterator<Item = &FrameRecord> {
        std::iter::once(&self.keyframe).chain(&self.neighbors)
    }

    pub fn frame(&self, id: usize) -> Option<&FrameRecord> {
        self.frames().find(|f| f.id == id)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let base = origin.parent().unwrap_or(Path::new(""));
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut header_seen = false;
        let mut num_classes = None;
        let mut intrinsics = None;
        let mut trajectory = None;
        let mut keyframe_id = None;
        let mut frames: Vec<FrameRecord> = Vec::new();
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
            if !header_seen {
                if line != HEADER {
                    return Err(err(format!("expected header {HEADER:?}")));
                }
                header_seen = true;
                continue;
            }
            let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            let number = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad number {s:?}")));
            match key {
                "classes" => num_classes = Some(number(rest)?),
                "intrinsics" => intrinsics = Some(resolve(rest)),
                "trajectory" => trajectory = Some(resolve(rest)),
                "keyframe" => keyframe_id = Some(number(rest)?),
                "frame" => {
                    let mut id = None;
                    let mut time = None;
                    let (mut rgb, mut depth, mut label, mut scores) = (None, None, None, None);
                    for field in rest.split_whitespace() {
                        let (k, v) = field
                            .split_once('=')
                            .ok_or_else(|| err(format!("expected key=value, got {field:?}")))?;
                        match k {
                            "id" => id = Some(number(v)?),
                            "time" => {
                                time = Some(
                                    v.parse::<f64>()
                                        .map_err(|_| err(format!("bad time {v:?}")))?,
                                )
                            }
                            "rgb" => rgb = Some(resolve(v)),
                            "depth" => depth = Some(resolve(v)),
                            "label" => label = Some(resolve(v)),
                            "scores" => scores = Some(resolve(v)),
                            other => return Err(err(format!("unknown frame field {other:?}"))),
                        }
                    }
                    let missing = |what: &str| err(format!("frame line lacks {what}="));
                    let record = FrameRecord {
                        id: id.ok_or_else(|| missing("id"))?,
                        timestamp: time.ok_or_else(|| missing("time"))?,
                        rgb: rgb.ok_or_else(|| missing("rgb"))?,
                        depth: depth.ok_or_else(|| missing("depth"))?,
                        label,
                        scores,
                    };
                    if frames.iter().any(|f| f.id == record.id) {
                        return Err(err(format!("duplicate frame id {}", record.id)));
                    }
                    frames.push(record);
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        let missing = |what: &str| Error::format(origin, format!("manifest lacks `{what}`"));
        if !header_seen {
            return Err(missing(HEADER));
        }
        let num_classes = num_classes.ok_or_else(|| missing("classes"))?;
        let intrinsics = intrinsics.ok_or_else(|| missing("intrinsics"))?;
        let trajectory = trajectory.ok_or_else(|| missing("trajectory"))?;
        let keyframe_id = keyframe_id.ok_or_else(|| missing("keyframe"))?;
        let pos = frames
            .iter()
            .position(|f| f.id == keyframe_id)
            .ok_or_else(|| Error::format(origin, format!("keyframe {keyframe_id} has no frame line")))?;
        let keyframe = frames.remove(pos);
        if keyframe.label.is_none() {
            return Err(Error::format(origin, "keyframe has no label file"));
        }
        Ok(Self {
            num_classes,
            intrinsics,
            trajectory,
            keyframe,
            neighbors: frames,
        })
    }

    /// Reads and parses a manifest, and checks that the keyframe label exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::parse(&text, path)?;
        let label = m.keyframe.label.as_ref().unwrap();
        if !label.is_file() {
            return Err(Error::io(
                label,
                std::io::Error::new(std::io::ErrorKind::NotFound, "keyframe label file not found"),
            ));
        }
        Ok(m)
    }

    /// Serializes with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = format!("{HEADER}\n");
        writeln!(out, "classes {}", self.num_classes).unwrap();
        writeln!(out, "intrinsics {}", rel(&self.intrinsics)).unwrap();
        writeln!(out, "trajectory {}", rel(&self.trajectory)).unwrap();
        writeln!(out, "keyframe {}", self.keyframe.id).unwrap();
        for f in self.frames() {
            write!(
                out,
                "frame id={} time={:.6} rgb={} depth={}",
                f.id,
                f.timestamp,
                rel(&f.rgb),
                rel(&f.depth)
            )
            .unwrap();
            if let Some(l) = &f.label {
                write!(out, " label={}", rel(l)).unwrap();
            }
            if let Some(s) = &f.scores {
                write!(out, " scores={}", rel(s)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        std::fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }
}

//! On-disk formats: PGM/PPM images, TUM-style trajectories and sequence manifests.

mod manifest;
mod pnm;
mod trajectory;

pub use manifest::{FrameRecord, SequenceManifest};
pub use pnm::{
    load_depth, load_labels, load_mask, load_rgb, save_depth, save_labels, save_mask, save_rgb,
};
pub use trajectory::{
    load_trajectory, parse_trajectory, save_trajectory, Trajectory, TrajectoryEntry,
    ASSOCIATION_TOLERANCE,
};

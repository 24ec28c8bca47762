//! Synthetic multi-view RGB-D world with exact geometry: scenes, camera
//! paths, simulated predictions, a brute-force warping oracle and the
//! fusion-gain benchmark.

pub mod bench;
pub mod dataset;
pub mod noise;
pub mod oracle;
pub mod path;
pub mod scene;

pub use bench::{run_fusion_benchmark, BenchmarkReport};
pub use dataset::{default_intrinsics, render_sequence, sequence_sample, synthetic_set, write_sequence, SyntheticSetConfig};
pub use noise::{simulate_predictions, NoiseModel};
pub use oracle::oracle_warp;
pub use path::{keyframe_index, neighbors_by_distance, PathKind, PathSpec};
pub use scene::{render, render_view, Material, Primitive, RenderedView, Room, SceneSpec};

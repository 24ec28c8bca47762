use std::path::Path;

use mvseg_core::geometry::RigidTransform;
use mvseg_core::io::{load_labels, parse_trajectory, save_labels, Trajectory, TrajectoryEntry};
use mvseg_core::learning::{curriculum_sampler, curriculum_window, stochastic_pool_labels};
use mvseg_core::metrics::ConfusionMatrix;
use mvseg_core::synth::{simulate_predictions, NoiseModel};
use mvseg_core::{Error, LabelMap, Shape, Tensor, IGNORE};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
    let v = |rng: &mut ChaCha8Rng| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = v(rng);
    let t = v(rng) * 3.0;
    RigidTransform::from_axis_angle(axis, rng.random_range(-3.0..3.0), t)
}

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: u8) -> LabelMap {
    let data = (0..h * w)
        .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..k) })
        .collect();
    LabelMap::from_vec(h, w, data).unwrap()
}

proptest! {
    #[test]
    fn relative_poses_compose_to_identity(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n).map(|i| TrajectoryEntry::from_pose(i as f64 / 30.0, &random_pose(&mut rng))).collect();
        let traj = Trajectory::new(entries).unwrap();
        let (a, b) = (rng.random_range(0..n) as f64 / 30.0, rng.random_range(0..n) as f64 / 30.0);
        let same = traj.relative_pose(a, a).unwrap();
        prop_assert!(same.max_abs_diff(&RigidTransform::identity()) < 1e-9);
        let round = traj.relative_pose(a, b).unwrap().compose(&traj.relative_pose(b, a).unwrap());
        prop_assert!(round.max_abs_diff(&RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn truncated_mvft_is_rejected_with_position(c in 1usize..3, h in 1usize..5, w in 1usize..5, cut in 0.0f64..1.0) {
        let t = Tensor::new(Shape::new(c, h, w), 1.5).unwrap();
        let mut bytes = Vec::new();
        t.write_mvft(&mut bytes).unwrap();
        let keep = ((bytes.len() as f64) * cut) as usize;
        let first = Tensor::read_mvft(&bytes[..keep], Path::new("x.mvft")).unwrap_err().to_string();
        let second = Tensor::read_mvft(&bytes[..keep], Path::new("x.mvft")).unwrap_err().to_string();
        prop_assert_eq!(&first, &second);
        prop_assert!(first.contains("x.mvft") && first.contains("byte"), "{}", first);
    }

    #[test]
    fn truncated_pgm_is_rejected_with_position(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        save_labels(&path, &random_labels(&mut rng, 4, 6, 5)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..((bytes.len() as f64) * cut) as usize]).unwrap();
        match load_labels(&path) {
            Err(e @ Error::Format { .. }) => prop_assert!(e.to_string().contains("l.pgm")),
            other => prop_assert!(false, "expected a format error, got {:?}", other),
        }
    }

    #[test]
    fn pooled_labels_come_from_their_block(seed in any::<u64>(), f in prop::sample::select(vec![1usize, 2, 4])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_labels(&mut rng, 8, 8, 4);
        let pooled = stochastic_pool_labels(&gt, f, &mut rng).unwrap();
        for i in 0..8 / f {
            for j in 0..8 / f {
                let block: Vec<u8> = (i * f..(i + 1) * f)
                    .flat_map(|y| (j * f..(j + 1) * f).map(move |x| (y, x)))
                    .map(|(y, x)| gt.get(y, x))
                    .filter(|&l| l != IGNORE)
                    .collect();
                let l = pooled.get(i, j);
                if block.is_empty() {
                    prop_assert_eq!(l, IGNORE);
                } else {
                    prop_assert!(block.contains(&l));
                }
            }
        }
    }

    #[test]
    fn curriculum_draws_stay_in_window(seed in any::<u64>(), available in 1usize..60, epoch in 0usize..40, count in 0usize..6) {
        let window = curriculum_window(available, epoch, 5, 10);
        prop_assert!(window <= available);
        prop_assert!(curriculum_window(available, epoch + 1, 5, 10) >= window);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut drawn = curriculum_sampler(available, epoch, 5, 10, count, &mut rng).unwrap();
        prop_assert_eq!(drawn.len(), count.min(window));
        prop_assert!(drawn.iter().all(|&i| i < window));
        drawn.sort_unstable();
        drawn.dedup();
        prop_assert_eq!(drawn.len(), count.min(window));
    }

    #[test]
    fn simulated_predictions_are_reproducible(seed in any::<u64>(), view in 0u64..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_labels(&mut rng, 6, 7, 5);
        let noise = NoiseModel { seed, boundary_radius: 1, ..NoiseModel::default() };
        let a = simulate_predictions(&gt, 5, &noise, &mut noise.view_rng(view)).unwrap();
        let b = simulate_predictions(&gt, 5, &noise, &mut noise.view_rng(view)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn metrics_are_fractions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_labels(&mut rng, 5, 5, 4);
        let pred = LabelMap::from_vec(5, 5, (0..25).map(|_| rng.random_range(0..4u8)).collect()).unwrap();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &gt).unwrap();
        prop_assume!(cm.total() > 0);
        let s = cm.scores().unwrap();
        for v in [s.pixelwise, s.classwise, s.mean_iou] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let trace: u64 = (0..4).map(|i| cm.get(i, i)).sum();
        prop_assert_eq!(s.pixelwise, trace as f64 / cm.total() as f64);
    }
}

#[test]
fn trajectory_text_roundtrips_relative_poses() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let entries: Vec<_> = (0..5).map(|i| TrajectoryEntry::from_pose(i as f64, &random_pose(&mut rng))).collect();
    let text: String = entries
        .iter()
        .map(|e| {
            let q = e.pose().quaternion();
            let t = e.pose().translation().clone_owned();
            format!("{} {} {} {} {} {} {} {}\n", e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w)
        })
        .collect();
    let parsed = parse_trajectory(&text, Path::new("t.txt")).unwrap();
    let original = Trajectory::new(entries).unwrap();
    let (a, b) = (original.relative_pose(1.0, 3.0).unwrap(), parsed.relative_pose(1.0, 3.0).unwrap());
    assert!(a.max_abs_diff(&b) < 1e-9);
}

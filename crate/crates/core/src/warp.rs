//! Bilinear sampling through a fixed warp grid, forward and backward.
//!
//! The grid is a constant of the layer: gradients flow to the sampled source
//! tensor only. Taps outside the source image make the output pixel invalid
//! instead of being clamped, and invalid pixels carry zero.

use rayon::prelude::*;

use crate::geometry::{tap, unnormalize_coord, WarpGrid};
use crate::tensor::{Mask, Shape, Tensor};

/// A map synthesized in the target view.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledMap {
    pub values: Tensor,
    pub validity: Mask,
}

impl SampledMap {
    /// Wraps an unwarped map as valid everywhere.
    pub fn all_valid(values: Tensor) -> Self {
        let validity = Mask::new(values.height(), values.width(), true);
        Self { values, validity }
    }
}

#[derive(Debug, Clone, Copy)]
struct Taps {
    idx: [usize; 4],
    weight: [f64; 4],
}

fn compute_taps(grid: &WarpGrid, src_h: usize, src_w: usize) -> Vec<Option<Taps>> {
    grid.coords()
        .iter()
        .zip(grid.validity().data())
        .map(|(&[u, v], &valid)| {
            if !valid {
                return None;
            }
            let (x0, fx) = tap(unnormalize_coord(u, src_w), src_w)?;
            let (y0, fy) = tap(unnormalize_coord(v, src_h), src_h)?;
            let x1 = (x0 + 1).min(src_w - 1);
            let y1 = (y0 + 1).min(src_h - 1);
            Some(Taps {
                idx: [
                    y0 * src_w + x0,
                    y0 * src_w + x1,
                    y1 * src_w + x0,
                    y1 * src_w + x1,
                ],
                weight: [
                    (1.0 - fy) * (1.0 - fx),
                    (1.0 - fy) * fx,
                    fy * (1.0 - fx),
                    fy * fx,
                ],
            })
        })
        .collect()
}

/// Output validity of sampling a `src_h x src_w` map through `grid`.
pub fn sample_validity(grid: &WarpGrid, src_h: usize, src_w: usize) -> Mask {
    let data = compute_taps(grid, src_h, src_w)
        .iter()
        .map(Option::is_some)
        .collect();
    Mask::from_vec(grid.height(), grid.width(), data).expect("grid-sized mask")
}

/// Samples `source` at the grid locations.
pub fn bilinear_sample(source: &Tensor, grid: &WarpGrid) -> SampledMap {
    let taps = compute_taps(grid, source.height(), source.width());
    let (h, w) = (grid.height(), grid.width());
    let mut values = Tensor::zeros(Shape::new(source.channels(), h, w));
    values
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(c, out)| {
            let src = source.channel(c);
            for (o, t) in out.iter_mut().zip(&taps) {
                if let Some(t) = t {
                    *o = t.weight[0] * src[t.idx[0]]
                        + t.weight[1] * src[t.idx[1]]
                        + t.weight[2] * src[t.idx[2]]
                        + t.weight[3] * src[t.idx[3]];
                }
            }
        });
    let validity = Mask::from_vec(h, w, taps.iter().map(Option::is_some).collect())
        .expect("grid-sized mask");
    SampledMap { values, validity }
}

/// Gradient of a loss with respect to the sampled source, given the gradient
/// with respect to the sampled output. This is the exact transpose of
/// [`bilinear_sample`]; invalid output pixels contribute nothing.
pub fn bilinear_sample_backward(grad_output: &Tensor, grid: &WarpGrid, source_shape: Shape) -> Tensor {
    assert_eq!(
        (grad_output.height(), grad_output.width()),
        (grid.height(), grid.width()),
        "grad_output must match the grid"
    );
    assert_eq!(grad_output.channels(), source_shape.channels);
    let taps = compute_taps(grid, source_shape.height, source_shape.width);
    let plane_out = grid.height() * grid.width();
    let mut grad = Tensor::zeros(source_shape);
    // One channel per task: scatters never cross channel slices.
    grad.data_mut()
        .par_chunks_mut(source_shape.plane())
        .enumerate()
        .for_each(|(c, g)| {
            let go = &grad_output.data()[c * plane_out..(c + 1) * plane_out];
            for (&d, t) in go.iter().zip(&taps) {
                if let Some(t) = t {
                    for k in 0..4 {
                        g[t.idx[k]] += t.weight[k] * d;
                    }
                }
            }
        });
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{normalize_coord, WarpGrid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
        let n = shape.checked_len().unwrap();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> WarpGrid {
        let coords = (0..h * w)
            .map(|_| [rng.random_range(-1.1..1.1), rng.random_range(-1.1..1.1)])
            .collect();
        let valid = Mask::from_vec(h, w, (0..h * w).map(|_| rng.random_bool(0.85)).collect()).unwrap();
        WarpGrid::from_parts(h, w, coords, valid).unwrap()
    }

    fn point_grid(u: f64, v: f64) -> WarpGrid {
        WarpGrid::from_parts(1, 1, vec![[u, v]], Mask::new(1, 1, true)).unwrap()
    }

    #[test]
    fn identity_grid_copies_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = random_tensor(&mut rng, Shape::new(3, 6, 8));
        let out = bilinear_sample(&src, &WarpGrid::identity(6, 8));
        assert_eq!(out.values, src);
        assert_eq!(out.validity.count_valid(), 48);
        let back = bilinear_sample_backward(&src, &WarpGrid::identity(6, 8), src.shape());
        assert_eq!(back, src);
    }

    #[test]
    fn node_and_midpoint() {
        let src = Tensor::from_vec(Shape::new(1, 2, 3), vec![1.0, 3.0, 5.0, 7.0, 9.0, 11.0]).unwrap();
        let g = point_grid(normalize_coord(2.0, 3), normalize_coord(1.0, 2));
        assert_eq!(bilinear_sample(&src, &g).values.data(), &[11.0]);

        let g = point_grid(normalize_coord(0.5, 3), normalize_coord(0.0, 2));
        let out = bilinear_sample(&src, &g);
        assert!((out.values.data()[0] - 2.0).abs() < 1e-15);

        let grad = Tensor::from_vec(Shape::new(1, 1, 1), vec![1.0]).unwrap();
        let back = bilinear_sample_backward(&grad, &g, src.shape());
        assert!((back.data()[0] - 0.5).abs() < 1e-15);
        assert!((back.data()[1] - 0.5).abs() < 1e-15);
        assert_eq!(back.data()[2..], [0.0; 4]);
    }

    #[test]
    fn out_of_range_is_invalid_and_zero() {
        let src = Tensor::new(Shape::new(2, 4, 4), 3.0).unwrap();
        // Pixel -0.25 lies inside the image edge but has no left tap.
        let g = point_grid(normalize_coord(-0.25, 4), 0.0);
        let out = bilinear_sample(&src, &g);
        assert!(!out.validity.get(0, 0));
        assert_eq!(out.values.data(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_difference_matches_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let src = random_tensor(&mut rng, Shape::new(2, 5, 6));
        let grid = random_grid(&mut rng, 4, 7);
        let weights = random_tensor(&mut rng, Shape::new(2, 4, 7));
        let loss = |s: &Tensor| bilinear_sample(s, &grid).values.dot(&weights);
        let analytic = bilinear_sample_backward(&weights, &grid, src.shape());
        let eps = 1e-6;
        for i in 0..src.data().len() {
            let mut p = src.clone();
            p.data_mut()[i] += eps;
            let mut m = src.clone();
            m.data_mut()[i] -= eps;
            let num = (loss(&p) - loss(&m)) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
            assert!(rel < 1e-5, "element {i}: analytic {a} numeric {num}");
        }
    }

    proptest! {
        #[test]
        fn adjointness(seed in any::<u64>(), sh in 1usize..6, sw in 1usize..6, gh in 1usize..6, gw in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_tensor(&mut rng, Shape::new(2, sh, sw));
            let grid = random_grid(&mut rng, gh, gw);
            let v = random_tensor(&mut rng, Shape::new(2, gh, gw));
            let lhs = bilinear_sample(&u, &grid).values.dot(&v);
            let rhs = u.dot(&bilinear_sample_backward(&v, &grid, u.shape()));
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn linearity(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, Shape::new(2, 5, 5));
            let y = random_tensor(&mut rng, Shape::new(2, 5, 5));
            let grid = random_grid(&mut rng, 4, 4);
            let mut combo = x.scale(a);
            combo.add_assign(&y.scale(b));
            let lhs = bilinear_sample(&combo, &grid);
            let mut rhs = bilinear_sample(&x, &grid).values.scale(a);
            rhs.add_assign(&bilinear_sample(&y, &grid).values.scale(b));
            for (l, r) in lhs.values.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }

        #[test]
        fn constant_is_preserved(seed in any::<u64>(), c in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = Tensor::new(Shape::new(1, 6, 5), c).unwrap();
            let grid = random_grid(&mut rng, 5, 5);
            let out = bilinear_sample(&src, &grid);
            for (v, ok) in out.values.data().iter().zip(out.validity.data()) {
                if *ok {
                    prop_assert!((v - c).abs() < 1e-12);
                } else {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }
}

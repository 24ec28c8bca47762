//! Central finite-difference checks of every hand-written gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::consistency::ConsistencyMode;
use super::layers::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, maxpool2, maxpool2_backward, relu,
    relu_backward, unpool2, unpool2_backward, ConvParams,
};
use super::loss::{cross_entropy_loss, label_pyramid};
use super::net::{toynet_forward, ToyNetConfig, ToyNetParams};
use super::train::{sample_loss_and_grad, NetInput, PreparedNeighbor, PreparedSequence};
use crate::error::Result;
use crate::fusion::{multiview_maxpool, multiview_maxpool_backward};
use crate::geometry::{compute_warp_grid, downsample_grid, CameraIntrinsics, DepthMap, RigidTransform, WarpGrid};
use crate::tensor::{LabelMap, Mask, Shape, Tensor, IGNORE};
use crate::warp::{bilinear_sample, bilinear_sample_backward, SampledMap};
use nalgebra::Vector3;

/// Finite-difference step.
pub const STEP: f64 = 1e-6;
/// Gradient magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-5;
/// Elements checked per network layer.
const SAMPLES_PER_LAYER: usize = 24;
/// Required distance of every ReLU input and pooling runner-up from a kink.
const MIN_KINK_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub median_rel_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic[i]` against central differences of `f` at the given
/// indices of `x`.
pub fn check_gradient(
    name: &str,
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
) -> GradCheck {
    let mut xp = x.to_vec();
    let mut errs: Vec<f64> = indices
        .into_iter()
        .map(|i| {
            xp[i] = x[i] + STEP;
            let fp = f(&xp);
            xp[i] = x[i] - STEP;
            let fm = f(&xp);
            xp[i] = x[i];
            rel_err(analytic[i], (fp - fm) / (2.0 * STEP))
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    GradCheck {
        name: name.to_string(),
        max_rel_err: errs.last().copied().unwrap_or(0.0),
        median_rel_err: errs.get(errs.len() / 2).copied().unwrap_or(0.0),
        checked: errs.len(),
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, s: Shape) -> Tensor {
    Tensor::from_vec(s, rand_vec(rng, s.checked_len().unwrap())).unwrap()
}

fn rand_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> ConvParams {
    let mut p = ConvParams::zeros(cin, cout, k);
    p.weight = rand_vec(rng, p.weight.len());
    p.bias = rand_vec(rng, p.bias.len());
    p
}

fn tensor_of(shape: Shape, v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

fn all(n: usize) -> std::ops::Range<usize> {
    0..n
}

/// A grid mixing interior, edge and out-of-range coordinates.
fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> WarpGrid {
    let coords = (0..h * w)
        .map(|_| [rng.random_range(-1.1..1.1), rng.random_range(-1.1..1.1)])
        .collect();
    WarpGrid::from_parts(h, w, coords, Mask::new(h, w, true)).unwrap()
}

fn check_sampler(rng: &mut ChaCha8Rng) -> GradCheck {
    let src_shape = Shape::new(3, 8, 10);
    let src = rand_tensor(rng, src_shape);
    let grid = random_grid(rng, 6, 7);
    let w = rand_tensor(rng, Shape::new(3, 6, 7));
    let g = bilinear_sample_backward(&w, &grid, src_shape);
    check_gradient(
        "bilinear_sampler",
        |v| bilinear_sample(&tensor_of(src_shape, v), &grid).values.dot(&w),
        src.data(),
        g.data(),
        all(src.data().len()),
    )
}

/// Checks a layer w.r.t. its input and parameters, flattened as `[x, W, b]`.
fn check_conv_like(rng: &mut ChaCha8Rng, transposed: bool) -> GradCheck {
    let xs = Shape::new(3, 8, 8);
    let x = rand_tensor(rng, xs);
    let p = rand_conv(rng, 3, 2, 3);
    let wy = rand_tensor(rng, Shape::new(2, 8, 8));
    let fwd = |x: &Tensor, p: &ConvParams| if transposed { conv_transpose2d(x, p) } else { conv2d(x, p) };
    let (gx, gp) = if transposed {
        conv_transpose2d_backward(&x, &p, &wy, true)
    } else {
        conv2d_backward(&x, &p, &wy, true)
    };
    let (nx, nw) = (x.data().len(), p.weight.len());
    let flat: Vec<f64> = [x.data(), &p.weight, &p.bias].concat();
    let analytic: Vec<f64> = [gx.unwrap().data(), &gp.weight[..], &gp.bias[..]].concat();
    let name = if transposed { "conv_transpose2d" } else { "conv2d" };
    check_gradient(
        name,
        |v| {
            let mut q = p.clone();
            q.weight.copy_from_slice(&v[nx..nx + nw]);
            q.bias.copy_from_slice(&v[nx + nw..]);
            fwd(&tensor_of(xs, &v[..nx]), &q).dot(&wy)
        },
        &flat,
        &analytic,
        all(flat.len()),
    )
}

fn check_pooling(rng: &mut ChaCha8Rng) -> Vec<GradCheck> {
    let xs = Shape::new(2, 8, 8);
    let x = rand_tensor(rng, xs);
    let (_, switches) = maxpool2(&x);
    let wy = rand_tensor(rng, Shape::new(2, 4, 4));
    let pool = check_gradient(
        "maxpool2",
        |v| maxpool2(&tensor_of(xs, v)).0.dot(&wy),
        x.data(),
        maxpool2_backward(xs, &switches, &wy).data(),
        all(x.data().len()),
    );
    let small = rand_tensor(rng, Shape::new(2, 4, 4));
    let wu = rand_tensor(rng, xs);
    let unpool = check_gradient(
        "unpool2",
        |v| unpool2(&tensor_of(small.shape(), v), &switches, xs).dot(&wu),
        small.data(),
        unpool2_backward(&switches, &wu, small.shape()).data(),
        all(small.data().len()),
    );
    let relu_check = check_gradient(
        "relu",
        |v| relu(&tensor_of(xs, v)).dot(&wu),
        x.data(),
        relu_backward(&x, &wu).data(),
        all(x.data().len()),
    );
    vec![pool, unpool, relu_check]
}

fn check_cross_entropy(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = Shape::new(3, 8, 8);
    let scores = Tensor::from_vec(s, rand_vec(rng, 192).iter().map(|v| 3.0 * v).collect()).unwrap();
    let labels = (0..64)
        .map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..3) })
        .collect();
    let gt = LabelMap::from_vec(8, 8, labels).unwrap();
    let (_, g) = cross_entropy_loss(&scores, &gt).unwrap();
    check_gradient(
        "cross_entropy",
        |v| cross_entropy_loss(&tensor_of(s, v), &gt).unwrap().0,
        scores.data(),
        g.data(),
        all(192),
    )
}

fn check_view_maxpool(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = Shape::new(3, 6, 6);
    let n = s.checked_len().unwrap();
    let views: Vec<SampledMap> = (0..3)
        .map(|_| {
            let valid = (0..36).map(|_| rng.random_bool(0.7)).collect();
            SampledMap {
                values: rand_tensor(rng, s),
                validity: Mask::from_vec(6, 6, valid).unwrap(),
            }
        })
        .collect();
    let w = rand_tensor(rng, s);
    let pooled = multiview_maxpool(&views).unwrap();
    let grads = multiview_maxpool_backward(&w, &pooled, views.len());
    let flat: Vec<f64> = views.iter().flat_map(|v| v.values.data().to_vec()).collect();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    check_gradient(
        "view_maxpool",
        |v| {
            let vs: Vec<SampledMap> = views
                .iter()
                .enumerate()
                .map(|(i, m)| SampledMap {
                    values: tensor_of(s, &v[i * n..(i + 1) * n]),
                    validity: m.validity.clone(),
                })
                .collect();
            multiview_maxpool(&vs).unwrap().map.values.dot(&w)
        },
        &flat,
        &analytic,
        all(flat.len()),
    )
}

/// A 16x16 keyframe and one neighbor seen from a slightly moved camera over
/// a slanted plane, with random image content.
fn synthetic_pair(rng: &mut ChaCha8Rng, config: &ToyNetConfig) -> Result<(PreparedSequence, Vec<LabelMap>)> {
    let (h, w) = (16, 16);
    let k = CameraIntrinsics::new(16.0, 16.0, 7.5, 7.5, w, h)?;
    let mut depth = DepthMap::new(h, w, 2.0);
    for y in 0..h {
        for x in 0..w {
            depth.set(y, x, 2.0 + 0.02 * x as f64 + 0.01 * y as f64);
        }
    }
    let pose = RigidTransform::from_axis_angle(
        Vector3::new(0.2, 1.0, 0.1),
        0.04,
        Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.05..0.05), 0.02),
    );
    let grid = compute_warp_grid(&depth, &pose, &k)?;
    let grids = downsample_grid(&grid, config.levels() - 1)?;
    let input = |rng: &mut ChaCha8Rng| NetInput {
        rgb: rand_tensor(rng, Shape::new(3, h, w)),
        depth: rand_tensor(rng, Shape::new(1, h, w)),
    };
    let labels = (0..h * w).map(|_| rng.random_range(0..config.num_classes as u8)).collect();
    let seq = PreparedSequence {
        keyframe: input(rng),
        gt: LabelMap::from_vec(h, w, labels)?,
        neighbors: vec![PreparedNeighbor { input: input(rng), grids }],
    };
    let pyramid = label_pyramid(&seq.gt, config.levels(), rng)?;
    Ok((seq, pyramid))
}

/// Smallest gap between the two largest positive values among the views
/// valid at each element after warping decoder features.
fn fusion_margin(params: &ToyNetParams, seq: &PreparedSequence) -> Result<f64> {
    let key = toynet_forward(params, &seq.keyframe.rgb, &seq.keyframe.depth)?;
    let mut margin = key.kink_margin();
    for n in &seq.neighbors {
        let pass = toynet_forward(params, &n.input.rgb, &n.input.depth)?;
        margin = margin.min(pass.kink_margin());
        for (l, feat) in pass.features.iter().enumerate() {
            let warped = bilinear_sample(feat, &n.grids[l]);
            let kf = &key.features[l];
            let plane = kf.height() * kf.width();
            for (i, (a, b)) in kf.data().iter().zip(warped.values.data()).enumerate() {
                if warped.validity.data()[i % plane] && a.max(*b) > 0.0 {
                    margin = margin.min((a - b).abs());
                }
            }
        }
    }
    Ok(margin)
}

/// Checks the full pipeline (both frames forward, warp, fusion, loss, both
/// frames backward) w.r.t. sampled parameters of every layer.
pub fn check_consistency(mode: ConsistencyMode, seed: u64) -> Result<Vec<GradCheck>> {
    let config = ToyNetConfig {
        num_classes: 3,
        widths: vec![4, 6],
        kernel: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Draw instances until no ReLU, pooling or fusion decision sits within
    // reach of the finite-difference step.
    let (params, seq, pyramid) = loop {
        let mut params = ToyNetParams::init(config.clone(), rng.random())?;
        for layer in &mut params.layers {
            layer.bias = rand_vec(&mut rng, layer.bias.len()).iter().map(|b| 0.1 * b).collect();
        }
        let (seq, pyramid) = synthetic_pair(&mut rng, &config)?;
        if fusion_margin(&params, &seq)? > MIN_KINK_MARGIN {
            break (params, seq, pyramid);
        }
    };
    let chosen = [0];
    let (_, grads) = sample_loss_and_grad(mode, &params, &seq, &chosen, &pyramid)?;
    let x0 = params.to_flat();
    let g0 = grads.to_flat();
    let loss = |v: &[f64]| {
        let mut p = params.clone();
        p.set_flat(v);
        sample_loss_and_grad(mode, &p, &seq, &chosen, &pyramid).unwrap().0
    };
    let mut out = Vec::new();
    let mut offset = 0;
    for (name, layer) in params.layer_names().iter().zip(&params.layers) {
        let n = layer.num_params();
        let picks = sample(&mut rng, n, SAMPLES_PER_LAYER.min(n)).into_iter().map(|i| offset + i);
        out.push(check_gradient(&format!("{mode}_loss/{name}"), loss, &x0, &g0, picks));
        offset += n;
    }
    Ok(out)
}

/// The whole suite: every layer kernel, the loss, and the consistency
/// losses through the network.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        check_sampler(&mut rng),
        check_conv_like(&mut rng, false),
        check_conv_like(&mut rng, true),
    ];
    out.extend(check_pooling(&mut rng));
    out.push(check_cross_entropy(&mut rng));
    out.push(check_view_maxpool(&mut rng));
    for mode in ConsistencyMode::ALL {
        out.extend(check_consistency(mode, rng.random())?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_kernels_pass_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checks = vec![check_sampler(&mut rng), check_conv_like(&mut rng, false), check_conv_like(&mut rng, true)];
        checks.extend(check_pooling(&mut rng));
        checks.push(check_cross_entropy(&mut rng));
        checks.push(check_view_maxpool(&mut rng));
        for c in checks {
            assert!(c.max_rel_err < 1e-5, "{c:?}");
        }
    }

    #[test]
    fn warp_and_fusion_losses_pass_tightly() {
        for mode in [ConsistencyMode::Bayes, ConsistencyMode::Maxpool] {
            for c in check_consistency(mode, 4).unwrap() {
                assert!(c.max_rel_err < 1e-5, "{c:?}");
            }
        }
    }
}

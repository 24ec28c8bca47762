//! Per-pixel fusion of view predictions in the keyframe.
//!
//! View 0 is the keyframe. At a pixel where no view is valid the keyframe's
//! own value is used, so every fused pixel is defined.

use crate::error::{Error, Result};
use crate::tensor::{Mask, Shape, Tensor};
use crate::warp::SampledMap;

/// Probabilities are clamped to this before products in probability space.
/// The smallest normal `f64`: a zero cannot veto a class, and any probability
/// that is representable passes through unchanged.
pub const PROB_FLOOR: f64 = f64::MIN_POSITIVE;

/// Scores or probabilities of one view, already warped into the keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPrediction {
    pub values: Tensor,
    pub validity: Mask,
    pub view_id: usize,
}

impl ViewPrediction {
    pub fn new(values: Tensor, validity: Mask, view_id: usize) -> Self {
        Self {
            values,
            validity,
            view_id,
        }
    }

    /// Prediction valid at every pixel (the keyframe's own output).
    pub fn keyframe(values: Tensor) -> Self {
        let validity = Mask::new(values.height(), values.width(), true);
        Self::new(values, validity, 0)
    }

    pub fn from_sampled(map: SampledMap, view_id: usize) -> Self {
        Self::new(map.values, map.validity, view_id)
    }
}

/// Channel-wise softmax at every pixel, stabilized by the per-pixel maximum.
pub fn softmax(scores: &Tensor) -> Tensor {
    let shape = scores.shape();
    let (k, plane) = (shape.channels, shape.plane());
    let mut out = Tensor::zeros(shape);
    let src = scores.data();
    let dst = out.data_mut();
    for p in 0..plane {
        let max = (0..k).map(|c| src[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (src[c * plane + p] - max).exp();
            dst[c * plane + p] = e;
            sum += e;
        }
        for c in 0..k {
            dst[c * plane + p] /= sum;
        }
    }
    out
}

fn check_views(views: &[ViewPrediction]) -> Result<Shape> {
    let first = views
        .first()
        .ok_or_else(|| Error::Shape("fusion needs at least one view".into()))?;
    let shape = first.values.shape();
    for v in views {
        if v.values.shape() != shape
            || v.validity.height() != shape.height
            || v.validity.width() != shape.width
        {
            return Err(Error::Shape(format!(
                "view {} has shape {} but view {} has {shape}",
                v.view_id,
                v.values.shape(),
                first.view_id
            )));
        }
    }
    Ok(shape)
}

/// Indices of the views taking part at `pixel`, falling back to the keyframe.
fn participants(views: &[ViewPrediction], pixel: usize) -> impl Iterator<Item = usize> + '_ {
    let any = views.iter().any(|v| v.validity.data()[pixel]);
    views
        .iter()
        .enumerate()
        .filter(move |(i, v)| if any { v.validity.data()[pixel] } else { *i == 0 })
        .map(|(i, _)| i)
}

/// Sum of the scores of all valid views at each pixel. Its softmax is the
/// Bayesian fused distribution.
pub fn sum_scores(views: &[ViewPrediction]) -> Result<Tensor> {
    let shape = check_views(views)?;
    let (k, plane) = (shape.channels, shape.plane());
    let mut out = Tensor::zeros(shape);
    for p in 0..plane {
        for c in 0..k {
            let i = c * plane + p;
            let mut acc = None;
            for v in participants(views, p) {
                let s = views[v].values.data()[i];
                acc = Some(acc.map_or(s, |a: f64| a + s));
            }
            out.data_mut()[i] = acc.unwrap_or(0.0);
        }
    }
    Ok(out)
}

/// Bayesian fusion in log space: softmax of the summed scores.
pub fn bayesian_fuse_scores(views: &[ViewPrediction]) -> Result<Tensor> {
    Ok(softmax(&sum_scores(views)?))
}

/// Bayesian fusion of per-view class probabilities: normalized product over
/// the valid views. Probabilities are floored at [`PROB_FLOOR`] first so a
/// single zero cannot veto a class.
pub fn bayesian_fuse_probs(views: &[ViewPrediction]) -> Result<Tensor> {
    let shape = check_views(views)?;
    let (k, plane) = (shape.channels, shape.plane());
    let mut log_sum = Tensor::zeros(shape);
    for p in 0..plane {
        for v in participants(views, p) {
            let probs = views[v].values.data();
            for c in 0..k {
                log_sum.data_mut()[c * plane + p] += probs[c * plane + p].max(PROB_FLOOR).ln();
            }
        }
    }
    Ok(softmax(&log_sum))
}

/// One recursive Bayes update: posterior ∝ likelihood · prior, per pixel.
pub fn recursive_fuse(prior: &Tensor, likelihood: &Tensor) -> Tensor {
    assert_eq!(prior.shape(), likelihood.shape(), "recursive_fuse shape mismatch");
    let shape = prior.shape();
    let (k, plane) = (shape.channels, shape.plane());
    let mut out = Tensor::zeros(shape);
    for p in 0..plane {
        let idx = |c: usize| c * plane + p;
        let mut norm: f64 = (0..k)
            .map(|c| prior.data()[idx(c)] * likelihood.data()[idx(c)])
            .sum();
        let floored = !(norm > 0.0 && norm.is_finite());
        if floored {
            norm = (0..k)
                .map(|c| prior.data()[idx(c)].max(PROB_FLOOR) * likelihood.data()[idx(c)].max(PROB_FLOOR))
                .sum();
        }
        for c in 0..k {
            let (a, b) = (prior.data()[idx(c)], likelihood.data()[idx(c)]);
            let num = if floored {
                a.max(PROB_FLOOR) * b.max(PROB_FLOOR)
            } else {
                a * b
            };
            out.data_mut()[idx(c)] = num / norm;
        }
    }
    out
}

/// Result of multi-view max-pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPooled {
    pub map: SampledMap,
    /// Winning view per element (channel-major like the tensor), `None`
    /// where no view was valid.
    pub argmax: Vec<Option<usize>>,
}

/// Elementwise maximum over the views valid at each pixel. Ties go to the
/// lowest view index; validity is the union of the view validities.
pub fn multiview_maxpool(features: &[SampledMap]) -> Result<MaxPooled> {
    let first = features
        .first()
        .ok_or_else(|| Error::Shape("max-pool needs at least one view".into()))?;
    let shape = first.values.shape();
    if features.iter().any(|f| f.values.shape() != shape) {
        return Err(Error::Shape("max-pool views differ in shape".into()));
    }
    let (k, plane) = (shape.channels, shape.plane());
    let mut values = Tensor::zeros(shape);
    let mut argmax = vec![None; k * plane];
    let mut validity = Mask::new(shape.height, shape.width, false);
    for p in 0..plane {
        for c in 0..k {
            let i = c * plane + p;
            let mut best: Option<(usize, f64)> = None;
            for (v, f) in features.iter().enumerate() {
                if !f.validity.data()[p] {
                    continue;
                }
                let x = f.values.data()[i];
                if best.is_none_or(|(_, b)| x > b) {
                    best = Some((v, x));
                }
            }
            if let Some((v, x)) = best {
                values.data_mut()[i] = x;
                argmax[i] = Some(v);
                validity.data_mut()[p] = true;
            }
        }
    }
    Ok(MaxPooled {
        map: SampledMap { values, validity },
        argmax,
    })
}

/// Routes `grad` (w.r.t. the pooled map) back to the view that won each element.
pub fn multiview_maxpool_backward(grad: &Tensor, pooled: &MaxPooled, num_views: usize) -> Vec<Tensor> {
    assert_eq!(grad.shape(), pooled.map.values.shape());
    let mut out = vec![Tensor::zeros(grad.shape()); num_views];
    for (i, (g, winner)) in grad.data().iter().zip(&pooled.argmax).enumerate() {
        if let Some(v) = winner {
            out[*v].data_mut()[i] += g;
        }
    }
    out
}

/// How `fuse` and the fusion benchmark combine the views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMethod {
    /// Summed scores (softmax gives the fused distribution).
    Bayes,
    /// Normalized product of per-view probabilities; inputs are scores.
    BayesProb,
    /// Elementwise maximum over the valid views.
    Maxpool,
}

impl std::str::FromStr for FusionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayes" => Ok(Self::Bayes),
            "bayes-prob" => Ok(Self::BayesProb),
            "maxpool" => Ok(Self::Maxpool),
            other => Err(Error::Config(format!("unknown fusion method {other:?} (bayes, bayes-prob, maxpool)"))),
        }
    }
}

/// Fuses score views with `method`. The result's argmax is the fused labeling.
pub fn fuse(method: FusionMethod, views: &[ViewPrediction]) -> Result<Tensor> {
    match method {
        FusionMethod::Bayes => sum_scores(views),
        FusionMethod::BayesProb => {
            let probs: Vec<ViewPrediction> = views
                .iter()
                .map(|v| ViewPrediction::new(softmax(&v.values), v.validity.clone(), v.view_id))
                .collect();
            bayesian_fuse_probs(&probs)
        }
        FusionMethod::Maxpool => {
            let maps: Vec<SampledMap> = views
                .iter()
                .map(|v| SampledMap {
                    values: v.values.clone(),
                    validity: v.validity.clone(),
                })
                .collect();
            let mut pooled = multiview_maxpool(&maps)?;
            // Keyframe fallback where nothing is valid.
            let key = &views[0].values;
            for (i, winner) in pooled.argmax.iter().enumerate() {
                if winner.is_none() {
                    pooled.map.values.data_mut()[i] = key.data()[i];
                }
            }
            Ok(pooled.map.values)
        }
    }
}

/// Up to `count` of the indices `0..n`, spread evenly.
pub fn uniform_subset(n: usize, count: usize) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    (0..count).map(|i| i * n / count).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(k: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(Shape::new(k, h, w), data).unwrap()
    }

    fn random_scores(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor {
        let n = shape.checked_len().unwrap();
        Tensor::from_vec(shape, (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&t(4, 1, 1, vec![2.0; 4]));
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax(&t(2, 1, 1, vec![0.0, 3f64.ln()]));
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
        let p = softmax(&t(2, 1, 1, vec![1000.0, 1000.0]));
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn probs_fusion_examples() {
        let a = ViewPrediction::keyframe(t(2, 1, 1, vec![0.8, 0.2]));
        let b = ViewPrediction::new(t(2, 1, 1, vec![0.6, 0.4]), Mask::new(1, 1, true), 1);
        let f = bayesian_fuse_probs(&[a.clone(), b]).unwrap();
        assert!((f.data()[0] - 6.0 / 7.0).abs() < 1e-12);
        assert!((f.data()[1] - 1.0 / 7.0).abs() < 1e-12);

        let single = bayesian_fuse_probs(std::slice::from_ref(&a)).unwrap();
        assert!((single.data()[0] - 0.8).abs() < 1e-12);

        let u = ViewPrediction::keyframe(t(2, 1, 1, vec![0.5, 0.5]));
        let f = bayesian_fuse_probs(&[u.clone(), u]).unwrap();
        assert!((f.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_views_are_skipped_and_keyframe_is_fallback() {
        let mut key_mask = Mask::new(1, 2, true);
        key_mask.set(0, 1, false);
        let key = ViewPrediction::new(t(2, 1, 2, vec![1.0, 2.0, 0.0, 0.0]), key_mask, 0);
        let mut nb_mask = Mask::new(1, 2, false);
        nb_mask.set(0, 0, true);
        let nb = ViewPrediction::new(t(2, 1, 2, vec![5.0, 7.0, 1.0, 1.0]), nb_mask, 1);
        let s = sum_scores(&[key, nb]).unwrap();
        // Pixel 0: both valid. Pixel 1: none valid, keyframe fallback.
        assert_eq!(s.data(), &[6.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn scores_fusion_matches_probability_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape::new(5, 4, 4);
        let views: Vec<_> = (0..3)
            .map(|i| {
                let mut mask = Mask::new(4, 4, true);
                if i > 0 {
                    mask.set(i, i, false);
                }
                ViewPrediction::new(random_scores(&mut rng, shape, 3.0), mask, i)
            })
            .collect();
        let fused = bayesian_fuse_scores(&views).unwrap();
        let prob_views: Vec<_> = views
            .iter()
            .map(|v| ViewPrediction::new(softmax(&v.values), v.validity.clone(), v.view_id))
            .collect();
        let fused_p = bayesian_fuse_probs(&prob_views).unwrap();
        // Brute force: product of per-view softmaxes, renormalized.
        let plane = 16;
        for p in 0..plane {
            let mut prod = [1.0f64; 5];
            for v in &prob_views {
                if v.validity.data()[p] {
                    for (c, x) in prod.iter_mut().enumerate() {
                        *x *= v.values.data()[c * plane + p];
                    }
                }
            }
            let z: f64 = prod.iter().sum();
            for c in 0..5 {
                assert!((fused.data()[c * plane + p] - prod[c] / z).abs() < 1e-9);
                assert!((fused_p.data()[c * plane + p] - prod[c] / z).abs() < 1e-9);
            }
        }
        let single = bayesian_fuse_scores(&views[..1]).unwrap();
        assert_eq!(single, softmax(&views[0].values));
    }

    #[test]
    fn recursive_examples() {
        let lik = t(3, 1, 1, vec![0.2, 0.5, 0.3]);
        let uniform = t(3, 1, 1, vec![1.0 / 3.0; 3]);
        let post = recursive_fuse(&uniform, &lik);
        for (a, b) in post.data().iter().zip(lik.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let certain = t(2, 1, 1, vec![1.0, 0.0]);
        let post = recursive_fuse(&certain, &t(2, 1, 1, vec![0.01, 0.99]));
        assert_eq!(post.data(), &[1.0, 0.0]);
        // Total veto still yields a distribution.
        let post = recursive_fuse(&certain, &t(2, 1, 1, vec![0.0, 1.0]));
        assert!((post.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recursive_fold_equals_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = Shape::new(4, 3, 3);
        let probs: Vec<_> = (0..3).map(|_| softmax(&random_scores(&mut rng, shape, 2.0))).collect();
        let batch = bayesian_fuse_probs(
            &probs.iter().cloned().enumerate().map(|(i, p)| {
                ViewPrediction::new(p, Mask::new(3, 3, true), i)
            }).collect::<Vec<_>>(),
        )
        .unwrap();
        let folded = probs[1..].iter().fold(probs[0].clone(), |acc, p| recursive_fuse(&acc, p));
        for (a, b) in folded.data().iter().zip(batch.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_examples() {
        let a = SampledMap::all_valid(t(1, 1, 1, vec![1.0]));
        let b = SampledMap::all_valid(t(1, 1, 1, vec![3.0]));
        let pooled = multiview_maxpool(&[a.clone(), b]).unwrap();
        assert_eq!(pooled.map.values.data(), &[3.0]);
        assert_eq!(pooled.argmax, vec![Some(1)]);

        let single = multiview_maxpool(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.map, a);

        let tie = multiview_maxpool(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(tie.argmax, vec![Some(0)]);

        let mut dead = a.clone();
        dead.validity.set(0, 0, false);
        let none = multiview_maxpool(&[dead.clone(), dead]).unwrap();
        assert_eq!(none.argmax, vec![None]);
        assert!(!none.map.validity.get(0, 0));
    }

    #[test]
    fn maxpool_backward_routes_to_winner() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = Shape::new(3, 4, 4);
        let views: Vec<_> = (0..3)
            .map(|_| SampledMap::all_valid(random_scores(&mut rng, shape, 1.0)))
            .collect();
        let w = random_scores(&mut rng, shape, 1.0);
        let pooled = multiview_maxpool(&views).unwrap();
        let grads = multiview_maxpool_backward(&w, &pooled, 3);
        let eps = 1e-6;
        for v in 0..3 {
            for i in 0..shape.checked_len().unwrap() {
                let f = |delta: f64| {
                    let mut vs = views.clone();
                    vs[v].values.data_mut()[i] += delta;
                    multiview_maxpool(&vs).unwrap().map.values.dot(&w)
                };
                let num = (f(eps) - f(-eps)) / (2.0 * eps);
                let a = grads[v].data()[i];
                assert!((a - num).abs() <= 1e-5 * a.abs().max(num.abs()).max(1e-4));
            }
        }
    }

    proptest! {
        #[test]
        fn fusion_is_permutation_invariant(seed in any::<u64>(), n in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = Shape::new(3, 2, 3);
            let views: Vec<_> = (0..n)
                .map(|i| ViewPrediction::new(random_scores(&mut rng, shape, 4.0), Mask::new(2, 3, true), i))
                .collect();
            let mut rev = views.clone();
            rev.reverse();
            let a = bayesian_fuse_scores(&views).unwrap();
            let b = bayesian_fuse_scores(&rev).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let pv: Vec<_> = views.iter().map(|v| ViewPrediction::new(softmax(&v.values), v.validity.clone(), v.view_id)).collect();
            let mut prev = pv.clone();
            prev.reverse();
            let a = bayesian_fuse_probs(&pv).unwrap();
            let b = bayesian_fuse_probs(&prev).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let maps: Vec<_> = views.iter().map(|v| SampledMap::all_valid(v.values.clone())).collect();
            let mut rmaps = maps.clone();
            rmaps.reverse();
            prop_assert_eq!(
                multiview_maxpool(&maps).unwrap().map.values,
                multiview_maxpool(&rmaps).unwrap().map.values
            );
        }

        #[test]
        fn outputs_are_distributions(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = Shape::new(4, 3, 3);
            let views: Vec<_> = (0..n)
                .map(|i| ViewPrediction::new(random_scores(&mut rng, shape, 10.0), Mask::new(3, 3, i % 2 == 0), i))
                .collect();
            for fused in [bayesian_fuse_scores(&views).unwrap(), softmax(&views[0].values)] {
                for p in 0..9 {
                    let s: f64 = (0..4).map(|c| fused.data()[c * 9 + p]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn repeated_evidence_sharpens(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = softmax(&random_scores(&mut rng, Shape::new(4, 1, 1), 2.0));
            let best = (0..4).max_by(|&a, &b| p.data()[a].total_cmp(&p.data()[b])).unwrap();
            let mut last = 0.0;
            for n in 1..8 {
                let views: Vec<_> = (0..n).map(|i| ViewPrediction::new(p.clone(), Mask::new(1, 1, true), i)).collect();
                let f = bayesian_fuse_probs(&views).unwrap();
                let arg = (0..4).max_by(|&a, &b| f.data()[a].total_cmp(&f.data()[b])).unwrap();
                prop_assert_eq!(arg, best);
                prop_assert!(f.data()[best] >= last - 1e-15);
                last = f.data()[best];
            }
        }

        #[test]
        fn softmax_shift_invariance(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_scores(&mut rng, Shape::new(5, 2, 2), 5.0);
            let shifted = Tensor::from_vec(s.shape(), s.data().iter().map(|v| v + shift).collect()).unwrap();
            let (a, b) = (softmax(&s), softmax(&shifted));
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Mask, Tensor, IGNORE};

/// Mean softmax cross-entropy over labeled pixels, and its gradient w.r.t.
/// the scores.
pub fn cross_entropy_loss(scores: &Tensor, gt: &LabelMap) -> Result<(f64, Tensor)> {
    cross_entropy_masked(scores, gt, None)
}

/// As [`cross_entropy_loss`], counting only pixels that are labeled and
/// valid in `mask`. Other pixels get zero gradient.
pub fn cross_entropy_masked(scores: &Tensor, gt: &LabelMap, mask: Option<&Mask>) -> Result<(f64, Tensor)> {
    let (k, h, w) = (scores.channels(), scores.height(), scores.width());
    if (gt.height(), gt.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "scores {} vs labels {}x{}",
            scores.shape(),
            gt.height(),
            gt.width()
        )));
    }
    if let Some(m) = mask {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Shape("mask size differs from scores".into()));
        }
    }
    gt.validate(k)?;
    let plane = h * w;
    let counted = |p: usize| gt.data()[p] != IGNORE && mask.is_none_or(|m| m.data()[p]);
    let n = (0..plane).filter(|&p| counted(p)).count();
    if n == 0 {
        return Err(Error::DegenerateSample("no labeled pixels to score".into()));
    }
    let inv_n = 1.0 / n as f64;
    let s = scores.data();
    let mut grad = Tensor::zeros(scores.shape());
    let mut total = 0.0;
    let mut probs = vec![0.0; k];
    for p in (0..plane).filter(|&p| counted(p)) {
        let label = gt.data()[p] as usize;
        let max = (0..k).map(|c| s[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (c, pr) in probs.iter_mut().enumerate() {
            *pr = (s[c * plane + p] - max).exp();
            sum += *pr;
        }
        total += sum.ln() + max - s[label * plane + p];
        let g = grad.data_mut();
        for (c, pr) in probs.iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            g[c * plane + p] = (pr / sum - onehot) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// Downsamples labels by `factor` (a power of two): each output cell draws a
/// label from its block with probability proportional to the label's
/// frequency there. IGNORE pixels do not count; an all-IGNORE block gives IGNORE.
pub fn stochastic_pool_labels<R: Rng + ?Sized>(gt: &LabelMap, factor: usize, rng: &mut R) -> Result<LabelMap> {
    if !factor.is_power_of_two() {
        return Err(Error::Config(format!("pooling factor {factor} is not a power of two")));
    }
    let (h, w) = (gt.height(), gt.width());
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("{h}x{w} labels not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = LabelMap::new(oh, ow, IGNORE);
    let mut block = Vec::with_capacity(factor * factor);
    for i in 0..oh {
        for j in 0..ow {
            block.clear();
            for y in i * factor..(i + 1) * factor {
                for x in j * factor..(j + 1) * factor {
                    let l = gt.get(y, x);
                    if l != IGNORE {
                        block.push(l);
                    }
                }
            }
            if !block.is_empty() {
                out.set(i, j, block[rng.random_range(0..block.len())]);
            }
        }
    }
    Ok(out)
}

/// Ground truth at every level: level 0 is `gt`, level `l` is pooled by `2^l`
/// from the full-resolution annotation.
pub fn label_pyramid<R: Rng + ?Sized>(gt: &LabelMap, levels: usize, rng: &mut R) -> Result<Vec<LabelMap>> {
    let mut out = vec![gt.clone()];
    for l in 1..levels {
        out.push(stochastic_pool_labels(gt, 1 << l, rng)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_example() {
        let s = Tensor::from_vec(Shape::new(3, 1, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let gt = LabelMap::from_vec(1, 1, vec![2]).unwrap();
        let (loss, grad) = cross_entropy_loss(&s, &gt).unwrap();
        let e = std::f64::consts::E;
        let expected = (e + e * e + e * e * e).ln() - 3.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.4076).abs() < 1e-4);
        assert!(grad.data().iter().sum::<f64>().abs() < 1e-12);
        assert!(grad.data()[2] < 0.0);
    }

    #[test]
    fn uniform_and_confident_scores() {
        let s = Tensor::zeros(Shape::new(5, 2, 2));
        let gt = LabelMap::from_vec(2, 2, vec![0, 4, IGNORE, 2]).unwrap();
        let (loss, grad) = cross_entropy_loss(&s, &gt).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        // IGNORE pixel: no gradient.
        assert!((0..5).all(|c| grad.get(c, 1, 0) == 0.0));

        let mut s = Tensor::zeros(Shape::new(2, 1, 1));
        s.set(1, 0, 0, 60.0);
        let (loss, _) = cross_entropy_loss(&s, &LabelMap::from_vec(1, 1, vec![1]).unwrap()).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn degenerate_and_masked() {
        let s = Tensor::zeros(Shape::new(2, 1, 2));
        let gt = LabelMap::new(1, 2, IGNORE);
        assert!(matches!(cross_entropy_loss(&s, &gt), Err(Error::DegenerateSample(_))));
        let gt = LabelMap::from_vec(1, 2, vec![0, 1]).unwrap();
        let mask = Mask::from_vec(1, 2, vec![false, false]).unwrap();
        assert!(matches!(cross_entropy_masked(&s, &gt, Some(&mask)), Err(Error::DegenerateSample(_))));
        let mask = Mask::from_vec(1, 2, vec![false, true]).unwrap();
        let (loss, grad) = cross_entropy_masked(&s, &gt, Some(&mask)).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(grad.get(0, 0, 0), 0.0);
        assert!((grad.get(1, 0, 1) + 0.5).abs() < 1e-12);
        assert!(cross_entropy_loss(&s, &LabelMap::from_vec(1, 2, vec![0, 2]).unwrap()).is_err());
    }

    #[test]
    fn stochastic_pooling_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = LabelMap::from_vec(2, 4, vec![1, 1, IGNORE, IGNORE, 1, 1, IGNORE, IGNORE]).unwrap();
        for _ in 0..20 {
            let p = stochastic_pool_labels(&gt, 2, &mut rng).unwrap();
            assert_eq!(p.data(), &[1, IGNORE]);
        }
        assert!(stochastic_pool_labels(&gt, 3, &mut rng).is_err());
        assert!(stochastic_pool_labels(&gt, 4, &mut rng).is_err());
        let pyr = label_pyramid(&gt, 2, &mut rng).unwrap();
        assert_eq!(pyr.len(), 2);
        assert_eq!(pyr[0], gt);
    }
}

//! Simulated per-frame network predictions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviation of Gaussian noise added to every score.
    pub sigma: f64,
    /// Probability that a pixel's score margin goes to a wrong class.
    pub misclassification_rate: f64,
    /// Pixels within this many pixels of a label boundary take the label
    /// of a random pixel in their neighborhood.
    pub boundary_radius: usize,
    /// Score added to the predicted class.
    pub margin: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            misclassification_rate: 0.25,
            boundary_radius: 0,
            margin: 3.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            sigma: 0.0,
            misclassification_rate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.misclassification_rate) {
            return Err(Error::Config("misclassification rate not in [0, 1]".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be finite and >= 0".into()));
        }
        if !self.margin.is_finite() {
            return Err(Error::Config("margin must be finite".into()));
        }
        Ok(())
    }

    /// Generator for view `view`: independent streams per view and seed.
    pub fn view_rng(&self, view: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(view);
        rng
    }
}

fn near_boundary(gt: &LabelMap, y: usize, x: usize, r: usize) -> bool {
    let l = gt.get(y, x);
    let (y0, y1) = (y.saturating_sub(r), (y + r).min(gt.height() - 1));
    let (x0, x1) = (x.saturating_sub(r), (x + r).min(gt.width() - 1));
    (y0..=y1).any(|yy| (x0..=x1).any(|xx| gt.get(yy, xx) != l))
}

/// Scores with `margin` on the predicted class plus Gaussian noise. The
/// predicted class is the ground truth, except near boundaries (a random
/// nearby label) and with probability `misclassification_rate` (a uniformly
/// random wrong class). IGNORE pixels predict a random class.
pub fn simulate_predictions<R: Rng + ?Sized>(
    gt: &LabelMap,
    num_classes: usize,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<Tensor> {
    noise.validate()?;
    gt.validate(num_classes)?;
    if num_classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    let (h, w) = (gt.height(), gt.width());
    let plane = h * w;
    let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let r = noise.boundary_radius;
    let mut out = Tensor::zeros(Shape::new(num_classes, h, w));
    for y in 0..h {
        for x in 0..w {
            let truth = gt.get(y, x);
            let mut class = if truth == IGNORE {
                rng.random_range(0..num_classes)
            } else {
                truth as usize
            };
            if truth != IGNORE && r > 0 && near_boundary(gt, y, x, r) {
                let yy = rng.random_range(y.saturating_sub(r)..=(y + r).min(h - 1));
                let xx = rng.random_range(x.saturating_sub(r)..=(x + r).min(w - 1));
                let l = gt.get(yy, xx);
                if l != IGNORE {
                    class = l as usize;
                }
            }
            if rng.random_bool(noise.misclassification_rate) {
                let wrong = rng.random_range(0..num_classes - 1);
                class = if wrong >= class { wrong + 1 } else { wrong };
            }
            let data = out.data_mut();
            for c in 0..num_classes {
                let mut s = if noise.sigma > 0.0 { normal.sample(rng) } else { 0.0 };
                if c == class {
                    s += noise.margin;
                }
                data[c * plane + y * w + x] = s;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{argmax_labels, ConfusionMatrix};

    fn stripes(h: usize, w: usize) -> LabelMap {
        LabelMap::from_vec(h, w, (0..h * w).map(|i| ((i % w) / 8 % 4) as u8).collect()).unwrap()
    }

    #[test]
    fn noiseless_is_exact() {
        let gt = stripes(10, 32);
        let s = simulate_predictions(&gt, 4, &NoiseModel::noiseless(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(argmax_labels(&s), gt);
    }

    #[test]
    fn misclassification_rate_sets_accuracy() {
        let gt = stripes(100, 100);
        let noise = NoiseModel {
            sigma: 0.0,
            misclassification_rate: 0.3,
            ..NoiseModel::default()
        };
        let s = simulate_predictions(&gt, 4, &noise, &mut noise.view_rng(0)).unwrap();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&argmax_labels(&s), &gt).unwrap();
        let acc = cm.pixelwise_accuracy().unwrap();
        let sd = (0.3 * 0.7 / 1e4f64).sqrt();
        assert!((acc - 0.7).abs() < 3.0 * sd, "accuracy {acc}");
    }

    #[test]
    fn views_are_independent_and_reproducible() {
        let gt = stripes(100, 100);
        let noise = NoiseModel::default();
        let a = simulate_predictions(&gt, 4, &noise, &mut noise.view_rng(1)).unwrap();
        let again = simulate_predictions(&gt, 4, &noise, &mut noise.view_rng(1)).unwrap();
        assert_eq!(a, again);
        let b = simulate_predictions(&gt, 4, &noise, &mut noise.view_rng(2)).unwrap();
        let err = |s: &Tensor| -> Vec<f64> {
            let p = argmax_labels(s);
            p.data().iter().zip(gt.data()).map(|(x, y)| f64::from(u8::from(x != y))).collect()
        };
        let (ea, eb) = (err(&a), err(&b));
        let n = ea.len() as f64;
        let (ma, mb) = (ea.iter().sum::<f64>() / n, eb.iter().sum::<f64>() / n);
        let cov = ea.iter().zip(&eb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        let corr = cov / (ma * (1.0 - ma) * mb * (1.0 - mb)).sqrt();
        assert!(corr.abs() < 0.05, "correlation {corr}");
    }

    #[test]
    fn boundary_noise_stays_local() {
        let gt = stripes(16, 32);
        let noise = NoiseModel {
            sigma: 0.0,
            misclassification_rate: 0.0,
            boundary_radius: 1,
            ..NoiseModel::default()
        };
        let p = argmax_labels(&simulate_predictions(&gt, 4, &noise, &mut noise.view_rng(0)).unwrap());
        for y in 0..16 {
            for x in 0..32 {
                if p.get(y, x) != gt.get(y, x) {
                    assert!(near_boundary(&gt, y, x, 1));
                }
            }
        }
    }
}

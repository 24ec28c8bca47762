//! Two-branch encoder-decoder.
//!
//! Encoder level `l`: an RGB conv and a depth conv (3x3, ReLU), the depth
//! features are added into the RGB features, and both streams are 2x2
//! max-pooled. The fused stream remembers its switches. Decoder level `l`
//! (coarse to fine): unpool at the level's switches, transposed conv + ReLU,
//! and a 1x1 classifier producing the scores at scale `H / 2^l`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, maxpool2, maxpool2_backward, relu,
    relu_backward, unpool2, unpool2_backward, ConvParams, Switches,
};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyNetConfig {
    pub num_classes: usize,
    /// Feature width per encoder level; the length is the number of scales.
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            widths: vec![8, 16],
            kernel: 3,
        }
    }
}

impl ToyNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes {} not in 2..=255", self.num_classes)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("widths must be non-empty and positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Output width of the decoder conv at level `l`.
    fn decoder_width(&self, l: usize) -> usize {
        self.widths[l.saturating_sub(1)]
    }
}

/// Parameters in a fixed order: RGB encoder convs, depth encoder convs,
/// decoder transposed convs, classifiers, each indexed by level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetParams {
    pub config: ToyNetConfig,
    pub layers: Vec<ConvParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    RgbEncoder,
    DepthEncoder,
    Decoder,
    Classifier,
}

impl LayerKind {
    const ALL: [LayerKind; 4] = [Self::RgbEncoder, Self::DepthEncoder, Self::Decoder, Self::Classifier];

    fn prefix(self) -> &'static str {
        match self {
            Self::RgbEncoder => "enc_rgb",
            Self::DepthEncoder => "enc_depth",
            Self::Decoder => "dec",
            Self::Classifier => "cls",
        }
    }
}

impl ToyNetParams {
    pub fn zeros(config: ToyNetConfig) -> Result<Self> {
        config.validate()?;
        let (n, k) = (config.levels(), config.kernel);
        let mut layers = Vec::with_capacity(4 * n);
        for l in 0..n {
            let cin = if l == 0 { 3 } else { config.widths[l - 1] };
            layers.push(ConvParams::zeros(cin, config.widths[l], k));
        }
        for l in 0..n {
            let cin = if l == 0 { 1 } else { config.widths[l - 1] };
            layers.push(ConvParams::zeros(cin, config.widths[l], k));
        }
        for l in 0..n {
            layers.push(ConvParams::zeros(config.widths[l], config.decoder_width(l), k));
        }
        for l in 0..n {
            layers.push(ConvParams::zeros(config.decoder_width(l), config.num_classes, 1));
        }
        Ok(Self { config, layers })
    }

    /// He-normal weights, zero biases.
    pub fn init(config: ToyNetConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut p.layers {
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            layer.weight.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self.layers.iter().map(ConvParams::zeros_like).collect(),
        }
    }

    pub fn layer(&self, kind: LayerKind, level: usize) -> &ConvParams {
        &self.layers[self.slot(kind, level)]
    }

    pub fn layer_mut(&mut self, kind: LayerKind, level: usize) -> &mut ConvParams {
        let i = self.slot(kind, level);
        &mut self.layers[i]
    }

    fn slot(&self, kind: LayerKind, level: usize) -> usize {
        let n = self.config.levels();
        assert!(level < n);
        LayerKind::ALL.iter().position(|k| *k == kind).unwrap() * n + level
    }

    /// Layer names in storage order, e.g. `enc_rgb.0`, `cls.1`.
    pub fn layer_names(&self) -> Vec<String> {
        let n = self.config.levels();
        LayerKind::ALL
            .iter()
            .flat_map(|k| (0..n).map(move |l| format!("{}.{l}", k.prefix())))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvParams::num_params).sum()
    }

    /// Flattened `(weights, bias)` of every layer, in storage order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params());
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&values[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[off..off + nb]);
            off += nb;
        }
    }

    pub fn add_assign(&mut self, other: &ToyNetParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.layers.iter_mut().for_each(|l| l.scale(factor));
    }

    /// First non-finite value as `(layer name, flat index, value)`.
    pub fn find_non_finite(&self) -> Option<(String, usize, f64)> {
        let names = self.layer_names();
        for (layer, name) in self.layers.iter().zip(names) {
            for (i, v) in layer.weight.iter().chain(&layer.bias).enumerate() {
                if !v.is_finite() {
                    return Some((name, i, *v));
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone)]
struct EncoderCache {
    rgb_in: Tensor,
    depth_in: Tensor,
    rgb_pre: Tensor,
    depth_pre: Tensor,
    depth_act: Tensor,
    fused: Tensor,
    switches: Switches,
    depth_switches: Option<Switches>,
}

#[derive(Debug, Clone)]
struct DecoderCache {
    unpooled: Tensor,
    pre: Tensor,
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Class scores per level; `scores[l]` has size `(H / 2^l, W / 2^l)`.
    pub scores: Vec<Tensor>,
    /// Decoder features (post-ReLU) per level, the classifier inputs.
    pub features: Vec<Tensor>,
    encoder: Vec<EncoderCache>,
    decoder: Vec<DecoderCache>,
}

impl ForwardPass {
    pub fn levels(&self) -> usize {
        self.scores.len()
    }

    /// Scores ordered coarse to fine.
    pub fn scores_coarse_to_fine(&self) -> Vec<&Tensor> {
        self.scores.iter().rev().collect()
    }

    /// Smallest distance of any ReLU input or max-pool runner-up from a
    /// kink: the scale of parameter perturbation that keeps the pass smooth.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        let mut relu_margin = |t: &Tensor| {
            for v in t.data() {
                m = m.min(v.abs());
            }
        };
        for e in &self.encoder {
            relu_margin(&e.rgb_pre);
            relu_margin(&e.depth_pre);
        }
        for d in &self.decoder {
            relu_margin(&d.pre);
        }
        for e in &self.encoder {
            m = m.min(pool_margin(&e.fused));
            m = m.min(pool_margin(&e.depth_act));
        }
        m
    }
}

/// Gap between the winner and the runner-up of every 2x2 block with a
/// positive winner (blocks of ReLU zeros tie harmlessly).
fn pool_margin(x: &Tensor) -> f64 {
    let mut m = f64::INFINITY;
    let (h, w) = (x.height(), x.width());
    for c in 0..x.channels() {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let mut v = [
                    x.get(c, 2 * i, 2 * j),
                    x.get(c, 2 * i, 2 * j + 1),
                    x.get(c, 2 * i + 1, 2 * j),
                    x.get(c, 2 * i + 1, 2 * j + 1),
                ];
                v.sort_by(|a, b| b.total_cmp(a));
                if v[0] > 0.0 {
                    m = m.min(v[0] - v[1]);
                }
            }
        }
    }
    m
}

fn check_inputs(params: &ToyNetParams, rgb: &Tensor, depth: &Tensor) -> Result<()> {
    let div = 1usize << params.config.levels();
    if rgb.channels() != 3 || depth.channels() != 1 {
        return Err(Error::Config(format!(
            "expected 3-channel rgb and 1-channel depth, got {} and {}",
            rgb.channels(),
            depth.channels()
        )));
    }
    if rgb.height() != depth.height() || rgb.width() != depth.width() {
        return Err(Error::Config(format!("rgb {} and depth {} sizes differ", rgb.shape(), depth.shape())));
    }
    if !rgb.height().is_multiple_of(div) || !rgb.width().is_multiple_of(div) {
        return Err(Error::Config(format!("input {} not divisible by {div}", rgb.shape())));
    }
    Ok(())
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

/// 1x1 classifier applied to decoder features at `level`.
pub fn classify(params: &ToyNetParams, level: usize, features: &Tensor) -> Tensor {
    conv2d(features, params.layer(LayerKind::Classifier, level))
}

/// Gradient of [`classify`] w.r.t. the features; the classifier parameter
/// gradient is added into `grads`.
pub fn classify_backward(
    params: &ToyNetParams,
    level: usize,
    features: &Tensor,
    grad_scores: &Tensor,
    grads: &mut ToyNetParams,
) -> Tensor {
    let (gx, gp) = conv2d_backward(features, params.layer(LayerKind::Classifier, level), grad_scores, true);
    grads.layer_mut(LayerKind::Classifier, level).add_assign(&gp);
    gx.unwrap()
}

pub fn toynet_forward(params: &ToyNetParams, rgb: &Tensor, depth: &Tensor) -> Result<ForwardPass> {
    check_inputs(params, rgb, depth)?;
    let n = params.config.levels();
    let mut encoder: Vec<EncoderCache> = Vec::with_capacity(n);
    let (mut rgb_in, mut depth_in) = (rgb.clone(), depth.clone());
    let mut pooled = None;
    for l in 0..n {
        let rgb_pre = conv2d(&rgb_in, params.layer(LayerKind::RgbEncoder, l));
        let depth_pre = conv2d(&depth_in, params.layer(LayerKind::DepthEncoder, l));
        let depth_act = relu(&depth_pre);
        let fused = add(&relu(&rgb_pre), &depth_act);
        let (p, switches) = maxpool2(&fused);
        let (next_depth, depth_switches) = if l + 1 < n {
            let (q, s) = maxpool2(&depth_act);
            (Some(q), Some(s))
        } else {
            (None, None)
        };
        encoder.push(EncoderCache {
            rgb_in: std::mem::replace(&mut rgb_in, p.clone()),
            depth_in: match next_depth {
                Some(q) => std::mem::replace(&mut depth_in, q),
                None => depth_in.clone(),
            },
            rgb_pre,
            depth_pre,
            depth_act,
            fused,
            switches,
            depth_switches,
        });
        pooled = Some(p);
    }
    let mut x = pooled.unwrap();
    let mut decoder: Vec<Option<DecoderCache>> = vec![None; n];
    let mut features: Vec<Option<Tensor>> = vec![None; n];
    let mut scores: Vec<Option<Tensor>> = vec![None; n];
    for l in (0..n).rev() {
        let unpooled = unpool2(&x, &encoder[l].switches, encoder[l].fused.shape());
        let pre = conv_transpose2d(&unpooled, params.layer(LayerKind::Decoder, l));
        let g = relu(&pre);
        scores[l] = Some(classify(params, l, &g));
        features[l] = Some(g.clone());
        decoder[l] = Some(DecoderCache { unpooled, pre });
        x = g;
    }
    Ok(ForwardPass {
        scores: scores.into_iter().map(Option::unwrap).collect(),
        features: features.into_iter().map(Option::unwrap).collect(),
        encoder,
        decoder: decoder.into_iter().map(Option::unwrap).collect(),
    })
}

/// Backpropagates gradients w.r.t. the scores and/or the decoder features at
/// each level (`None` = zero) to the parameters.
pub fn toynet_backward(
    params: &ToyNetParams,
    pass: &ForwardPass,
    grad_scores: &[Option<Tensor>],
    grad_features: &[Option<Tensor>],
) -> ToyNetParams {
    let n = params.config.levels();
    assert_eq!(grad_scores.len(), n);
    assert_eq!(grad_features.len(), n);
    let mut grads = params.zeros_like();
    // Decoder, fine to coarse. `carry` is the gradient w.r.t. the current
    // level's features coming from the finer level's unpooling.
    let mut carry: Option<Tensor> = None;
    for l in 0..n {
        let feat = &pass.features[l];
        let mut g = carry.take().unwrap_or_else(|| Tensor::zeros(feat.shape()));
        if let Some(gf) = &grad_features[l] {
            g.add_assign(gf);
        }
        if let Some(gs) = &grad_scores[l] {
            let gx = classify_backward(params, l, feat, gs, &mut grads);
            g.add_assign(&gx);
        }
        let dec = &pass.decoder[l];
        let g_pre = relu_backward(&dec.pre, &g);
        let (g_unpooled, gp) =
            conv_transpose2d_backward(&dec.unpooled, params.layer(LayerKind::Decoder, l), &g_pre, true);
        grads.layer_mut(LayerKind::Decoder, l).add_assign(&gp);
        let enc = &pass.encoder[l];
        let pooled_shape = Shape::new(enc.fused.channels(), enc.fused.height() / 2, enc.fused.width() / 2);
        carry = Some(unpool2_backward(&enc.switches, &g_unpooled.unwrap(), pooled_shape));
    }
    // Encoder, coarse to fine. `carry` is now the gradient w.r.t. the
    // pooled fused stream of the coarsest level.
    let mut g_pooled = carry.unwrap();
    let mut g_depth_pooled: Option<Tensor> = None;
    for l in (0..n).rev() {
        let enc = &pass.encoder[l];
        let g_fused = maxpool2_backward(enc.fused.shape(), &enc.switches, &g_pooled);
        let mut g_depth_act = g_fused.clone();
        if let (Some(gq), Some(s)) = (&g_depth_pooled, &enc.depth_switches) {
            g_depth_act.add_assign(&maxpool2_backward(enc.depth_act.shape(), s, gq));
        }
        let g_rgb_pre = relu_backward(&enc.rgb_pre, &g_fused);
        let g_depth_pre = relu_backward(&enc.depth_pre, &g_depth_act);
        let need = l > 0;
        let (g_rgb_in, gp) = conv2d_backward(&enc.rgb_in, params.layer(LayerKind::RgbEncoder, l), &g_rgb_pre, need);
        grads.layer_mut(LayerKind::RgbEncoder, l).add_assign(&gp);
        let (g_depth_in, gp) =
            conv2d_backward(&enc.depth_in, params.layer(LayerKind::DepthEncoder, l), &g_depth_pre, need);
        grads.layer_mut(LayerKind::DepthEncoder, l).add_assign(&gp);
        if need {
            g_pooled = g_rgb_in.unwrap();
            g_depth_pooled = g_depth_in;
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn inputs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Tensor, Tensor) {
        let rgb = Tensor::from_vec(Shape::new(3, h, w), (0..3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect());
        let depth = Tensor::from_vec(Shape::new(1, h, w), (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect());
        (rgb.unwrap(), depth.unwrap())
    }

    #[test]
    fn zero_params_give_zero_scores() {
        let p = ToyNetParams::zeros(ToyNetConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (rgb, depth) = inputs(&mut rng, 8, 12);
        let pass = toynet_forward(&p, &rgb, &depth).unwrap();
        for (l, s) in pass.scores.iter().enumerate() {
            assert_eq!(s.shape(), Shape::new(4, 8 >> l, 12 >> l));
            assert!(s.data().iter().all(|v| *v == 0.0));
        }
        assert_eq!(pass.scores_coarse_to_fine()[0].height(), 4);
    }

    #[test]
    fn layer_layout() {
        let p = ToyNetParams::zeros(ToyNetConfig::default()).unwrap();
        assert_eq!(
            p.layer_names(),
            ["enc_rgb.0", "enc_rgb.1", "enc_depth.0", "enc_depth.1", "dec.0", "dec.1", "cls.0", "cls.1"]
        );
        let d1 = p.layer(LayerKind::Decoder, 1);
        assert_eq!((d1.in_channels, d1.out_channels), (16, 8));
        let c0 = p.layer(LayerKind::Classifier, 0);
        assert_eq!((c0.in_channels, c0.out_channels, c0.kernel), (8, 4, 1));
        let mut q = p.clone();
        let flat: Vec<f64> = (0..p.num_params()).map(|i| i as f64).collect();
        q.set_flat(&flat);
        assert_eq!(q.to_flat(), flat);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = ToyNetParams::zeros(ToyNetConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (rgb, depth) = inputs(&mut rng, 6, 8);
        assert!(matches!(toynet_forward(&p, &rgb, &depth), Err(Error::Config(_))));
        let (rgb, _) = inputs(&mut rng, 8, 8);
        assert!(toynet_forward(&p, &rgb, &rgb).is_err());
    }

    #[test]
    fn jacobian_vector_product_matches_finite_differences() {
        let config = ToyNetConfig {
            num_classes: 2,
            ..ToyNetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (rgb, depth) = inputs(&mut rng, 16, 16);
        let mut params = ToyNetParams::init(config, 5).unwrap();
        for layer in &mut params.layers {
            layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        let pass = toynet_forward(&params, &rgb, &depth).unwrap();
        assert!(pass.kink_margin() > 1e-6, "instance too close to a kink");
        let weights: Vec<Tensor> = pass
            .scores
            .iter()
            .map(|s| {
                let n = s.data().len();
                Tensor::from_vec(s.shape(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let objective = |p: &ToyNetParams| -> f64 {
            let pass = toynet_forward(p, &rgb, &depth).unwrap();
            pass.scores.iter().zip(&weights).map(|(s, w)| s.dot(w)).sum()
        };
        let grads = toynet_backward(&params, &pass, &weights.iter().cloned().map(Some).collect::<Vec<_>>(), &[None, None]);
        let g = grads.to_flat();
        let x0 = params.to_flat();
        for _ in 0..3 {
            let dir: Vec<f64> = (0..x0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            let dir: Vec<f64> = dir.iter().map(|d| d / norm).collect();
            let h = 1e-6;
            let mut q = params.clone();
            q.set_flat(&x0.iter().zip(&dir).map(|(x, d)| x + h * d).collect::<Vec<_>>());
            let fp = objective(&q);
            q.set_flat(&x0.iter().zip(&dir).map(|(x, d)| x - h * d).collect::<Vec<_>>());
            let fm = objective(&q);
            let numeric = (fp - fm) / (2.0 * h);
            let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-5);
            assert!(rel < 1e-5, "jvp numeric {numeric} analytic {analytic}");
        }
    }
}

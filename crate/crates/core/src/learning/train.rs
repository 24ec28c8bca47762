use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::consistency::{consistency_loss, ConsistencyMode};
use super::curriculum::curriculum_sampler;
use super::loss::label_pyramid;
use super::net::{toynet_backward, toynet_forward, ToyNetConfig, ToyNetParams};
use super::optim::{sgd_step, SgdConfig, SgdState};
use crate::error::{Error, Result};
use crate::fusion::{sum_scores, uniform_subset, ViewPrediction};
use crate::geometry::{
    compute_warp_grid, downsample_grid, is_valid_depth, mask_occlusions, CameraIntrinsics, DepthMap, RigidTransform,
    WarpGrid, OCCLUSION_TOLERANCE,
};
use crate::metrics::{argmax_labels, ConfusionMatrix};
use crate::tensor::{LabelMap, Shape, Tensor};
use crate::warp::bilinear_sample;

/// Depth fed to the network: `(z - DEPTH_OFFSET) * DEPTH_SCALE`, 0 where missing.
pub const DEPTH_OFFSET: f64 = 2.5;
pub const DEPTH_SCALE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Frame {
    pub rgb: Tensor,
    pub depth: DepthMap,
}

#[derive(Debug, Clone)]
pub struct NeighborFrame {
    pub frame: Frame,
    /// Maps keyframe camera coordinates into this frame's camera.
    pub pose_from_keyframe: RigidTransform,
}

/// A labeled keyframe and its unlabeled neighbors, nearest first.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub intrinsics: CameraIntrinsics,
    pub keyframe: Frame,
    pub gt: LabelMap,
    pub neighbors: Vec<NeighborFrame>,
}

/// Network inputs of one frame.
#[derive(Debug, Clone)]
pub struct NetInput {
    pub rgb: Tensor,
    pub depth: Tensor,
}

impl NetInput {
    pub fn from_frame(frame: &Frame) -> Result<Self> {
        let (h, w) = (frame.depth.height(), frame.depth.width());
        if frame.rgb.shape() != Shape::new(3, h, w) {
            return Err(Error::Shape(format!("rgb {} does not match depth {h}x{w}", frame.rgb.shape())));
        }
        let mut rgb = frame.rgb.clone();
        rgb.data_mut().iter_mut().for_each(|v| *v -= 0.5);
        let depth = frame
            .depth
            .data()
            .iter()
            .map(|&z| if is_valid_depth(z) { (z - DEPTH_OFFSET) * DEPTH_SCALE } else { 0.0 })
            .collect();
        Ok(Self {
            rgb,
            depth: Tensor::from_vec(Shape::new(1, h, w), depth)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PreparedNeighbor {
    pub input: NetInput,
    /// Keyframe-to-neighbor grids, level `l` at `1 / 2^l` resolution.
    pub grids: Vec<WarpGrid>,
}

/// A sample with network inputs and warp grid pyramids computed once.
#[derive(Debug, Clone)]
pub struct PreparedSequence {
    pub keyframe: NetInput,
    pub gt: LabelMap,
    pub neighbors: Vec<PreparedNeighbor>,
}

/// Occlusion-masked keyframe-to-neighbor grid pyramid with `levels` entries.
pub fn neighbor_grids(
    keyframe_depth: &DepthMap,
    neighbor: &NeighborFrame,
    k: &CameraIntrinsics,
    levels: usize,
) -> Result<Vec<WarpGrid>> {
    let pose = &neighbor.pose_from_keyframe;
    let mut grid = compute_warp_grid(keyframe_depth, pose, k)?;
    mask_occlusions(&mut grid, keyframe_depth, &neighbor.frame.depth, pose, k, OCCLUSION_TOLERANCE)?;
    downsample_grid(&grid, levels.saturating_sub(1))
}

impl PreparedSequence {
    pub fn new(sample: &SequenceSample, levels: usize) -> Result<Self> {
        let neighbors = sample
            .neighbors
            .iter()
            .map(|n| {
                Ok(PreparedNeighbor {
                    input: NetInput::from_frame(&n.frame)?,
                    grids: neighbor_grids(&sample.keyframe.depth, n, &sample.intrinsics, levels)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            keyframe: NetInput::from_frame(&sample.keyframe)?,
            gt: sample.gt.clone(),
            neighbors,
        })
    }
}

/// Loss and parameter gradient for a keyframe with the chosen neighbors.
/// Frames run forward and backward in parallel; gradients are summed in
/// frame order.
pub fn sample_loss_and_grad(
    mode: ConsistencyMode,
    params: &ToyNetParams,
    seq: &PreparedSequence,
    chosen: &[usize],
    gt_pyramid: &[LabelMap],
) -> Result<(f64, ToyNetParams)> {
    let chosen: &[usize] = if mode == ConsistencyMode::Mono { &[] } else { chosen };
    let inputs: Vec<&NetInput> = std::iter::once(&seq.keyframe)
        .chain(chosen.iter().map(|&i| &seq.neighbors[i].input))
        .collect();
    let passes = inputs
        .par_iter()
        .map(|x| toynet_forward(params, &x.rgb, &x.depth))
        .collect::<Result<Vec<_>>>()?;
    let grids: Vec<Vec<WarpGrid>> = chosen.iter().map(|&i| seq.neighbors[i].grids.clone()).collect();
    let out = consistency_loss(mode, params, &passes, &grids, gt_pyramid)?;
    let frame_grads: Vec<ToyNetParams> = passes
        .par_iter()
        .zip(&out.frame_grads)
        .map(|(pass, g)| toynet_backward(params, pass, &g.scores, &g.features))
        .collect();
    let mut grads = out.param_grads;
    for g in &frame_grads {
        grads.add_assign(g);
    }
    Ok((out.loss, grads))
}

fn default_learning_rate() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_epochs() -> usize {
    10
}
fn default_curriculum_step() -> usize {
    5
}
fn default_curriculum_increment() -> usize {
    10
}
fn default_neighbors() -> usize {
    2
}
fn default_batch() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_mode")]
    pub mode: ConsistencyMode,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs between curriculum window growths.
    #[serde(default = "default_curriculum_step")]
    pub curriculum_step: usize,
    /// Neighbors added to the window at each growth (and its initial size).
    #[serde(default = "default_curriculum_increment")]
    pub curriculum_increment: usize,
    /// Neighbors drawn per keyframe per iteration.
    #[serde(default = "default_neighbors")]
    pub neighbors_per_sample: usize,
    /// Keyframe sequences per minibatch.
    #[serde(default = "default_batch")]
    pub sequences_per_batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub net: ToyNetConfig,
}

fn default_mode() -> ConsistencyMode {
    ConsistencyMode::Mono
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            epochs: default_epochs(),
            curriculum_step: default_curriculum_step(),
            curriculum_increment: default_curriculum_increment(),
            neighbors_per_sample: default_neighbors(),
            sequences_per_batch: default_batch(),
            seed: 0,
            net: ToyNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        self.net.validate()?;
        if self.sequences_per_batch == 0 {
            return Err(Error::Config("sequences_per_batch must be positive".into()));
        }
        if self.curriculum_step == 0 || self.curriculum_increment == 0 {
            return Err(Error::Config("curriculum step and increment must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

impl IterationLog {
    /// `iter loss lr`, with the loss printed exactly (round-trippable).
    pub fn line(&self) -> String {
        format!("{} {:e} {:e}", self.iteration, self.loss, self.learning_rate)
    }
}

/// Trains from a seeded initialization. `on_iteration` sees every step.
pub fn train(
    config: &TrainConfig,
    data: &[PreparedSequence],
    mut on_iteration: impl FnMut(&IterationLog),
) -> Result<ToyNetParams> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::DegenerateSample("no training sequences".into()));
    }
    let levels = config.net.levels();
    let mut params = ToyNetParams::init(config.net.clone(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut state = SgdState::default();
    let sgd = config.sgd();
    let mut iteration = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.sequences_per_batch) {
            let mut grads = params.zeros_like();
            let mut loss = 0.0;
            for &s in batch {
                let seq = &data[s];
                let chosen = if config.mode == ConsistencyMode::Mono || seq.neighbors.is_empty() {
                    Vec::new()
                } else {
                    curriculum_sampler(
                        seq.neighbors.len(),
                        epoch,
                        config.curriculum_step,
                        config.curriculum_increment,
                        config.neighbors_per_sample,
                        &mut rng,
                    )?
                };
                let gt = label_pyramid(&seq.gt, levels, &mut rng)?;
                let (l, g) = sample_loss_and_grad(config.mode, &params, seq, &chosen, &gt)?;
                loss += l;
                grads.add_assign(&g);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.scale(inv);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss is {loss} at iteration {iteration}")));
            }
            sgd_step(&mut params, &grads, &mut state, &sgd)?;
            on_iteration(&IterationLog {
                iteration,
                loss: loss * inv,
                learning_rate: sgd.learning_rate,
            });
            iteration += 1;
        }
    }
    Ok(params)
}

/// Full-resolution class scores of one frame.
pub fn predict(params: &ToyNetParams, input: &NetInput) -> Result<Tensor> {
    let mut pass = toynet_forward(params, &input.rgb, &input.depth)?;
    Ok(pass.scores.swap_remove(0))
}

/// Keyframe prediction after Bayesian fusion with up to `frames - 1`
/// neighbors sampled uniformly over the sequence.
pub fn fused_prediction(params: &ToyNetParams, seq: &PreparedSequence, frames: usize) -> Result<LabelMap> {
    let chosen = uniform_subset(seq.neighbors.len(), frames.saturating_sub(1));
    let mut views = vec![ViewPrediction::keyframe(predict(params, &seq.keyframe)?)];
    let warped = chosen
        .par_iter()
        .map(|&i| {
            let n = &seq.neighbors[i];
            Ok(ViewPrediction::from_sampled(bilinear_sample(&predict(params, &n.input)?, &n.grids[0]), i + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    views.extend(warped);
    Ok(argmax_labels(&sum_scores(&views)?))
}

/// Confusion matrices of the single-view and fused keyframe predictions.
pub fn evaluate(
    params: &ToyNetParams,
    data: &[PreparedSequence],
    frames: usize,
) -> Result<(ConfusionMatrix, ConfusionMatrix)> {
    let k = params.config.num_classes;
    let mut single = ConfusionMatrix::new(k);
    let mut fused = ConfusionMatrix::new(k);
    for seq in data {
        single.accumulate(&argmax_labels(&predict(params, &seq.keyframe)?), &seq.gt)?;
        fused.accumulate(&fused_prediction(params, seq, frames)?, &seq.gt)?;
    }
    Ok((single, fused))
}

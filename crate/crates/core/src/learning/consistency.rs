//! Multi-view consistency losses over the network outputs of a keyframe and
//! its neighbors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy_loss, cross_entropy_masked};
use super::net::{classify, classify_backward, ForwardPass, ToyNetParams};
use crate::error::{Error, Result};
use crate::fusion::{multiview_maxpool, multiview_maxpool_backward, sum_scores, ViewPrediction};
use crate::geometry::WarpGrid;
use crate::tensor::{LabelMap, Tensor, IGNORE};
use crate::warp::{bilinear_sample, bilinear_sample_backward, SampledMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyMode {
    /// Keyframe supervision only.
    Mono,
    /// Each warped neighbor prediction is also supervised by the keyframe labels.
    Augment,
    /// Keyframe and warped neighbor scores are summed before the loss.
    Bayes,
    /// Keyframe and warped neighbor decoder features are max-pooled, then classified.
    Maxpool,
}

impl ConsistencyMode {
    pub const ALL: [ConsistencyMode; 4] = [Self::Mono, Self::Augment, Self::Bayes, Self::Maxpool];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mono => "mono",
            Self::Augment => "augment",
            Self::Bayes => "bayes",
            Self::Maxpool => "maxpool",
        }
    }
}

impl fmt::Display for ConsistencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConsistencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown consistency mode {s:?} (mono, augment, bayes, maxpool)")))
    }
}

/// Loss gradients for one frame's forward pass, per level.
#[derive(Debug, Clone)]
pub struct FrameGrads {
    pub scores: Vec<Option<Tensor>>,
    pub features: Vec<Option<Tensor>>,
}

impl FrameGrads {
    fn new(levels: usize) -> Self {
        Self {
            scores: vec![None; levels],
            features: vec![None; levels],
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[derive(Debug, Clone)]
pub struct ConsistencyLoss {
    pub loss: f64,
    pub per_level: Vec<f64>,
    /// Keyframe first, then the neighbors.
    pub frame_grads: Vec<FrameGrads>,
    /// Parameter gradients arising outside the per-frame passes (the
    /// classifier applied to max-pooled features).
    pub param_grads: ToyNetParams,
}

/// Multi-scale loss summed over levels.
///
/// `passes[0]` is the keyframe, `passes[i + 1]` neighbor `i`, whose warp
/// grid pyramid (keyframe pixels into the neighbor) is `grids[i]`. `gt[l]` is
/// the keyframe annotation at level `l`.
pub fn consistency_loss(
    mode: ConsistencyMode,
    params: &ToyNetParams,
    passes: &[ForwardPass],
    grids: &[Vec<WarpGrid>],
    gt: &[LabelMap],
) -> Result<ConsistencyLoss> {
    let key = passes
        .first()
        .ok_or_else(|| Error::DegenerateSample("no keyframe output".into()))?;
    let levels = key.levels();
    let neighbors = &passes[1..];
    if mode != ConsistencyMode::Mono && grids.len() != neighbors.len() {
        return Err(Error::Shape(format!(
            "{} neighbor outputs but {} grid pyramids",
            neighbors.len(),
            grids.len()
        )));
    }
    if gt.len() < levels {
        return Err(Error::Shape(format!("{} label levels for {levels} output levels", gt.len())));
    }
    if let Some(g) = grids.iter().find(|g| g.len() < levels) {
        return Err(Error::Shape(format!("grid pyramid has {} levels, need {levels}", g.len())));
    }

    let mut frame_grads: Vec<FrameGrads> = passes.iter().map(|_| FrameGrads::new(levels)).collect();
    let mut param_grads = params.zeros_like();
    let mut per_level = Vec::with_capacity(levels);
    let neighbor_count = if mode == ConsistencyMode::Mono { 0 } else { neighbors.len() };

    for l in 0..levels {
        let labels = &gt[l];
        let warp = |i: usize, source: &Tensor| -> SampledMap { bilinear_sample(source, &grids[i][l]) };
        let mut level_loss;
        match mode {
            ConsistencyMode::Mono | ConsistencyMode::Augment => {
                let (loss, g) = cross_entropy_loss(&key.scores[l], labels)?;
                level_loss = loss;
                accumulate(&mut frame_grads[0].scores[l], g);
                for i in 0..neighbor_count {
                    let warped = warp(i, &neighbors[i].scores[l]);
                    let usable = warped
                        .validity
                        .data()
                        .iter()
                        .zip(labels.data())
                        .any(|(v, y)| *v && *y != IGNORE);
                    if !usable {
                        log::debug!("level {l}: neighbor {i} has no valid labeled overlap");
                        continue;
                    }
                    let (loss, g) = cross_entropy_masked(&warped.values, labels, Some(&warped.validity))?;
                    level_loss += loss;
                    let src = neighbors[i].scores[l].shape();
                    accumulate(&mut frame_grads[i + 1].scores[l], bilinear_sample_backward(&g, &grids[i][l], src));
                }
            }
            ConsistencyMode::Bayes => {
                let mut views = vec![ViewPrediction::keyframe(key.scores[l].clone())];
                for i in 0..neighbor_count {
                    views.push(ViewPrediction::from_sampled(warp(i, &neighbors[i].scores[l]), i + 1));
                }
                log_no_overlap(l, &views[1..].iter().map(|v| v.validity.count_valid()).collect::<Vec<_>>());
                let summed = sum_scores(&views)?;
                let (loss, g) = cross_entropy_loss(&summed, labels)?;
                level_loss = loss;
                for i in 0..neighbor_count {
                    let src = neighbors[i].scores[l].shape();
                    accumulate(&mut frame_grads[i + 1].scores[l], bilinear_sample_backward(&g, &grids[i][l], src));
                }
                accumulate(&mut frame_grads[0].scores[l], g);
            }
            ConsistencyMode::Maxpool => {
                let mut views = vec![SampledMap::all_valid(key.features[l].clone())];
                for i in 0..neighbor_count {
                    views.push(warp(i, &neighbors[i].features[l]));
                }
                log_no_overlap(l, &views[1..].iter().map(|v| v.validity.count_valid()).collect::<Vec<_>>());
                let pooled = multiview_maxpool(&views)?;
                let scores = classify(params, l, &pooled.map.values);
                let (loss, g) = cross_entropy_loss(&scores, labels)?;
                level_loss = loss;
                let g_pooled = classify_backward(params, l, &pooled.map.values, &g, &mut param_grads);
                let per_view = multiview_maxpool_backward(&g_pooled, &pooled, views.len());
                for (v, gv) in per_view.into_iter().enumerate() {
                    if v == 0 {
                        accumulate(&mut frame_grads[0].features[l], gv);
                    } else {
                        let src = neighbors[v - 1].features[l].shape();
                        let gs = bilinear_sample_backward(&gv, &grids[v - 1][l], src);
                        accumulate(&mut frame_grads[v].features[l], gs);
                    }
                }
            }
        }
        per_level.push(level_loss);
    }
    Ok(ConsistencyLoss {
        loss: per_level.iter().sum(),
        per_level,
        frame_grads,
        param_grads,
    })
}

fn log_no_overlap(level: usize, valid_counts: &[usize]) {
    if !valid_counts.is_empty() && valid_counts.iter().all(|c| *c == 0) {
        log::debug!("level {level}: no valid overlap, keyframe term only");
    }
}

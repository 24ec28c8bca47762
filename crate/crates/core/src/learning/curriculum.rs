use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Neighbors eligible at `epoch`: the nearest `increment * (1 + epoch / step)`,
/// capped at `available`.
pub fn curriculum_window(available: usize, epoch: usize, step: usize, increment: usize) -> usize {
    let step = step.max(1);
    increment.saturating_mul(1 + epoch / step).min(available)
}

/// Draws up to `count` distinct neighbor indices uniformly from the current
/// window. Neighbors must be ordered nearest first.
pub fn curriculum_sampler<R: Rng + ?Sized>(
    available: usize,
    epoch: usize,
    step: usize,
    increment: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if available == 0 {
        return Err(Error::DegenerateSample("sequence has no neighbor frames".into()));
    }
    let window = curriculum_window(available, epoch, step, increment);
    Ok(sample(rng, window, count.min(window)).into_vec())
}

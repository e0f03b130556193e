use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, LatentGrid};

/// `tau1` weights the fill-in region, `tau2` the background and `beta` the
/// regularization term of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub tau1: f64,
    pub tau2: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau1: 1.5,
            tau2: 0.7,
            beta: 0.4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a nonnegative finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn check(predicted: &LatentGrid, truth: &LatentGrid, mask: &BinaryMask) -> Result<()> {
    predicted.ensure_same_dims(truth)?;
    let (h, w, _) = predicted.dims();
    if mask.dims() != (h, w) {
        return Err(Error::shape(&[h, w], &[mask.height(), mask.width()]));
    }
    Ok(())
}

/// Mean over all elements of `tau1·m·(ε̂−ε)² + tau2·(1−m)·(ε̂−ε)²`; the mask
/// is broadcast over channels.
pub fn loss_re(predicted: &LatentGrid, truth: &LatentGrid, mask: &BinaryMask, weights: &LossWeights) -> Result<f64> {
    check(predicted, truth, mask)?;
    let p = predicted.array();
    let t = truth.array();
    let mut total = 0.0;
    for ((y, x, k), &pv) in p.indexed_iter() {
        let d = pv - t[[y, x, k]];
        let w = if mask.get(y, x) { weights.tau1 } else { weights.tau2 };
        total += w * d * d;
    }
    Ok(total / p.len() as f64)
}

/// Loss value and its gradient with respect to `predicted`.
pub fn loss_re_with_grad(
    predicted: &LatentGrid,
    truth: &LatentGrid,
    mask: &BinaryMask,
    weights: &LossWeights,
) -> Result<(f64, LatentGrid)> {
    let loss = loss_re(predicted, truth, mask, weights)?;
    let n = predicted.array().len() as f64;
    let t = truth.array();
    let (h, w, c) = predicted.dims();
    let p = predicted.array();
    let grad = LatentGrid::from_fn(h, w, c, |(y, x, k)| {
        let wgt = if mask.get(y, x) { weights.tau1 } else { weights.tau2 };
        2.0 * wgt * (p[[y, x, k]] - t[[y, x, k]]) / n
    });
    Ok((loss, grad))
}

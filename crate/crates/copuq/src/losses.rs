//! Training objective: classification, regression and uncertainty terms,
//! combined as `total = w1·l_reg + w2·l_cls + w3·l_uq`.
//!
//! The loss terms are built as graph nodes so gradients flow into both the
//! detector parameters and, for the perturbation search, the shared inputs.

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;

/// Floor applied to the predicted standard deviation inside the
/// uncertainty loss; far below any meaningful scale of the unit square.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_reg: f64,
    pub w_cls: f64,
    pub w_uq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_reg: 1.0,
            w_cls: 1.0,
            w_uq: 1.0,
        }
    }
}

/// Evaluated loss components for one batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub l_reg: f64,
    pub l_cls: f64,
    pub l_uq: f64,
    pub total: f64,
}

/// Mean binary cross-entropy over all cells, computed from logits in the
/// standard stable form `max(z, 0) - z·t + ln(1 + exp(-|z|))`.
///
/// `targets` must have the same shape as `logits` with entries in {0, 1}.
pub fn loss_cls(g: &mut Graph, logits: NodeId, targets: NodeId) -> Result<NodeId> {
    let zmax = g.max_scalar(logits, 0.0);
    let zt = g.mul(logits, targets)?;
    let neg = g.mul_scalar(logits, -1.0);
    let abs = g.max(logits, neg)?;
    let neg_abs = g.mul_scalar(abs, -1.0);
    let e = g.exp(neg_abs);
    let one_plus = g.add_scalar(e, 1.0);
    let soft = g.ln(one_plus);
    let linear = g.sub(zmax, zt)?;
    let per_cell = g.add(linear, soft)?;
    Ok(g.mean(per_cell))
}

/// Mean squared error over masked coordinates.
///
/// `mask` is {0, 1} per coordinate and `inv_count` is a bound scalar input
/// holding `1 / max(1, number of masked coordinates)`, so an empty mask
/// yields exactly zero.
pub fn loss_reg(
    g: &mut Graph,
    predicted: NodeId,
    targets: NodeId,
    mask: NodeId,
    inv_count: NodeId,
) -> Result<NodeId> {
    let diff = g.sub(predicted, targets)?;
    let sq = g.square(diff);
    let masked = g.mul(sq, mask)?;
    let total = g.sum(masked);
    g.mul(total, inv_count)
}

/// Gaussian uncertainty loss, mean over masked coordinates of
/// `(y - ŷ)² / (2σ²) + ln σ` with `σ = exp(log_variance / 2)`.
///
/// Written in terms of the log-variance the head predicts:
/// `0.5·((y - ŷ)²·exp(-lv) + lv)`, with `lv` floored at `2·ln(SIGMA_FLOOR)`.
/// Gradients flow into both the prediction and the log-variance.
pub fn loss_uq(
    g: &mut Graph,
    predicted: NodeId,
    targets: NodeId,
    log_variance: NodeId,
    mask: NodeId,
    inv_count: NodeId,
) -> Result<NodeId> {
    let lv = g.max_scalar(log_variance, 2.0 * SIGMA_FLOOR.ln());
    let diff = g.sub(predicted, targets)?;
    let sq = g.square(diff);
    let neg_lv = g.mul_scalar(lv, -1.0);
    let inv_var = g.exp(neg_lv);
    let quad = g.mul(sq, inv_var)?;
    let inner = g.add(quad, lv)?;
    let per_coord = g.mul_scalar(inner, 0.5);
    let masked = g.mul(per_coord, mask)?;
    let total = g.sum(masked);
    g.mul(total, inv_count)
}

/// Weighted combination of the three terms.
pub fn total_loss(
    g: &mut Graph,
    l_reg: NodeId,
    l_cls: NodeId,
    l_uq: NodeId,
    weights: &LossWeights,
) -> Result<NodeId> {
    let a = g.mul_scalar(l_reg, weights.w_reg);
    let b = g.mul_scalar(l_cls, weights.w_cls);
    let c = g.mul_scalar(l_uq, weights.w_uq);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

impl LossBreakdown {
    pub fn combine(l_reg: f64, l_cls: f64, l_uq: f64, weights: &LossWeights) -> Self {
        Self {
            l_reg,
            l_cls,
            l_uq,
            total: weights.w_reg * l_reg + weights.w_cls * l_cls + weights.w_uq * l_uq,
        }
    }
}

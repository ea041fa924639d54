//! Training objectives. Every loss is generic over [`FieldOps`], so the same
//! code evaluates eagerly on [`Grid`]s or records onto a tape.

use serde::{Deserialize, Serialize};

use crate::acm::heaviside;
use crate::error::{Error, Result};
use crate::fields::{Grid, PadMode};
use crate::maps::{edge_gt, gradient_magnitude, soft_boundary, PROB_CLAMP};
use crate::metrics::DICE_EPS;
use crate::ops::FieldOps;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_main_dice: f64,
    pub w_shape_dice: f64,
    pub w_edge: f64,
    pub edge_dice: f64,
    pub edge_bce: f64,
    pub consistency_tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_main_dice: 1.0,
            w_shape_dice: 0.5,
            w_edge: 0.1,
            edge_dice: 1.0,
            edge_bce: 1.0,
            consistency_tau: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [
            self.w_main_dice,
            self.w_shape_dice,
            self.w_edge,
            self.edge_dice,
            self.edge_bce,
        ];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter(
                "loss weights must be finite and >= 0".into(),
            ));
        }
        if !(self.consistency_tau.is_finite() && self.consistency_tau > 0.0) {
            return Err(Error::InvalidParameter(
                "consistency_tau must be > 0".into(),
            ));
        }
        Ok(())
    }
}

fn check_dims<T: FieldOps>(a: &T, b: &Grid) -> Result<()> {
    let (da, db) = (a.dims(), b.dims());
    if da != db {
        return Err(Error::DimensionMismatch(da.0, da.1, db.0, db.1));
    }
    Ok(())
}

/// `1 - 2 sum(g p) / (sum(g^2) + sum(p^2) + eps)`.
pub fn dice_loss<T: FieldOps>(pred: &T, gt: &Grid) -> Result<T> {
    check_dims(pred, gt)?;
    let inter = pred.mul_grid(gt)?.sum();
    let gt_sq: f64 = gt.values().iter().map(|v| v * v).sum();
    let den = pred.square().sum().shift(gt_sq + DICE_EPS);
    Ok(inter.mul(&den.recip())?.scale(-2.0).shift(1.0))
}

fn clamp_prob<T: FieldOps>(p: &T) -> T {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Class-balanced cross entropy, summed over pixels. Edge pixels are
/// weighted by the non-edge fraction `beta`, non-edge pixels by `1 - beta`.
pub fn balanced_bce<T: FieldOps>(pred: &T, gt_edges: &Grid) -> Result<T> {
    check_dims(pred, gt_edges)?;
    let n = gt_edges.len() as f64;
    let non_edge = gt_edges.values().iter().filter(|&&v| v <= 0.5).count() as f64;
    let beta = non_edge / n;
    let w_pos = gt_edges.map(|e| if e > 0.5 { beta } else { 0.0 });
    let w_neg = gt_edges.map(|e| if e > 0.5 { 0.0 } else { 1.0 - beta });
    let p = clamp_prob(pred);
    let pos = p.ln().mul_grid(&w_pos)?;
    let neg = p.one_minus().ln().mul_grid(&w_neg)?;
    Ok(pos.add(&neg)?.sum().scale(-1.0))
}

pub fn edge_loss<T: FieldOps>(pred_edges: &T, gt_edges: &Grid, w: &LossWeights) -> Result<T> {
    let d = dice_loss(pred_edges, gt_edges)?.scale(w.edge_dice);
    let b = balanced_bce(pred_edges, gt_edges)?.scale(w.edge_bce);
    d.add(&b)
}

/// L1 mismatch between the soft boundary of `class_probs` and the gradient
/// magnitude of `gt_mask`, summed over the ground-truth edge pixels.
pub fn consistency_loss<T: FieldOps>(
    class_probs: &[T],
    gt_mask: &Grid,
    tau: f64,
    noise: Option<&[Grid]>,
) -> Result<T> {
    let soft = soft_boundary(class_probs, tau, noise)?;
    check_dims(&soft, gt_mask)?;
    let target = gradient_magnitude(gt_mask, PadMode::Replicate)?;
    let edges = edge_gt(gt_mask)?;
    Ok(soft.sub(&soft.lift(target))?.abs().mul_grid(&edges)?.sum())
}

/// Mean binary cross entropy of probabilities against a binary target.
pub fn bce<T: FieldOps>(prob: &T, gt: &Grid) -> Result<T> {
    check_dims(prob, gt)?;
    let p = clamp_prob(prob);
    let pos = p.ln().mul_grid(gt)?;
    let neg = p.one_minus().ln().mul_grid(&gt.map(|g| 1.0 - g))?;
    Ok(pos.add(&neg)?.mean().scale(-1.0))
}

/// Cross entropy of the level-set interior `H_eps(phi)` against `gt`.
pub fn acm_bce<T: FieldOps>(phi: &T, gt: &Grid, eps: f64) -> Result<T> {
    bce(&heaviside(phi, eps), gt)
}

/// Whether the composite edge-network loss includes the consistency term.
#[derive(Clone, Copy, Debug, Default)]
pub enum Consistency<'a> {
    #[default]
    Off,
    /// Class probabilities are `[1 - main, main]`; `noise` is one frozen
    /// Gumbel sample per class, `None` for zero noise.
    On { noise: Option<&'a [Grid]> },
}

/// `w_main_dice * dice(main) + w_shape_dice * dice(shape) + w_edge * bbce(shape)`,
/// plus the consistency loss on `main` when enabled.
pub fn total_edge_network_loss<T: FieldOps>(
    main_pred: &T,
    shape_pred: &T,
    y_true: &Grid,
    s_true: &Grid,
    w: &LossWeights,
    consistency: Consistency<'_>,
) -> Result<T> {
    let main = dice_loss(main_pred, y_true)?.scale(w.w_main_dice);
    let shape = dice_loss(shape_pred, s_true)?.scale(w.w_shape_dice);
    let edge = balanced_bce(shape_pred, s_true)?.scale(w.w_edge);
    let total = main.add(&shape)?.add(&edge)?;
    match consistency {
        Consistency::Off => Ok(total),
        Consistency::On { noise } => {
            let probs = [main_pred.one_minus(), main_pred.clone()];
            total.add(&consistency_loss(&probs, y_true, w.consistency_tau, noise)?)
        }
    }
}

/// Level-set loss plus the same cross entropy on the network's own
/// probability head.
pub fn dtac_total_loss<T: FieldOps>(phi_n: &T, cnn_prob: &T, gt: &Grid, eps: f64) -> Result<T> {
    acm_bce(phi_n, gt, eps)?.add(&bce(cnn_prob, gt)?)
}

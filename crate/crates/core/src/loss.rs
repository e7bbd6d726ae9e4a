//! Compound detection loss over anchor slots and its analytic gradient.
//!
//! For every object slot with prediction `S = (x, y, w, h, c, p)` and target
//! `S_g`:
//!
//! ```text
//! l2_center  = (x - x_g)² + (y - y_g)²
//! sqrt_wh    = (√w - √w_g)² + (√h - √h_g)²
//! iou_obj    = λ · ln(clamp(r(S, S_g), ε, 1/ε))²
//! conf_obj   = λ · (c - IoU(S, S_g))²
//! class_term = λ · Σ_c (p(c) - p_g(c))²
//! ```
//!
//! and every no-object slot adds `conf_noobj = λ_noobj · c²`. Shielded and
//! ignored slots contribute nothing. `x, y` are absolute image fractions.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::geometry::{BoxCWH, IouVariant, EPS_AREA};
use crate::gridcodec::{AnchorAssignment, GridConfig, PredictionTensor, SlotLabel};
use crate::{Error, Result, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the object IoU, object confidence and class terms.
    pub lambda_obj: f64,
    /// Weight of the no-object confidence term.
    pub lambda_noobj: f64,
    pub iou_variant: IouVariant,
    /// Clamp floor for the logarithm argument.
    pub eps_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_obj: 0.2,
            lambda_noobj: 0.1,
            iou_variant: IouVariant::Union,
            eps_ratio: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_obj > 0.0 && self.lambda_noobj > 0.0) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if !(self.eps_ratio > 0.0 && self.eps_ratio < 1.0) {
            return Err(Error::Config(format!(
                "eps_ratio must lie in (0, 1), got {}",
                self.eps_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2_center: f64,
    pub sqrt_wh: f64,
    pub iou_obj: f64,
    pub conf_obj: f64,
    pub conf_noobj: f64,
    pub class_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.l2_center
            + self.sqrt_wh
            + self.iou_obj
            + self.conf_obj
            + self.conf_noobj
            + self.class_term;
        self
    }

    /// Every component multiplied by `k`, with the total re-summed.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            l2_center: self.l2_center * k,
            sqrt_wh: self.sqrt_wh * k,
            iou_obj: self.iou_obj * k,
            conf_obj: self.conf_obj * k,
            conf_noobj: self.conf_noobj * k,
            class_term: self.class_term * k,
            total: 0.0,
        }
        .finish()
    }
}

impl AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.l2_center += o.l2_center;
        self.sqrt_wh += o.sqrt_wh;
        self.iou_obj += o.iou_obj;
        self.conf_obj += o.conf_obj;
        self.conf_noobj += o.conf_noobj;
        self.class_term += o.class_term;
        *self = self.finish();
    }
}

/// Loss components summed over all unshielded slots.
pub fn compound_loss(
    pred: &PredictionTensor,
    target: &PredictionTensor,
    assignment: &AnchorAssignment,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    Ok(evaluate(pred, target, assignment, cfg, None, None)?.0)
}

/// `∂ total / ∂ pred[j]` for every tensor value.
pub fn compound_loss_grad(
    pred: &PredictionTensor,
    target: &PredictionTensor,
    assignment: &AnchorAssignment,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; pred.len()];
    evaluate(pred, target, assignment, cfg, None, Some(&mut grad))?;
    Ok(grad)
}

/// Loss attributed to each anchor slot; an object slot carries its class term.
pub fn slot_losses(
    pred: &PredictionTensor,
    target: &PredictionTensor,
    assignment: &AnchorAssignment,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    evaluate(pred, target, assignment, cfg, None, None)
}

/// Loss and gradient restricted to the slots where `keep` is true.
pub fn masked_loss_and_grad(
    pred: &PredictionTensor,
    target: &PredictionTensor,
    assignment: &AnchorAssignment,
    cfg: &LossConfig,
    keep: &[bool],
) -> Result<(LossBreakdown, Vec<f64>)> {
    if keep.len() != assignment.num_slots() {
        return Err(Error::Dimension {
            expected: format!("keep mask of {} slots", assignment.num_slots()),
            found: format!("{} slots", keep.len()),
        });
    }
    let mut grad = vec![0.0; pred.len()];
    let (b, _) = evaluate(pred, target, assignment, cfg, Some(keep), Some(&mut grad))?;
    Ok((b, grad))
}

fn evaluate(
    pred: &PredictionTensor,
    target: &PredictionTensor,
    assignment: &AnchorAssignment,
    cfg: &LossConfig,
    keep: Option<&[bool]>,
    mut grad: Option<&mut [f64]>,
) -> Result<(LossBreakdown, Vec<f64>)> {
    cfg.validate()?;
    let grid = GridConfig::new(pred.n())?;
    pred.check(&grid)?;
    target.check(&grid)?;
    if assignment.num_slots() != grid.num_slots() {
        return Err(Error::Dimension {
            expected: format!("assignment of {} slots", grid.num_slots()),
            found: format!("{} slots", assignment.num_slots()),
        });
    }

    let p = pred.values();
    let t = target.values();
    let inv_n = 1.0 / grid.n() as f64;
    let lam = cfg.lambda_obj;
    let mut acc = LossBreakdown::default();
    let mut per_slot = vec![0.0; grid.num_slots()];

    for (slot, label) in assignment.labels().iter().enumerate() {
        if keep.is_some_and(|k| !k[slot]) {
            continue;
        }
        let (cell, anchor) = grid.split_slot(slot);
        let conf_i = grid.conf_index(cell, anchor);
        match label {
            SlotLabel::Shielded | SlotLabel::Ignored => {}
            SlotLabel::NoObject => {
                let c = p[conf_i];
                let l = cfg.lambda_noobj * c * c;
                acc.conf_noobj += l;
                per_slot[slot] = l;
                if let Some(g) = grad.as_deref_mut() {
                    g[conf_i] += 2.0 * cfg.lambda_noobj * c;
                }
            }
            SlotLabel::Object { .. } => {
                let ci = grid.coord_index(cell, anchor, 0);
                let pb = grid.box_from_cell(cell, p[ci], p[ci + 1], p[ci + 2], p[ci + 3]);
                let gb = grid.box_from_cell(cell, t[ci], t[ci + 1], t[ci + 2], t[ci + 3]);

                let dx = pb.cx - gb.cx;
                let dy = pb.cy - gb.cy;
                let l2 = dx * dx + dy * dy;

                let (sw, sh) = (pb.w.sqrt(), pb.h.sqrt());
                let (dsw, dsh) = (sw - gb.w.sqrt(), sh - gb.h.sqrt());
                let sq = dsw * dsw + dsh * dsh;

                let (r, dr) = ratio_with_grad(&pb, &gb, cfg.iou_variant);
                let (lo, hi) = (cfg.eps_ratio, 1.0 / cfg.eps_ratio);
                let ln_r = r.clamp(lo, hi).ln();
                let iou_term = lam * ln_r * ln_r;

                let (ru, dru) = ratio_with_grad(&pb, &gb, IouVariant::Union);
                let c = p[conf_i];
                let conf_term = lam * (c - ru) * (c - ru);

                let mut class_term = 0.0;
                for k in 0..NUM_CLASSES {
                    let idx = grid.class_index(cell, k);
                    let d = p[idx] - t[idx];
                    class_term += lam * d * d;
                }

                acc.l2_center += l2;
                acc.sqrt_wh += sq;
                acc.iou_obj += iou_term;
                acc.conf_obj += conf_term;
                acc.class_term += class_term;
                per_slot[slot] = l2 + sq + iou_term + conf_term + class_term;

                if let Some(g) = grad.as_deref_mut() {
                    // gradient w.r.t. the image-space box (cx, cy, w, h)
                    let mut gbox = [2.0 * dx, 2.0 * dy, dsw / sw, dsh / sh];
                    if r > lo && r < hi {
                        let k = 2.0 * lam * ln_r / r;
                        for (gi, d) in gbox.iter_mut().zip(dr) {
                            *gi += k * d;
                        }
                    }
                    let kc = -2.0 * lam * (c - ru);
                    for (gi, d) in gbox.iter_mut().zip(dru) {
                        *gi += kc * d;
                    }
                    g[ci] += gbox[0] * inv_n;
                    g[ci + 1] += gbox[1] * inv_n;
                    g[ci + 2] += gbox[2];
                    g[ci + 3] += gbox[3];
                    g[conf_i] += 2.0 * lam * (c - ru);
                    for k in 0..NUM_CLASSES {
                        let idx = grid.class_index(cell, k);
                        g[idx] += 2.0 * lam * (p[idx] - t[idx]);
                    }
                }
            }
        }
    }
    Ok((acc.finish(), per_slot))
}

/// Overlap ratio of `p` against `g` and its gradient w.r.t. `p`'s `(cx, cy, w, h)`.
///
/// At edge-coincidence points the one-sided derivative from the `p`-inside
/// side is returned.
pub(crate) fn ratio_with_grad(p: &BoxCWH, g: &BoxCWH, variant: IouVariant) -> (f64, [f64; 4]) {
    let (px1, px2, py1, py2) = (p.x1(), p.x2(), p.y1(), p.y2());
    let (gx1, gx2, gy1, gy2) = (g.x1(), g.x2(), g.y1(), g.y2());

    let ow = px2.min(gx2) - px1.max(gx1);
    let oh = py2.min(gy2) - py1.max(gy1);

    let mut inter = 0.0;
    let mut di = [0.0; 4];
    if ow > 0.0 && oh > 0.0 {
        inter = ow * oh;
        let right = if px2 < gx2 { 1.0 } else { 0.0 };
        let left = if px1 > gx1 { 1.0 } else { 0.0 };
        let bottom = if py2 < gy2 { 1.0 } else { 0.0 };
        let top = if py1 > gy1 { 1.0 } else { 0.0 };
        di = [
            oh * (right - left),
            ow * (bottom - top),
            oh * 0.5 * (right + left),
            ow * 0.5 * (bottom + top),
        ];
    }
    let (pw, ph) = (px2 - px1, py2 - py1);
    let union = pw * ph + (gx2 - gx1) * (gy2 - gy1) - inter;
    let du = [-di[0], -di[1], ph - di[2], pw - di[3]];

    match variant {
        IouVariant::Union => {
            if union <= 0.0 {
                return (0.0, [0.0; 4]);
            }
            let r = inter / union;
            let u2 = union * union;
            (
                r,
                std::array::from_fn(|k| (di[k] * union - inter * du[k]) / u2),
            )
        }
        IouVariant::SymmetricDifference => {
            let d = union - inter;
            if d > EPS_AREA {
                let dd: [f64; 4] = std::array::from_fn(|k| du[k] - di[k]);
                let d2 = d * d;
                (
                    inter / d,
                    std::array::from_fn(|k| (di[k] * d - inter * dd[k]) / d2),
                )
            } else {
                (inter / EPS_AREA, di.map(|x| x / EPS_AREA))
            }
        }
    }
}

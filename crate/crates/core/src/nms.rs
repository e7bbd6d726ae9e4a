//! Scale-synthesis non-maximum suppression.
//!
//! Greedy per-class NMS with one extra rule: when the current top box `W_u`
//! overlaps a lower-scored box `W_i` that fully encloses it, and the relative
//! score gap `(S_u - S_i) / S_u` is below `λ`, the enclosing box is kept with
//! its score raised to `S_u` instead of being suppressed. This rescues the
//! larger box of an occluder/occluded pair.

use serde::{Deserialize, Serialize};

use crate::geometry::{contains, iou, BoxCWH, IouVariant};
use crate::gridcodec::Detection;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    /// Union-IoU above which a lower-scored box is suppressed.
    pub iou_suppress: f64,
    /// Relative score gap below which an enclosing box is rescued.
    pub lambda_containment: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_suppress: 0.7,
            lambda_containment: 0.15,
        }
    }
}

impl NmsConfig {
    /// `λ = 0` is accepted and gives classic greedy NMS.
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_suppress > 0.0 && self.iou_suppress <= 1.0) {
            return Err(Error::Config(format!(
                "iou_suppress must lie in (0, 1], got {}",
                self.iou_suppress
            )));
        }
        if !(0.0..1.0).contains(&self.lambda_containment) {
            return Err(Error::Config(format!(
                "lambda_containment must lie in [0, 1), got {}",
                self.lambda_containment
            )));
        }
        Ok(())
    }
}

#[inline]
fn rescues(top: &Detection, other: &Detection, lambda: f64) -> bool {
    contains(&other.bbox, &top.bbox)
        && !contains(&top.bbox, &other.bbox)
        && top.score > 0.0
        && (top.score - other.score) / top.score < lambda
}

/// Runs scale-synthesis NMS independently for every class.
///
/// The result is ordered by score, highest first; equal scores keep the order
/// in which boxes were emitted (classes in ascending id).
pub fn nms_scale_synthesis(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        if by_class.len() <= d.class_id {
            by_class.resize_with(d.class_id + 1, Vec::new);
        }
        by_class[d.class_id].push(i);
    }

    let mut out: Vec<Detection> = Vec::with_capacity(dets.len());
    let mut alive = Vec::new();
    for mut idx in by_class {
        idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        alive.clear();
        alive.resize(idx.len(), true);
        for p in 0..idx.len() {
            if !alive[p] {
                continue;
            }
            alive[p] = false;
            let top = dets[idx[p]];
            out.push(top);
            for q in p + 1..idx.len() {
                if !alive[q] {
                    continue;
                }
                let other = &dets[idx[q]];
                if iou(&top.bbox, &other.bbox, IouVariant::Union) > cfg.iou_suppress {
                    alive[q] = false;
                    if rescues(&top, other, cfg.lambda_containment) {
                        out.push(Detection {
                            score: top.score,
                            ..*other
                        });
                    }
                }
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Unoptimized transcription of the same rule, used to cross-check
/// [`nms_scale_synthesis`]. Shares no code with it.
pub fn nms_reference_oracle(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    fn corners(b: &BoxCWH) -> [f64; 4] {
        [
            b.cx - 0.5 * b.w,
            b.cy - 0.5 * b.h,
            b.cx + 0.5 * b.w,
            b.cy + 0.5 * b.h,
        ]
    }
    fn overlap(a: &BoxCWH, b: &BoxCWH) -> f64 {
        let [ax1, ay1, ax2, ay2] = corners(a);
        let [bx1, by1, bx2, by2] = corners(b);
        let iw = if ax2 < bx2 { ax2 } else { bx2 } - if ax1 > bx1 { ax1 } else { bx1 };
        let ih = if ay2 < by2 { ay2 } else { by2 } - if ay1 > by1 { ay1 } else { by1 };
        let inter = if iw <= 0.0 || ih <= 0.0 { 0.0 } else { iw * ih };
        let uni = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
        if uni <= 0.0 {
            0.0
        } else {
            (inter / uni).clamp(0.0, 1.0)
        }
    }
    fn encloses(outer: &BoxCWH, inner: &BoxCWH) -> bool {
        let o = corners(outer);
        let i = corners(inner);
        i[0] >= o[0] && i[1] >= o[1] && i[2] <= o[2] && i[3] <= o[3]
    }

    let max_class = dets.iter().map(|d| d.class_id).max();
    let mut emitted: Vec<Detection> = Vec::new();
    for class in 0..=max_class.unwrap_or(0) {
        if max_class.is_none() {
            break;
        }
        // insertion sort keeps input order among equal scores
        let mut pool: Vec<Detection> = Vec::new();
        for d in dets.iter().filter(|d| d.class_id == class) {
            let at = pool
                .iter()
                .position(|p| p.score < d.score)
                .unwrap_or(pool.len());
            pool.insert(at, *d);
        }
        while !pool.is_empty() {
            let u = pool.remove(0);
            emitted.push(u);
            let mut remaining = Vec::new();
            for w in pool {
                if overlap(&u.bbox, &w.bbox) > cfg.iou_suppress {
                    let strictly_larger = encloses(&w.bbox, &u.bbox) && !encloses(&u.bbox, &w.bbox);
                    if strictly_larger
                        && u.score > 0.0
                        && (u.score - w.score) / u.score < cfg.lambda_containment
                    {
                        emitted.push(Detection {
                            score: u.score,
                            ..w
                        });
                    }
                } else {
                    remaining.push(w);
                }
            }
            pool = remaining;
        }
    }

    let mut out: Vec<Detection> = Vec::new();
    for d in emitted {
        let at = out
            .iter()
            .position(|o| o.score < d.score)
            .unwrap_or(out.len());
        out.insert(at, d);
    }
    out
}

/// Greedy anchor competition: slots are visited by fitness (highest first,
/// ties to the lower index) and survive unless they overlap an earlier
/// survivor with union-IoU above `iou_threshold`.
///
/// Returns surviving indices in ascending order.
pub fn competitive_filter(slots: &[(BoxCWH, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.sort_by(|&a, &b| slots[b].1.total_cmp(&slots[a].1).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(&slots[k].0, &slots[i].0, IouVariant::Union) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

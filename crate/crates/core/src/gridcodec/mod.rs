//! Mapping between ground-truth boxes and the flat prediction tensor.
//!
//! Per cell `k = row * n + col` the tensor stores 36 values:
//!
//! ```text
//! [0..6)    class probabilities, shared by the cell's anchors
//! [6..30)   6 × (a, b, w, h)   a, b: offset inside the cell; w, h: image fractions
//! [30..36)  6 confidences
//! ```
//!
//! Cells are laid out row-major, so the whole tensor is `n * n * 36` values.

mod detections_file;
mod tensor_file;

pub use detections_file::{read_detections, write_detections, FrameDetections};
pub use tensor_file::{read_tensors, write_tensors, TENSOR_MAGIC};

use serde::{Deserialize, Serialize};

use crate::geometry::{anchor_priors, iou, AnchorPrior, BoxCWH, IouVariant};
use crate::{Error, Result, NUM_ANCHORS, NUM_CLASSES, VALUES_PER_CELL};

const COORD_OFFSET: usize = NUM_CLASSES;
const CONF_OFFSET: usize = NUM_CLASSES + 4 * NUM_ANCHORS;

/// Grid geometry shared by the codec, the loss and the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    n: usize,
    priors: [AnchorPrior; NUM_ANCHORS],
}

impl GridConfig {
    pub const DEFAULT_N: usize = 9;

    pub fn new(n: usize) -> Result<Self> {
        Ok(Self {
            n,
            priors: anchor_priors(n)?,
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn priors(&self) -> &[AnchorPrior; NUM_ANCHORS] {
        &self.priors
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        self.n * self.n
    }

    /// Anchor slots, `n * n * 6`.
    #[inline]
    pub fn num_slots(&self) -> usize {
        self.num_cells() * NUM_ANCHORS
    }

    /// Tensor length, `n * n * 36`.
    #[inline]
    pub fn tensor_len(&self) -> usize {
        self.num_cells() * VALUES_PER_CELL
    }

    #[inline]
    pub fn class_index(&self, cell: usize, class: usize) -> usize {
        cell * VALUES_PER_CELL + class
    }

    /// Index of coordinate `k` (0 = a, 1 = b, 2 = w, 3 = h) of an anchor.
    #[inline]
    pub fn coord_index(&self, cell: usize, anchor: usize, k: usize) -> usize {
        cell * VALUES_PER_CELL + COORD_OFFSET + 4 * anchor + k
    }

    #[inline]
    pub fn conf_index(&self, cell: usize, anchor: usize) -> usize {
        cell * VALUES_PER_CELL + CONF_OFFSET + anchor
    }

    #[inline]
    pub fn slot(&self, cell: usize, anchor: usize) -> usize {
        cell * NUM_ANCHORS + anchor
    }

    /// `(cell, anchor)` of a slot index.
    #[inline]
    pub fn split_slot(&self, slot: usize) -> (usize, usize) {
        (slot / NUM_ANCHORS, slot % NUM_ANCHORS)
    }

    /// `(row, col)` of a cell index.
    #[inline]
    pub fn cell_rc(&self, cell: usize) -> (usize, usize) {
        (cell / self.n, cell % self.n)
    }

    /// Cell holding a point; coordinates on the far border clamp into the last cell.
    pub fn cell_of(&self, cx: f64, cy: f64) -> usize {
        let last = (self.n - 1) as f64;
        let col = (cx * self.n as f64).floor().clamp(0.0, last) as usize;
        let row = (cy * self.n as f64).floor().clamp(0.0, last) as usize;
        row * self.n + col
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (row, col) = self.cell_rc(cell);
        let s = 1.0 / self.n as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }

    /// The prior of a slot, centered on its cell.
    pub fn slot_prior_box(&self, slot: usize) -> BoxCWH {
        let (cell, anchor) = self.split_slot(slot);
        let (cx, cy) = self.cell_center(cell);
        self.priors[anchor].at(cx, cy)
    }

    /// Converts in-cell offsets back to an image-space box.
    #[inline]
    pub fn box_from_cell(&self, cell: usize, a: f64, b: f64, w: f64, h: f64) -> BoxCWH {
        let (row, col) = self.cell_rc(cell);
        let n = self.n as f64;
        BoxCWH::new((col as f64 + a) / n, (row as f64 + b) / n, w, h)
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self::new(Self::DEFAULT_N).expect("default grid size is valid")
    }
}

/// Flat `n * n * 36` tensor; both the model output and the encoded target.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTensor {
    n: usize,
    values: Vec<f64>,
}

impl PredictionTensor {
    pub fn zeros(cfg: &GridConfig) -> Self {
        Self {
            n: cfg.n(),
            values: vec![0.0; cfg.tensor_len()],
        }
    }

    pub fn from_values(cfg: &GridConfig, values: Vec<f64>) -> Result<Self> {
        if values.len() != cfg.tensor_len() {
            return Err(Error::Dimension {
                expected: format!("{} values (n={})", cfg.tensor_len(), cfg.n()),
                found: format!("{} values", values.len()),
            });
        }
        Ok(Self { n: cfg.n(), values })
    }

    /// Grid size this tensor was built for.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn check(&self, cfg: &GridConfig) -> Result<()> {
        if self.n != cfg.n() || self.values.len() != cfg.tensor_len() {
            return Err(Error::Dimension {
                expected: format!("tensor for n={} ({} values)", cfg.n(), cfg.tensor_len()),
                found: format!("tensor for n={} ({} values)", self.n, self.values.len()),
            });
        }
        Ok(())
    }

    /// Predicted box of a slot in image coordinates.
    #[inline]
    pub fn slot_box(&self, cfg: &GridConfig, slot: usize) -> BoxCWH {
        let (cell, anchor) = cfg.split_slot(slot);
        let base = cfg.coord_index(cell, anchor, 0);
        let v = &self.values[base..base + 4];
        cfg.box_from_cell(cell, v[0], v[1], v[2], v[3])
    }
}

/// One labeled object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BoxCWH,
    pub class_id: usize,
}

impl GroundTruth {
    pub fn new(bbox: BoxCWH, class_id: usize) -> Self {
        Self { bbox, class_id }
    }

    /// Checks class range, center range and box size; `index` is used in the error.
    pub fn validate(&self, index: usize) -> Result<()> {
        let err = |reason: String| Error::Annotation { index, reason };
        if self.class_id >= NUM_CLASSES {
            return Err(err(format!(
                "class id {} out of range 0..{}",
                self.class_id, NUM_CLASSES
            )));
        }
        let b = &self.bbox;
        if !((0.0..=1.0).contains(&b.cx) && (0.0..=1.0).contains(&b.cy)) {
            return Err(err(format!("center ({}, {}) outside [0,1]²", b.cx, b.cy)));
        }
        if !(b.w > 0.0 && b.h > 0.0 && b.w.is_finite() && b.h.is_finite()) {
            return Err(err(format!("box size ({}, {}) must be positive", b.w, b.h)));
        }
        Ok(())
    }
}

/// A decoded `(box, class, score)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxCWH,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoxCWH, class_id: usize, score: f64) -> Self {
        Self {
            bbox,
            class_id,
            score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotLabel {
    /// Responsible for ground truth `gt`.
    Object {
        gt: usize,
    },
    NoObject,
    /// Prior crosses the image border; excluded from every loss term.
    Shielded,
    /// Lost the anchor competition to an overlapping slot; excluded from the loss.
    Ignored,
}

/// Per-slot labels binding ground truth to tensor slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorAssignment {
    labels: Vec<SlotLabel>,
    /// Object slot per input ground truth, `None` when it had none.
    gt_slots: Vec<Option<usize>>,
}

impl AnchorAssignment {
    pub fn labels(&self) -> &[SlotLabel] {
        &self.labels
    }

    pub fn label(&self, slot: usize) -> SlotLabel {
        self.labels[slot]
    }

    pub fn gt_slots(&self) -> &[Option<usize>] {
        &self.gt_slots
    }

    /// Object slot indices in ascending order.
    pub fn object_slots(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, SlotLabel::Object { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_slots(&self) -> usize {
        self.labels.len()
    }

    /// Marks `slot` as ignored. Object and shielded slots are left alone.
    pub fn ignore(&mut self, slot: usize) {
        if self.labels[slot] == SlotLabel::NoObject {
            self.labels[slot] = SlotLabel::Ignored;
        }
    }
}

/// Per-slot flags, `true` where the slot's prior leaves the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShieldMask(Vec<bool>);

impl ShieldMask {
    pub fn is_shielded(&self, slot: usize) -> bool {
        self.0[slot]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&s| s).count()
    }
}

/// Slots whose prior, centered on the cell, extends strictly beyond the image.
pub fn shield_mask(cfg: &GridConfig) -> ShieldMask {
    ShieldMask(
        (0..cfg.num_slots())
            .map(|slot| {
                let b = cfg.slot_prior_box(slot);
                b.x1() < 0.0 || b.y1() < 0.0 || b.x2() > 1.0 || b.y2() > 1.0
            })
            .collect(),
    )
}

/// Encodes ground truth into a target tensor with border shielding applied.
///
/// See [`encode_with`].
pub fn encode(
    gts: &[GroundTruth],
    cfg: &GridConfig,
) -> Result<(PredictionTensor, AnchorAssignment)> {
    encode_with(gts, cfg, Some(&shield_mask(cfg)))
}

/// Encodes ground truth into a target tensor.
///
/// Each object is bound to the cell containing its center and to the
/// unshielded prior there with the highest IoU against the object's shape
/// (ties go to the lower anchor index). When every prior of that cell is
/// shielded the best prior is still written to the target, but its slot is
/// labeled [`SlotLabel::Shielded`] and the object gets no object slot.
///
/// Cells that receive several centers keep the largest object; the rest are
/// dropped with a warning.
pub fn encode_with(
    gts: &[GroundTruth],
    cfg: &GridConfig,
    shield: Option<&ShieldMask>,
) -> Result<(PredictionTensor, AnchorAssignment)> {
    for (i, gt) in gts.iter().enumerate() {
        gt.validate(i)?;
    }
    if let Some(mask) = shield {
        if mask.len() != cfg.num_slots() {
            return Err(Error::Dimension {
                expected: format!("shield mask of {} slots", cfg.num_slots()),
                found: format!("{} slots", mask.len()),
            });
        }
    }

    let mut owner: Vec<Option<usize>> = vec![None; cfg.num_cells()];
    for (i, gt) in gts.iter().enumerate() {
        let cell = cfg.cell_of(gt.bbox.cx, gt.bbox.cy);
        match owner[cell] {
            Some(prev) if gts[prev].bbox.area() >= gt.bbox.area() => {
                log::warn!("dropping annotation {i}: cell {cell} already holds annotation {prev}");
            }
            Some(prev) => {
                log::warn!("dropping annotation {prev}: cell {cell} holds larger annotation {i}");
                owner[cell] = Some(i);
            }
            None => owner[cell] = Some(i),
        }
    }

    let mut target = background_target(cfg);
    let mut labels: Vec<SlotLabel> = match shield {
        Some(mask) => mask
            .as_slice()
            .iter()
            .map(|&s| {
                if s {
                    SlotLabel::Shielded
                } else {
                    SlotLabel::NoObject
                }
            })
            .collect(),
        None => vec![SlotLabel::NoObject; cfg.num_slots()],
    };
    let mut gt_slots = vec![None; gts.len()];
    let n = cfg.n() as f64;

    for (cell, gt_idx) in owner.iter().enumerate() {
        let Some(gi) = *gt_idx else { continue };
        let gt = &gts[gi];
        let (ccx, ccy) = cfg.cell_center(cell);
        let shape = gt.bbox.centered_at(ccx, ccy);
        let shielded = |a: usize| shield.is_some_and(|m| m.is_shielded(cfg.slot(cell, a)));

        let best_of = |allow: &dyn Fn(usize) -> bool| {
            let mut best: Option<(usize, f64)> = None;
            for (a, prior) in cfg.priors().iter().enumerate() {
                if !allow(a) {
                    continue;
                }
                let r = iou(&prior.at(ccx, ccy), &shape, IouVariant::Union);
                if best.is_none_or(|(_, br)| r > br) {
                    best = Some((a, r));
                }
            }
            best.map(|(a, _)| a)
        };
        let (anchor, usable) = match best_of(&|a| !shielded(a)) {
            Some(a) => (a, true),
            None => (best_of(&|_| true).expect("six priors"), false),
        };

        let (row, col) = cfg.cell_rc(cell);
        let v = target.values_mut();
        for c in 0..NUM_CLASSES {
            v[cfg.class_index(cell, c)] = if c == gt.class_id { 1.0 } else { 0.0 };
        }
        v[cfg.coord_index(cell, anchor, 0)] = gt.bbox.cx * n - col as f64;
        v[cfg.coord_index(cell, anchor, 1)] = gt.bbox.cy * n - row as f64;
        v[cfg.coord_index(cell, anchor, 2)] = gt.bbox.w;
        v[cfg.coord_index(cell, anchor, 3)] = gt.bbox.h;
        v[cfg.conf_index(cell, anchor)] = 1.0;

        let slot = cfg.slot(cell, anchor);
        if usable {
            labels[slot] = SlotLabel::Object { gt: gi };
            gt_slots[gi] = Some(slot);
        } else {
            log::debug!("annotation {gi}: every prior of cell {cell} is shielded");
        }
    }

    Ok((target, AnchorAssignment { labels, gt_slots }))
}

/// Target for an empty frame: uniform class rows, centered priors, zero confidence.
fn background_target(cfg: &GridConfig) -> PredictionTensor {
    let mut t = PredictionTensor::zeros(cfg);
    let v = t.values_mut();
    for cell in 0..cfg.num_cells() {
        for c in 0..NUM_CLASSES {
            v[cfg.class_index(cell, c)] = 1.0 / NUM_CLASSES as f64;
        }
        for (a, prior) in cfg.priors().iter().enumerate() {
            v[cfg.coord_index(cell, a, 0)] = 0.5;
            v[cfg.coord_index(cell, a, 1)] = 0.5;
            v[cfg.coord_index(cell, a, 2)] = prior.w.min(1.0);
            v[cfg.coord_index(cell, a, 3)] = prior.h.min(1.0);
        }
    }
    t
}

/// Decodes every slot whose composed score `confidence · p(class)` exceeds `threshold`.
pub fn decode(pred: &PredictionTensor, cfg: &GridConfig, threshold: f64) -> Result<Vec<Detection>> {
    decode_masked(pred, cfg, threshold, None)
}

/// [`decode`] that additionally skips slots flagged in `skip`.
///
/// Output is sorted by score, highest first; equal scores keep slot order.
pub fn decode_masked(
    pred: &PredictionTensor,
    cfg: &GridConfig,
    threshold: f64,
    skip: Option<&ShieldMask>,
) -> Result<Vec<Detection>> {
    pred.check(cfg)?;
    let v = pred.values();
    let mut out = Vec::new();
    for cell in 0..cfg.num_cells() {
        let base = cfg.class_index(cell, 0);
        let row = &v[base..base + NUM_CLASSES];
        let mut class_id = 0;
        for c in 1..NUM_CLASSES {
            if row[c] > row[class_id] {
                class_id = c;
            }
        }
        let p = row[class_id];
        for anchor in 0..NUM_ANCHORS {
            let score = v[cfg.conf_index(cell, anchor)] * p;
            if score > threshold && !skip.is_some_and(|m| m.is_shielded(cfg.slot(cell, anchor))) {
                let ci = cfg.coord_index(cell, anchor, 0);
                let bbox = cfg.box_from_cell(cell, v[ci], v[ci + 1], v[ci + 2], v[ci + 3]);
                out.push(Detection::new(bbox, class_id, score));
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gt(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> GroundTruth {
        GroundTruth::new(BoxCWH::new(cx, cy, w, h), class_id)
    }

    #[test]
    fn tensor_lengths() {
        assert_eq!(GridConfig::new(9).unwrap().tensor_len(), 2916);
        assert_eq!(GridConfig::new(11).unwrap().tensor_len(), 4356);
        assert_eq!(GridConfig::new(13).unwrap().tensor_len(), 6084);
        assert!(GridConfig::new(0).is_err());
    }

    #[test]
    fn center_object_lands_in_center_cell() {
        let cfg = GridConfig::default();
        let (_, asg) = encode(&[gt(0.5, 0.5, 0.2, 0.1, 3)], &cfg).unwrap();
        let slot = asg.gt_slots()[0].unwrap();
        assert_eq!(cfg.cell_rc(cfg.split_slot(slot).0), (4, 4));
    }

    #[test]
    fn wide_object_picks_wide_small_prior() {
        let cfg = GridConfig::default();
        let (cx, cy) = cfg.cell_center(40);
        // area 0.045 is nearer the small trio (0.028, 0.056) than the large trio (0.11, 0.22)
        let g = gt(cx, cy, 0.3, 0.15, 3);
        // brute force over the centered priors
        let ious: Vec<f64> = cfg
            .priors()
            .iter()
            .map(|p| iou(&p.at(cx, cy), &g.bbox, IouVariant::Union))
            .collect();
        let brute = (0..6).fold(0, |best, a| if ious[a] > ious[best] { a } else { best });
        assert_eq!(brute, 2);
        let (_, asg) = encode(&[g], &cfg).unwrap();
        assert_eq!(cfg.split_slot(asg.gt_slots()[0].unwrap()).1, 2);
    }

    #[test]
    fn bad_center_names_the_annotation() {
        let cfg = GridConfig::default();
        let err = encode(
            &[gt(0.5, 0.5, 0.1, 0.1, 0), gt(1.2, 0.5, 0.1, 0.1, 0)],
            &cfg,
        )
        .unwrap_err();
        match err {
            Error::Annotation { index, .. } => assert_eq!(index, 1),
            e => panic!("unexpected {e}"),
        }
        assert!(encode(&[gt(0.5, 0.5, 0.1, 0.1, 6)], &cfg).is_err());
    }

    #[test]
    fn border_coordinate_clamps_into_last_cell() {
        let cfg = GridConfig::default();
        assert_eq!(cfg.cell_of(1.0, 1.0), 80);
        assert_eq!(cfg.cell_of(0.0, 0.0), 0);
        let (t, _) = encode(&[gt(1.0, 1.0, 0.1, 0.1, 0)], &cfg).unwrap();
        let dets = decode(&t, &cfg, 0.5).unwrap();
        assert_eq!(dets.len(), 1);
        assert_relative_eq!(dets[0].bbox.cx, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn crowded_cell_keeps_the_largest() {
        let cfg = GridConfig::default();
        let gts = [gt(0.50, 0.50, 0.1, 0.1, 0), gt(0.52, 0.52, 0.2, 0.2, 1)];
        let (_, asg) = encode(&gts, &cfg).unwrap();
        assert_eq!(asg.gt_slots()[0], None);
        assert!(asg.gt_slots()[1].is_some());
        assert_eq!(asg.object_slots().len(), 1);
    }

    #[test]
    fn decode_composes_scores() {
        let cfg = GridConfig::default();
        let mut t = PredictionTensor::zeros(&cfg);
        let v = t.values_mut();
        v[cfg.class_index(10, 3)] = 0.9;
        v[cfg.class_index(10, 0)] = 0.1;
        v[cfg.conf_index(10, 2)] = 0.8;
        for k in 0..4 {
            v[cfg.coord_index(10, 2, k)] = 0.5;
        }
        let dets = decode(&t, &cfg, 0.5).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 3);
        assert_relative_eq!(dets[0].score, 0.72, epsilon = 1e-15);

        let zero = PredictionTensor::zeros(&cfg);
        assert!(decode(&zero, &cfg, 1e-9).unwrap().is_empty());

        let other = GridConfig::new(11).unwrap();
        assert!(decode(&zero, &other, 0.5).is_err());
    }

    #[test]
    fn decode_orders_ties_by_slot() {
        let cfg = GridConfig::default();
        let mut t = PredictionTensor::zeros(&cfg);
        let v = t.values_mut();
        for (cell, anchor) in [(50, 1), (3, 4), (3, 0)] {
            v[cfg.class_index(cell, 0)] = 1.0;
            v[cfg.conf_index(cell, anchor)] = 0.9;
            v[cfg.coord_index(cell, anchor, 2)] = 0.1;
            v[cfg.coord_index(cell, anchor, 3)] = 0.1;
        }
        let dets = decode(&t, &cfg, 0.5).unwrap();
        let rows: Vec<(f64, f64)> = dets.iter().map(|d| (d.bbox.cy, d.bbox.cx)).collect();
        let mut sorted = rows.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, sorted);
        assert_eq!(dets.len(), 3);
    }

    #[test]
    fn shield_examples() {
        let cfg = GridConfig::default();
        let mask = shield_mask(&cfg);
        assert_eq!(mask.len(), 486);
        assert!(mask.is_shielded(cfg.slot(0, 5)));
        for a in 0..6 {
            assert!(!mask.is_shielded(cfg.slot(40, a)));
        }
        // every border cell is fully shielded: half of the smallest prior exceeds half a cell
        for cell in 0..cfg.num_cells() {
            let (r, c) = cfg.cell_rc(cell);
            if r == 0 || c == 0 || r == 8 || c == 8 {
                assert!((0..6).all(|a| mask.is_shielded(cfg.slot(cell, a))));
            }
        }
    }

    #[test]
    fn encode_avoids_shielded_priors() {
        let cfg = GridConfig::default();
        // truck-like box in column 1: the 4:2 prior is shielded there
        let g = gt(1.5 / 9.0, 0.5, 0.6, 0.3, 4);
        let (_, asg) = encode(&[g], &cfg).unwrap();
        let slot = asg.gt_slots()[0].unwrap();
        assert!(!shield_mask(&cfg).is_shielded(slot));
        assert_eq!(cfg.split_slot(slot).1, 3);
        let (_, raw) = encode_with(&[g], &cfg, None).unwrap();
        assert_eq!(cfg.split_slot(raw.gt_slots()[0].unwrap()).1, 5);
    }

    fn interior_gts(n: usize) -> impl Strategy<Value = Vec<GroundTruth>> {
        let cells = (1..n - 1)
            .flat_map(move |r| (1..n - 1).map(move |c| (r, c)))
            .collect::<Vec<_>>();
        proptest::sample::subsequence(cells, 0..8).prop_flat_map(move |cells| {
            cells
                .into_iter()
                .map(|(r, c)| {
                    (
                        0.0..1.0f64,
                        0.0..1.0f64,
                        0.02..0.6f64,
                        0.02..0.6f64,
                        0..NUM_CLASSES,
                    )
                        .prop_map(move |(fx, fy, w, h, class_id)| {
                            let s = 1.0 / n as f64;
                            gt((c as f64 + fx) * s, (r as f64 + fy) * s, w, h, class_id)
                        })
                })
                .collect::<Vec<_>>()
        })
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(gts in interior_gts(9)) {
            let cfg = GridConfig::default();
            let (t, asg) = encode(&gts, &cfg).unwrap();
            prop_assert_eq!(asg.object_slots().len(), gts.len());
            let mask = shield_mask(&cfg);
            for s in asg.object_slots() {
                prop_assert!(!mask.is_shielded(s));
            }
            let dets = decode(&t, &cfg, 0.5).unwrap();
            prop_assert_eq!(dets.len(), gts.len());
            for g in &gts {
                let hit = dets.iter().any(|d| d.class_id == g.class_id
                    && d.score == 1.0
                    && iou(&d.bbox, &g.bbox, IouVariant::Union) >= 0.999);
                prop_assert!(hit, "lost {:?}", g);
            }
            prop_assert_eq!(decode(&t, &cfg, 0.5).unwrap(), dets);
        }
    }
}

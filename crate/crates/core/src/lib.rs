//! Numerics for a single-shot grid/anchor detector.
//!
//! The crate covers the whole post-backbone path of a detector that splits a
//! frame into `n × n` cells with six anchor priors per cell:
//!
//! - [`geometry`]: box arithmetic, IoU variants, containment, anchor priors
//! - [`gridcodec`]: ground truth ⇄ flat `n·n·36` prediction tensor, shielding
//! - [`loss`]: the compound detection loss and its analytic gradient
//! - [`optim`]: Adam updates and the geometric learning-rate schedule
//! - [`mining`]: online hard-example selection over per-slot losses
//! - [`nms`]: scale-synthesis NMS, its reference oracle, and the anchor competition
//! - [`evalmap`]: greedy matching, all-points AP, mAP reports, throughput bench
//! - [`datagen`]: deterministic synthetic street scenes and annotation files
//! - [`model`]: a tiny two-layer predictor with hand-written backprop and training

pub mod datagen;
pub mod error;
pub mod evalmap;
pub mod geometry;
pub mod gridcodec;
pub mod loss;
pub mod mining;
pub mod model;
pub mod nms;
pub mod optim;

mod numfmt;

pub use error::{Error, Result};
pub use geometry::{anchor_priors, AnchorPrior, BoxCWH, IouVariant};
pub use gridcodec::{
    decode, encode, AnchorAssignment, Detection, GridConfig, GroundTruth, PredictionTensor,
    ShieldMask, SlotLabel,
};
pub use loss::{compound_loss, compound_loss_grad, LossBreakdown, LossConfig};
pub use nms::{competitive_filter, nms_reference_oracle, nms_scale_synthesis, NmsConfig};
pub use optim::{AdamState, LrSchedule};

/// Number of object classes.
pub const NUM_CLASSES: usize = 6;
/// Anchor priors per grid cell.
pub const NUM_ANCHORS: usize = 6;
/// Values predicted per cell: class row, 4 coordinates per anchor, one confidence per anchor.
pub const VALUES_PER_CELL: usize = NUM_CLASSES + 4 * NUM_ANCHORS + NUM_ANCHORS;

/// Class names indexed by class id.
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["pedestrian", "bicycle", "motorcycle", "car", "truck", "bus"];

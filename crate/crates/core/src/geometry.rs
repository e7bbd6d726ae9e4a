//! Bounding-box arithmetic in normalized image coordinates.
//!
//! All boxes are center-format (`cx`, `cy`, `w`, `h`) with every quantity
//! expressed as a fraction of the image side.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, NUM_ANCHORS};

/// Floor for the symmetric-difference denominator.
pub const EPS_AREA: f64 = 1e-12;

/// Center-format box, normalized to the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Which ratio [`iou`] computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum IouVariant {
    /// `I / U`, the usual intersection over union.
    #[default]
    Union,
    /// `I / max(U - I, EPS_AREA)`, intersection over symmetric difference.
    SymmetricDifference,
}

impl BoxCWH {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Builds a box and checks the size and finiteness invariants.
    pub fn try_new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self::new(cx, cy, w, h);
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::Config(format!("box center not finite: {self:?}")));
        }
        if !(self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite()) {
            return Err(Error::Config(format!(
                "box size must be positive and finite: {self:?}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    #[inline]
    pub fn x2(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    #[inline]
    pub fn y1(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    #[inline]
    pub fn y2(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Area computed from the corner coordinates, consistent with [`Self::intersection`].
    #[inline]
    pub fn corner_area(&self) -> f64 {
        (self.x2() - self.x1()) * (self.y2() - self.y1())
    }

    /// Same size, moved to a new center.
    pub fn centered_at(&self, cx: f64, cy: f64) -> Self {
        Self::new(cx, cy, self.w, self.h)
    }

    /// Area of the overlap with `other`, zero when disjoint.
    #[inline]
    pub fn intersection(&self, other: &Self) -> f64 {
        let ow = self.x2().min(other.x2()) - self.x1().max(other.x1());
        let oh = self.y2().min(other.y2()) - self.y1().max(other.y1());
        if ow <= 0.0 || oh <= 0.0 {
            0.0
        } else {
            ow * oh
        }
    }

    /// True when the box lies entirely inside the unit square.
    pub fn inside_unit_square(&self) -> bool {
        self.x1() >= 0.0 && self.y1() >= 0.0 && self.x2() <= 1.0 && self.y2() <= 1.0
    }
}

/// Overlap ratio between two boxes.
///
/// Degenerate denominators are clamped rather than reported, so the result
/// is always finite.
#[inline]
pub fn iou(a: &BoxCWH, b: &BoxCWH, variant: IouVariant) -> f64 {
    // corner extents keep identical boxes at exactly I == U
    let inter = a.intersection(b);
    let union = a.corner_area() + b.corner_area() - inter;
    match variant {
        IouVariant::Union => {
            if union <= 0.0 {
                0.0
            } else {
                (inter / union).clamp(0.0, 1.0)
            }
        }
        IouVariant::SymmetricDifference => inter / (union - inter).max(EPS_AREA),
    }
}

/// Closed containment: every corner of `inner` lies within or on `outer`.
#[inline]
pub fn contains(outer: &BoxCWH, inner: &BoxCWH) -> bool {
    inner.x1() >= outer.x1()
        && inner.x2() <= outer.x2()
        && inner.y1() >= outer.y1()
        && inner.y2() <= outer.y2()
}

/// Aspect tag of an anchor prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatioTag {
    R1x1,
    R1x2,
    R2x1,
    R2x2,
    R2x4,
    R4x2,
}

impl RatioTag {
    pub const ALL: [RatioTag; NUM_ANCHORS] = [
        RatioTag::R1x1,
        RatioTag::R1x2,
        RatioTag::R2x1,
        RatioTag::R2x2,
        RatioTag::R2x4,
        RatioTag::R4x2,
    ];

    /// Width/height of the prior in cell units.
    pub fn cell_extent(self) -> (f64, f64) {
        match self {
            RatioTag::R1x1 => (1.5, 1.5),
            RatioTag::R1x2 => (1.5, 3.0),
            RatioTag::R2x1 => (3.0, 1.5),
            RatioTag::R2x2 => (3.0, 3.0),
            RatioTag::R2x4 => (3.0, 6.0),
            RatioTag::R4x2 => (6.0, 3.0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RatioTag::R1x1 => "1:1",
            RatioTag::R1x2 => "1:2",
            RatioTag::R2x1 => "2:1",
            RatioTag::R2x2 => "2:2",
            RatioTag::R2x4 => "2:4",
            RatioTag::R4x2 => "4:2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPrior {
    pub ratio_tag: RatioTag,
    pub w: f64,
    pub h: f64,
}

impl AnchorPrior {
    /// The prior as a box centered at `(cx, cy)`.
    pub fn at(&self, cx: f64, cy: f64) -> BoxCWH {
        BoxCWH::new(cx, cy, self.w, self.h)
    }
}

/// The six anchor priors for an `n × n` grid, sized in cell units.
///
/// The small trio spans 1.5 cells and the large trio 3 cells on the short side.
pub fn anchor_priors(n: usize) -> Result<[AnchorPrior; NUM_ANCHORS]> {
    if n == 0 {
        return Err(Error::Config("grid size must be at least 1".into()));
    }
    let s = 1.0 / n as f64;
    Ok(RatioTag::ALL.map(|ratio_tag| {
        let (cw, ch) = ratio_tag.cell_extent();
        AnchorPrior {
            ratio_tag,
            w: cw * s,
            h: ch * s,
        }
    }))
}

//! Axis-aligned boxes, IoU and the box regression delta codec.
//!
//! Boxes use continuous corner coordinates: area is `(x2 - x1) * (y2 - y1)`
//! with no "+1" pixel convention.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound applied to `dw`/`dh` before exponentiation in [`decode_delta`].
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

static DECODE_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times [`decode_delta`] had to clamp a size delta since process start.
pub fn decode_clamp_count() -> u64 {
    DECODE_CLAMPS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and inverted corners.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reason = if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            Some("non-finite coordinate")
        } else if self.x1 > self.x2 {
            Some("x1 > x2")
        } else if self.y1 > self.y2 {
            Some("y1 > y2")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
                reason,
            }),
            None => Ok(()),
        }
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Regression target in the R-CNN parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxDelta {
            dx: a[0],
            dy: a[1],
            dw: a[2],
            dh: a[3],
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }
}

/// Intersection over union. Pairs whose union has zero area score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn encode_delta(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if !(wa > 0.0 && ha > 0.0) {
        return Err(Error::DegenerateAnchor { width: wa, height: ha });
    }
    let (cxa, cya) = anchor.center();
    let (cxt, cyt) = target.center();
    Ok(BoxDelta {
        dx: (cxt - cxa) / wa,
        dy: (cyt - cya) / ha,
        dw: (target.width() / wa).ln(),
        dh: (target.height() / ha).ln(),
    })
}

/// Applies a delta to an anchor. Size deltas above [`DELTA_CLAMP`] are clamped
/// and counted (see [`decode_clamp_count`]).
pub fn decode_delta(anchor: &BBox, d: &BoxDelta) -> BBox {
    let (wa, ha) = (anchor.width(), anchor.height());
    let (cxa, cya) = anchor.center();
    let mut dw = d.dw;
    let mut dh = d.dh;
    if dw > DELTA_CLAMP || dh > DELTA_CLAMP {
        DECODE_CLAMPS.fetch_add(1, Ordering::Relaxed);
        dw = dw.min(DELTA_CLAMP);
        dh = dh.min(DELTA_CLAMP);
    }
    let cx = cxa + d.dx * wa;
    let cy = cya + d.dy * ha;
    BBox::from_center(cx, cy, wa * dw.exp(), ha * dh.exp())
}

pub fn clip(b: &BBox, width: f64, height: f64) -> BBox {
    let x1 = b.x1.clamp(0.0, width);
    let y1 = b.y1.clamp(0.0, height);
    BBox {
        x1,
        y1,
        x2: b.x2.clamp(0.0, width).max(x1),
        y2: b.y2.clamp(0.0, height).max(y1),
    }
}

//! Box algebra shared by every stage of the detector.
//!
//! Boxes use the corner convention `(x1, y1, x2, y2)` in pixels. COCO's
//! `(x, y, w, h)` is converted at the data boundary via [`BBox::from_xywh`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound applied to `dw`/`dh` before exponentiation, `ln(1000 / 16)`.
pub fn default_delta_clamp() -> f64 {
    (1000.0f64 / 16.0).ln()
}

/// Axis-aligned box in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and empty extents.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(format!("{:?}", [x1, y1, x2, y2])))
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_valid(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Area, zero for inverted boxes.
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clamps the corners into `[0, width] x [0, height]`. The result can be
    /// empty when the box lies entirely outside the image.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`, zero when the boxes do
/// not overlap or the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Regression offsets of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        BoxDelta { dx, dy, dw, dh }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxDelta::new(v[0], v[1], v[2], v[3])
    }
}

/// Center/size parameterization of `target` relative to `anchor`.
pub fn encode_delta(target: &BBox, anchor: &BBox) -> Result<BoxDelta> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(Error::DegenerateAnchor(anchor.as_array()));
    }
    let (tw, th) = (target.width(), target.height());
    if !(tw > 0.0 && th > 0.0) {
        return Err(Error::InvalidBox(format!("{:?}", target.as_array())));
    }
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    Ok(BoxDelta {
        dx: (tcx - acx) / aw,
        dy: (tcy - acy) / ah,
        dw: (tw / aw).ln(),
        dh: (th / ah).ln(),
    })
}

/// Inverse of [`encode_delta`]; `dw`/`dh` are clamped to `max_log_scale`
/// before exponentiation so the result stays finite.
pub fn decode_delta(anchor: &BBox, delta: &BoxDelta, max_log_scale: f64) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let cx = acx + delta.dx * aw;
    let cy = acy + delta.dy * ah;
    let w = aw * delta.dw.min(max_log_scale).exp();
    let h = ah * delta.dh.min(max_log_scale).exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// A scored, categorized box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: u32,
    pub score: f64,
}

/// Indices of `scores` in descending order; equal scores keep input order.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy class-agnostic suppression. Returns kept indices sorted by
/// descending score.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let order = argsort_desc(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Per-category greedy NMS: a detection is only suppressed by a
/// higher-ranked detection of the same category.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = argsort_desc(&scores);
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let clash = kept
            .iter()
            .any(|k| k.category == d.category && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !clash {
            kept.push(*d);
        }
    }
    kept
}

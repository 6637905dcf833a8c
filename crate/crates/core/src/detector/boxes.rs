//! Box geometry, grid-cell box parameterization and non-maximum suppression.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized image coordinates (center, size).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Box clipped to the unit square.
    pub fn clipped(&self) -> Self {
        let (x1, y1, x2, y2) = self.corners();
        Self::from_corners(
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
            x2.clamp(0.0, 1.0),
            y2.clamp(0.0, 1.0),
        )
    }

    /// Center inside the unit square and positive size no larger than it.
    pub fn is_valid(&self) -> bool {
        let finite = [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        finite
            && (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }

    pub fn max_side(&self) -> f64 {
        self.w.max(self.h)
    }

    pub fn hflip(&self) -> Self {
        Self {
            cx: 1.0 - self.cx,
            ..*self
        }
    }
}

/// Intersection over union; zero when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A predicted object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// A ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Multiple of the stride reached by a box side when its size logit is zero.
pub const SIZE_PRIOR: f64 = 2.0;

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Decodes one cell's regressors `(tx, ty, tw, th)`.
///
/// Center: `(col + 2σ(tx) − 0.5) · stride`; size: `(2σ(tw))² · SIZE_PRIOR · stride`,
/// both divided by the input size. The result is not clipped.
pub fn decode_cell(t: [f64; 4], col: usize, row: usize, stride: usize, input_size: usize) -> BBox {
    let s = stride as f64 / input_size as f64;
    let size = |v: f64| (2.0 * sigmoid(v)).powi(2) * SIZE_PRIOR * s;
    BBox {
        cx: (col as f64 + 2.0 * sigmoid(t[0]) - 0.5) * s,
        cy: (row as f64 + 2.0 * sigmoid(t[1]) - 0.5) * s,
        w: size(t[2]),
        h: size(t[3]),
    }
}

/// Inverse of [`decode_cell`]; `None` when the box is not representable from that cell.
pub fn encode_cell(
    b: &BBox,
    col: usize,
    row: usize,
    stride: usize,
    input_size: usize,
) -> Option<[f64; 4]> {
    let s = stride as f64 / input_size as f64;
    let offset = |c: f64, cell: usize| {
        let p = (c / s - cell as f64 + 0.5) / 2.0;
        (p > 0.0 && p < 1.0).then(|| logit(p))
    };
    let size = |v: f64| {
        let p = (v / (SIZE_PRIOR * s)).sqrt() / 2.0;
        (p > 0.0 && p < 1.0).then(|| logit(p))
    };
    Some([
        offset(b.cx, col)?,
        offset(b.cy, row)?,
        size(b.w)?,
        size(b.h)?,
    ])
}

/// Per-class greedy suppression: boxes are visited by descending score and a
/// box is dropped when it overlaps an already-kept box of its class by more
/// than `iou_thresh`. Ties keep insertion order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

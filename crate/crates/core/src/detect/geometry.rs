use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Largest allowed `dw`/`dh` before exponentiation, so decoded boxes stay finite.
pub const DELTA_LOG_CLIP: f32 = 4.135_166_6; // ln(1000 / 16)

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Result<Self> {
        ensure!(
            x_min <= x_max && y_min <= y_max,
            "BBox::new",
            "corners out of order: ({}, {}) - ({}, {})",
            x_min,
            y_min,
            x_max,
            y_max
        );
        Ok(BBox { x_min, y_min, x_max, y_max })
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Clamps the box to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f32, height: f32) -> BBox {
        BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }

    pub fn scaled(&self, sx: f32, sy: f32) -> BBox {
        BBox {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
        }
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Center/size regression targets of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta4 {
    pub dx: f32,
    pub dy: f32,
    pub dw: f32,
    pub dh: f32,
}

impl Delta4 {
    pub fn to_array(self) -> [f32; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }
}

fn check_anchor(op: &'static str, anchor: &BBox) -> Result<()> {
    ensure!(
        anchor.width() > 0.0 && anchor.height() > 0.0,
        op,
        "anchor {:?} has zero extent",
        anchor
    );
    Ok(())
}

pub fn encode_deltas(anchor: &BBox, gt: &BBox) -> Result<Delta4> {
    check_anchor("encode_deltas", anchor)?;
    ensure!(
        gt.width() > 0.0 && gt.height() > 0.0,
        "encode_deltas",
        "ground truth {:?} has zero extent",
        gt
    );
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(Delta4 {
        dx: (gx - ax) / aw,
        dy: (gy - ay) / ah,
        dw: (gt.width() / aw).ln(),
        dh: (gt.height() / ah).ln(),
    })
}

pub fn decode_deltas(anchor: &BBox, d: &Delta4) -> Result<BBox> {
    check_anchor("decode_deltas", anchor)?;
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + d.dx * aw;
    let cy = ay + d.dy * ah;
    let w = aw * d.dw.min(DELTA_LOG_CLIP).exp();
    let h = ah * d.dh.min(DELTA_LOG_CLIP).exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

/// A scored region, optionally with a per-pixel iris probability grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub objectness: f32,
    pub mask: Option<Tensor>,
}

/// Greedy non-maximum suppression. Keeps the highest-scoring remaining
/// detection and drops every other one whose IoU with it exceeds `iou_thresh`.
/// Ties in score are broken by input position. Output is in descending score order.
pub fn nms(detections: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .objectness
            .total_cmp(&detections[a].objectness)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(&detections[k].bbox, &detections[i].bbox) <= iou_thresh)
        {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| detections[i].clone()).collect()
}

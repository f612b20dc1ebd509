use serde::{Deserialize, Serialize};

/// Axis-aligned box in input pixels, `(x1, y1)` top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Upper bound on predicted log-scale deltas.
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn clip(&self, h: f64, w: f64) -> BBox {
        BBox::new(self.x1.clamp(0.0, w), self.y1.clamp(0.0, h), self.x2.clamp(0.0, w), self.y2.clamp(0.0, h))
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `[a.len(), b.len()]` IoU matrix, row-major.
pub fn iou_matrix(a: &[BBox], b: &[BBox]) -> Vec<f64> {
    a.iter().flat_map(|x| b.iter().map(move |y| iou(x, y))).collect()
}

/// Regression targets `(dx, dy, dw, dh)` taking `reference` to `target`.
pub fn encode(target: &BBox, reference: &BBox, weights: [f64; 4]) -> [f64; 4] {
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let (tx, ty) = target.center();
    [
        weights[0] * (tx - rx) / rw,
        weights[1] * (ty - ry) / rh,
        weights[2] * (target.width() / rw).ln(),
        weights[3] * (target.height() / rh).ln(),
    ]
}

/// Inverse of [`encode`]; log-scale deltas are clamped at [`DELTA_CLAMP`].
pub fn decode(deltas: [f64; 4], reference: &BBox, weights: [f64; 4]) -> BBox {
    let (rw, rh) = (reference.width(), reference.height());
    let (rx, ry) = reference.center();
    let dx = deltas[0] / weights[0];
    let dy = deltas[1] / weights[1];
    let dw = (deltas[2] / weights[2]).min(DELTA_CLAMP);
    let dh = (deltas[3] / weights[3]).min(DELTA_CLAMP);
    let (cx, cy) = (rx + dx * rw, ry + dy * rh);
    let (w, h) = (rw * dw.exp(), rh * dh.exp());
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

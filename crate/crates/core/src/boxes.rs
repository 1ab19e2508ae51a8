//! Axis-aligned boxes in normalised centre format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A box `(cx, cy, w, h)`; coordinates are fractions of the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Build from corner coordinates `(x0, y0, x1, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn corners(self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    pub fn validate(self) -> Result<()> {
        let finite = self.to_array().iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "({}, {}, {}, {}) needs finite values and positive size",
                self.cx, self.cy, self.w, self.h
            )));
        }
        Ok(())
    }

    /// Whether `(x, y)` lies in the closed box.
    pub fn contains(self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }
}

/// Intersection over union. Both boxes need positive width and height.
pub fn box_iou(a: BBox, b: BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Generalised IoU: IoU minus the share of the enclosing box not covered by the union.
pub fn box_giou(a: BBox, b: BBox) -> Result<f64> {
    let iou = box_iou(a, b)?;
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let union = a.area() + b.area() - iw * ih;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    Ok(iou - (hull - union) / hull)
}

/// Centres of the cells of an `h × w` grid, row-major, in normalised coordinates.
pub fn cell_centers(h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64));
        }
    }
    out
}

/// Row-major index of the grid cell containing `(x, y)`.
pub fn cell_at(h: usize, w: usize, x: f64, y: f64) -> usize {
    let c = ((x * w as f64).floor().max(0.0) as usize).min(w - 1);
    let r = ((y * h as f64).floor().max(0.0) as usize).min(h - 1);
    r * w + c
}

/// Cells whose centres lie inside `b`; falls back to the cell holding the
/// box centre when none do. The flag reports whether the fallback was used.
pub fn covered_cells(h: usize, w: usize, b: BBox) -> (Vec<usize>, bool) {
    let cells: Vec<usize> = if b.w > 0.0 && b.h > 0.0 && b.to_array().iter().all(|v| v.is_finite()) {
        cell_centers(h, w)
            .into_iter()
            .enumerate()
            .filter(|&(_, (x, y))| b.contains(x, y))
            .map(|(i, _)| i)
            .collect()
    } else {
        Vec::new()
    };
    if cells.is_empty() {
        let (x, y) = if b.cx.is_finite() && b.cy.is_finite() {
            (b.cx, b.cy)
        } else {
            (0.5, 0.5)
        };
        (vec![cell_at(h, w, x, y)], true)
    } else {
        (cells, false)
    }
}

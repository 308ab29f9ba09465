//! Box decoding from raw regression maps, IOU and greedy NMS.
//!
//! Every grid cell carries one prediction anchored at the cell centre
//! `(col + 0.5, row + 0.5)`. Offsets are decoded either with the legacy
//! sigmoid rule, which pins the centre inside `(0, 1)` of the anchor, or with
//! the boundary-aware rule `(sigmoid(r) - 0.5) * h`, which reaches `±h/2`.

use alloc::vec::Vec;

use crate::error::{invalid, shape_err};
use crate::numerics::{sigmoid_f64, Grid};
use crate::{Error, Result};

/// Default foreground score threshold for NMS.
pub const DEFAULT_SCORE_THR: f32 = 0.5;
/// Default NMS overlap threshold.
pub const DEFAULT_IOU_THR: f32 = 0.45;
/// Initial value of the boundary-aware scale.
pub const DEFAULT_H_SCALE: f32 = 10.0;

/// Axis-aligned box in feature-map cells, centre format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub score: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32, score: f32) -> Self {
        Self { cx, cy, w, h, score }
    }

    /// Builds a box from its top-left corner.
    pub fn from_corner(x: f32, y: f32, w: f32, h: f32, score: f32) -> Self {
        Self::new(x + w / 2.0, y + h / 2.0, w, h, score)
    }

    pub fn with_score(self, score: f32) -> Self {
        Self { score, ..self }
    }

    pub fn left(&self) -> f64 {
        f64::from(self.cx) - f64::from(self.w) / 2.0
    }

    pub fn top(&self) -> f64 {
        f64::from(self.cy) - f64::from(self.h) / 2.0
    }

    pub fn area(&self) -> f64 {
        f64::from(self.w) * f64::from(self.h)
    }

    /// Grid cell containing the centre, clamped into a `height × width` grid.
    pub fn center_cell(&self, height: usize, width: usize) -> (usize, usize) {
        let clamp = |v: f32, n: usize| -> usize {
            let f = libm::floorf(v);
            if f < 0.0 {
                0
            } else {
                (f as usize).min(n.saturating_sub(1))
            }
        };
        (clamp(self.cy, height), clamp(self.cx, width))
    }
}

/// Learnable scale of the boundary-aware offset decode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarParams {
    h_scale: f32,
}

impl BarParams {
    pub fn new(h_scale: f32) -> Result<Self> {
        if !(h_scale > 0.0 && h_scale.is_finite()) {
            return Err(invalid!("h_scale must be positive, got {}", h_scale));
        }
        Ok(Self { h_scale })
    }

    pub fn h_scale(&self) -> f32 {
        self.h_scale
    }
}

impl Default for BarParams {
    fn default() -> Self {
        Self {
            h_scale: DEFAULT_H_SCALE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    Sigmoid,
    #[default]
    Bar,
}

pub fn decode_offset_sigmoid(raw: (f32, f32)) -> (f32, f32) {
    (
        sigmoid_f64(f64::from(raw.0)) as f32,
        sigmoid_f64(f64::from(raw.1)) as f32,
    )
}

pub fn decode_offset_bar(raw: (f32, f32), p: BarParams) -> (f32, f32) {
    let h = f64::from(p.h_scale);
    let f = |r: f32| ((sigmoid_f64(f64::from(r)) - 0.5) * h) as f32;
    (f(raw.0), f(raw.1))
}

/// Raw value whose boundary-aware decode is `offset`. Returns `None` when
/// `|offset| >= h/2`, which the decode cannot represent.
pub fn encode_offset_bar(offset: f64, p: BarParams) -> Option<f32> {
    let s = offset / f64::from(p.h_scale) + 0.5;
    if s <= 0.0 || s >= 1.0 {
        return None;
    }
    let raw = libm::log(s / (1.0 - s));
    raw.is_finite().then_some(raw as f32)
}

/// Decodes one box per cell, row-major. `raw` holds
/// `(raw_dx, raw_dy, raw_logw, raw_logh)` per cell; the score is `prob`.
pub fn decode_boxes(prob: &Grid, raw: &Grid, mode: DecodeMode, p: BarParams) -> Result<Vec<BBox>> {
    if prob.channels() != 1 || raw.channels() != 4 || !prob.same_spatial(raw) {
        return Err(shape_err!(
            "decode needs HxWx1 prob and HxWx4 boxes, got {}x{}x{} and {}x{}x{}",
            prob.height(),
            prob.width(),
            prob.channels(),
            raw.height(),
            raw.width(),
            raw.channels()
        ));
    }
    if !prob.is_finite() || !raw.is_finite() {
        return Err(Error::NonFinite("detection maps"));
    }
    let mut out = Vec::with_capacity(prob.cells());
    for row in 0..prob.height() {
        for col in 0..prob.width() {
            let r = raw.cell(row, col);
            let (dx, dy) = match mode {
                DecodeMode::Sigmoid => decode_offset_sigmoid((r[0], r[1])),
                DecodeMode::Bar => decode_offset_bar((r[0], r[1]), p),
            };
            out.push(BBox {
                cx: col as f32 + 0.5 + dx,
                cy: row as f32 + 0.5 + dy,
                w: libm::exp(f64::from(r[2])) as f32,
                h: libm::exp(f64::from(r[3])) as f32,
                score: prob.get(row, col, 0).clamp(0.0, 1.0),
            });
        }
    }
    Ok(out)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.left() + f64::from(a.w)).min(b.left() + f64::from(b.w)) - a.left().max(b.left());
    let iy = (a.top() + f64::from(a.h)).min(b.top() + f64::from(b.h)) - a.top().max(b.top());
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices kept by greedy NMS, in descending score order. Equal scores keep
/// input order.
pub fn greedy_nms_indices(boxes: &[BBox], score_thr: f32, iou_thr: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len())
        .filter(|&i| boxes[i].score >= score_thr)
        .collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let mut suppressed = alloc::vec![false; order.len()];
    let mut keep = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        let kept = &boxes[order[i]];
        keep.push(order[i]);
        for j in i + 1..order.len() {
            if !suppressed[j] && iou(kept, &boxes[order[j]]) > f64::from(iou_thr) {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn greedy_nms(boxes: &[BBox], score_thr: f32, iou_thr: f32) -> Vec<BBox> {
    greedy_nms_indices(boxes, score_thr, iou_thr)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}

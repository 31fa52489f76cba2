//! Box arithmetic: overlap, anchors, the offset parameterization between a
//! reference box and a target, anchor labeling and spatial descriptors.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Largest magnitude allowed for a log-scale offset when decoding.
pub const LOG_CLAMP: f64 = 6.0;
/// Smallest side length a clipped box may have, in pixels.
pub const MIN_SIDE: f64 = 1.0;

/// Axis-aligned box in pixel coordinates, stored in corner form.
///
/// Serializes as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if !(x2 > x1 && y2 > y1) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "non-positive box size {w}x{h}");
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    pub fn cx(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn cy(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    pub fn w(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn h(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.w() * self.h()
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn center_form(&self) -> [f64; 4] {
        [self.cx(), self.cy(), self.w(), self.h()]
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Clamps to `[0, img_w] x [0, img_h]`. A box that collapses below
    /// [`MIN_SIDE`] is widened around its clamped center.
    pub fn clip(&self, img_w: f64, img_h: f64) -> BBox {
        let (x1, x2) = clip_span(self.x1, self.x2, img_w);
        let (y1, y2) = clip_span(self.y1, self.y2, img_h);
        BBox { x1, y1, x2, y2 }
    }

    pub fn is_within(&self, img_w: f64, img_h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= img_w && self.y2 <= img_h
    }
}

fn clip_span(lo: f64, hi: f64, limit: f64) -> (f64, f64) {
    let a = lo.clamp(0.0, limit);
    let b = hi.clamp(0.0, limit);
    if b - a >= MIN_SIDE {
        return (a, b);
    }
    let side = MIN_SIDE.min(limit);
    let mid = (0.5 * (a + b)).clamp(0.5 * side, limit - 0.5 * side);
    (mid - 0.5 * side, mid + 0.5 * side)
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.corners().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        BBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Offsets `(dx/w_a, dy/h_a, ln(w/w_a), ln(h/h_a))` of a target relative to a reference box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegressionCode(pub [f64; 4]);

pub fn encode_regression(anchor: &BBox, target: &BBox) -> RegressionCode {
    RegressionCode([
        (target.cx() - anchor.cx()) / anchor.w(),
        (target.cy() - anchor.cy()) / anchor.h(),
        (target.w() / anchor.w()).ln(),
        (target.h() / anchor.h()).ln(),
    ])
}

/// Inverse of [`encode_regression`]; log-scale offsets are clamped to ±[`LOG_CLAMP`].
pub fn decode_regression(anchor: &BBox, t: &RegressionCode) -> BBox {
    let [dx, dy, dw, dh] = t.0;
    let cx = dx * anchor.w() + anchor.cx();
    let cy = dy * anchor.h() + anchor.cy();
    let w = anchor.w() * dw.clamp(-LOG_CLAMP, LOG_CLAMP).exp();
    let h = anchor.h() * dh.clamp(-LOG_CLAMP, LOG_CLAMP).exp();
    BBox::from_center(cx, cy, w, h)
}

/// One anchor per (cell, scale, ratio), in row-major cell order, then scale, then ratio.
///
/// Each anchor is centered on its cell, has area `scale^2` and `w / h = ratio`.
pub fn generate_anchors(
    grid_h: usize,
    grid_w: usize,
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
) -> Result<Vec<BBox>> {
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::Config(
            "anchor scales and ratios must be non-empty".into(),
        ));
    }
    if scales.iter().chain(ratios).any(|&v| !(v > 0.0)) {
        return Err(Error::Config(
            "anchor scales and ratios must be positive".into(),
        ));
    }
    let mut anchors = Vec::with_capacity(grid_h * grid_w * scales.len() * ratios.len());
    for r in 0..grid_h {
        for c in 0..grid_w {
            let cx = (c as f64 + 0.5) * stride;
            let cy = (r as f64 + 0.5) * stride;
            for &s in scales {
                for &ratio in ratios {
                    let root = ratio.sqrt();
                    anchors.push(BBox::from_center(cx, cy, s * root, s / root));
                }
            }
        }
    }
    Ok(anchors)
}

/// Anchor layout over a feature grid with a fixed pixel stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub stride: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            stride: 8.0,
            scales: vec![16.0, 32.0, 48.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn grid(&self, img_w: f64, img_h: f64) -> (usize, usize) {
        (
            (img_h / self.stride).round() as usize,
            (img_w / self.stride).round() as usize,
        )
    }

    pub fn anchors(&self, img_w: f64, img_h: f64) -> Result<Vec<BBox>> {
        let (gh, gw) = self.grid(img_w, img_h);
        generate_anchors(gh, gw, self.stride, &self.scales, &self.ratios)
    }
}

pub const POSITIVE_IOU: f64 = 0.7;
pub const NEGATIVE_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive(_))
    }
}

/// Labels anchors against ground-truth boxes: IoU above 0.7 is positive, below
/// 0.3 negative, otherwise ignored. Each ground truth additionally claims its
/// single best-overlapping anchor (lowest index on ties), so every box that
/// overlaps any anchor has at least one positive.
pub fn label_anchors(anchors: &[BBox], gts: &[BBox]) -> Vec<AnchorLabel> {
    let mut labels = Vec::with_capacity(anchors.len());
    let mut best_for_gt = vec![(usize::MAX, 0.0f64); gts.len()];
    let mut best_iou = Vec::with_capacity(anchors.len());
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = (0usize, 0.0f64);
        for (gi, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best.1 {
                best = (gi, v);
            }
            if v > best_for_gt[gi].1 {
                best_for_gt[gi] = (ai, v);
            }
        }
        best_iou.push(best.1);
        labels.push(if best.1 > POSITIVE_IOU {
            AnchorLabel::Positive(best.0)
        } else if best.1 < NEGATIVE_IOU {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        });
    }
    for (gi, &(ai, v)) in best_for_gt.iter().enumerate() {
        if ai == usize::MAX {
            continue;
        }
        // An anchor that is best for several boxes keeps the one it overlaps most.
        let keep_existing = match labels[ai] {
            AnchorLabel::Positive(other) if other != gi => iou(&anchors[ai], &gts[other]) >= v,
            _ => false,
        };
        if !keep_existing {
            labels[ai] = AnchorLabel::Positive(gi);
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    /// `[x1/W, y1/H, x2/W, y2/H, wh/WH]`
    FiveD,
    /// `[x_min, y_min, x_max, y_max, x_center, y_center, w, h]`, each over the image size.
    EightD,
}

impl SpatialMode {
    pub fn dim(self) -> usize {
        match self {
            SpatialMode::FiveD => 5,
            SpatialMode::EightD => 8,
        }
    }
}

/// Normalized spatial descriptor of a box (clipped to the image first).
pub fn spatial_augment(b: &BBox, img_w: f64, img_h: f64, mode: SpatialMode) -> Vec<f64> {
    let b = b.clip(img_w, img_h);
    match mode {
        SpatialMode::FiveD => vec![
            b.x1 / img_w,
            b.y1 / img_h,
            b.x2 / img_w,
            b.y2 / img_h,
            b.area() / (img_w * img_h),
        ],
        SpatialMode::EightD => vec![
            b.x1 / img_w,
            b.y1 / img_h,
            b.x2 / img_w,
            b.y2 / img_h,
            b.cx() / img_w,
            b.cy() / img_h,
            b.w() / img_w,
            b.h() / img_h,
        ],
    }
}

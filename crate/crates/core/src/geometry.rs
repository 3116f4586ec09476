//! Axis-aligned box arithmetic.
//!
//! Every box in the engine is stored as `(x_min, y_min, width, height)` in
//! pixels and serialized as `{x, y, w, h}`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest side length a decoded or clipped box may have.
pub const MIN_BOX_SIDE: f64 = 1e-6;

/// Log-size deltas are clamped to this magnitude before exponentiation.
const MAX_LOG_DELTA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        BoundingBox::new(r.x, r.y, r.w, r.h)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox {
            x: b.x_min,
            y: b.y_min,
            w: b.width,
            h: b.height,
        }
    }
}

impl BoundingBox {
    /// Checked constructor: sizes must be positive and every coordinate finite.
    pub fn new(x_min: f64, y_min: f64, width: f64, height: f64) -> Result<Self> {
        if !(x_min.is_finite() && y_min.is_finite() && width.is_finite() && height.is_finite()) {
            return Err(Error::NonFinite("bounding box"));
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "box size must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            width,
            height,
        })
    }

    pub fn from_corners(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        Self::new(x_min, y_min, x_max - x_min, y_max - y_min)
    }

    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(cx - width / 2.0, cy - height / 2.0, width, height)
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.width
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.height
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x_min + self.width / 2.0,
            self.y_min + self.height / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max().min(other.x_max()) - self.x_min.max(other.x_min);
        let h = self.y_max().min(other.y_max()) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            ..*self
        }
    }

    /// True when the box lies inside `[0, w] x [0, h]` up to `tol` pixels.
    pub fn within_frame(&self, frame_w: f64, frame_h: f64, tol: f64) -> bool {
        self.x_min >= -tol
            && self.y_min >= -tol
            && self.x_max() <= frame_w + tol
            && self.y_max() <= frame_h + tol
    }
}

/// A ground-truth or pseudo-label annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    #[serde(rename = "class")]
    pub class_id: usize,
}

impl LabeledBox {
    pub fn new(bbox: BoundingBox, class_id: usize) -> Self {
        Self { bbox, class_id }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

/// Center/log-size regression target between a proposal and a target box.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dw: a[2],
            dh: a[3],
        }
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy class-wise non-maximum suppression.
///
/// Detections are visited in descending score order (ties keep input order);
/// a detection is dropped when it overlaps an already kept detection of the
/// same class by more than `iou_thresh`. The result is sorted by descending
/// score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| by_score_desc(&dets[i], &dets[j]).then(i.cmp(&j)));

    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

pub(crate) fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

pub fn encode_deltas(proposal: &BoundingBox, target: &BoundingBox) -> BoxDelta {
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    BoxDelta {
        dx: (tcx - pcx) / proposal.width,
        dy: (tcy - pcy) / proposal.height,
        dw: (target.width / proposal.width).ln(),
        dh: (target.height / proposal.height).ln(),
    }
}

pub fn apply_deltas(proposal: &BoundingBox, d: &BoxDelta) -> BoundingBox {
    let (pcx, pcy) = proposal.center();
    let cx = pcx + d.dx * proposal.width;
    let cy = pcy + d.dy * proposal.height;
    let w = (proposal.width * d.dw.clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp()).max(MIN_BOX_SIDE);
    let h = (proposal.height * d.dh.clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp()).max(MIN_BOX_SIDE);
    BoundingBox {
        x_min: cx - w / 2.0,
        y_min: cy - h / 2.0,
        width: w,
        height: h,
    }
}

/// Intersects `bbox` with the frame `[0, frame_w] x [0, frame_h]`.
///
/// A box with no overlap collapses to a 1x1 box in the frame corner nearest
/// to its center.
pub fn clip_box(bbox: &BoundingBox, frame_w: f64, frame_h: f64) -> BoundingBox {
    let x0 = bbox.x_min.max(0.0);
    let y0 = bbox.y_min.max(0.0);
    let x1 = bbox.x_max().min(frame_w);
    let y1 = bbox.y_max().min(frame_h);
    if x1 > x0 && y1 > y0 {
        return BoundingBox {
            x_min: x0,
            y_min: y0,
            width: x1 - x0,
            height: y1 - y0,
        };
    }
    let (cx, cy) = bbox.center();
    let side_w = frame_w.min(1.0);
    let side_h = frame_h.min(1.0);
    let x = if cx < frame_w / 2.0 {
        0.0
    } else {
        frame_w - side_w
    };
    let y = if cy < frame_h / 2.0 {
        0.0
    } else {
        frame_h - side_h
    };
    BoundingBox {
        x_min: x,
        y_min: y,
        width: side_w,
        height: side_h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn det(b: BoundingBox, class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: b,
            class_id,
            score,
        }
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 5.0, 5.0)), 0.0);
        // 50 / 150
        assert!((iou(&a, &bx(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constructor_rejects_degenerate_boxes() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn nms_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let single = vec![det(a, 0, 0.4)];
        assert_eq!(nms(&single, 0.3), single);

        let same = vec![det(a, 0, 0.8), det(a, 0, 0.9)];
        let kept = nms(&same, 0.3);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let cross = vec![det(a, 0, 0.9), det(a, 1, 0.8)];
        assert_eq!(nms(&cross, 0.3).len(), 2);

        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn delta_cases() {
        let p = bx(5.0, 5.0, 10.0, 10.0);
        assert_eq!(encode_deltas(&p, &p), BoxDelta::default());
        assert_eq!(apply_deltas(&p, &BoxDelta::default()), p);

        // target center (12, 10), size (20, 10)
        let t = BoundingBox::from_center(12.0, 10.0, 20.0, 10.0).unwrap();
        let d = encode_deltas(&p, &t);
        assert!((d.dx - 0.2).abs() < 1e-12);
        assert!(d.dy.abs() < 1e-12);
        assert!((d.dw - 2f64.ln()).abs() < 1e-12);
        assert!(d.dh.abs() < 1e-12);

        let decoded = apply_deltas(
            &p,
            &BoxDelta {
                dx: 0.2,
                dy: 0.0,
                dw: 2f64.ln(),
                dh: 0.0,
            },
        );
        let (cx, cy) = decoded.center();
        assert!((cx - 12.0).abs() < 1e-9 && (cy - 10.0).abs() < 1e-9);
        assert!((decoded.width - 20.0).abs() < 1e-9 && (decoded.height - 10.0).abs() < 1e-9);
    }

    #[test]
    fn clip_cases() {
        let inside = bx(10.0, 10.0, 20.0, 20.0);
        assert_eq!(clip_box(&inside, 100.0, 100.0), inside);
        assert_eq!(
            clip_box(&bx(-5.0, 0.0, 10.0, 10.0), 100.0, 100.0),
            bx(0.0, 0.0, 5.0, 10.0)
        );
        assert_eq!(
            clip_box(&bx(150.0, -40.0, 10.0, 10.0), 100.0, 100.0),
            bx(99.0, 0.0, 1.0, 1.0)
        );
        assert_eq!(
            clip_box(&bx(-50.0, 300.0, 10.0, 10.0), 100.0, 100.0),
            bx(0.0, 99.0, 1.0, 1.0)
        );
    }

    #[test]
    fn serde_uses_short_keys() {
        let lb = LabeledBox::new(bx(1.0, 2.0, 3.0, 4.0), 7);
        let json = serde_json::to_string(&lb).unwrap();
        assert_eq!(json, r#"{"x":1.0,"y":2.0,"w":3.0,"h":4.0,"class":7}"#);
        let back: LabeledBox = serde_json::from_str(&json).unwrap();
        assert_eq!(back, lb);
        assert!(serde_json::from_str::<BoundingBox>(r#"{"x":0,"y":0,"w":0,"h":1}"#).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0..150.0f64, -50.0..150.0f64, 0.5..80.0f64, 0.5..80.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((ab - iou(&b, &a)).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
            if a != b {
                prop_assert!(ab < 1.0);
            }
        }

        #[test]
        fn encode_apply_round_trip(p in arb_box(), t in arb_box()) {
            let back = apply_deltas(&p, &encode_deltas(&p, &t));
            prop_assert!((back.x_min - t.x_min).abs() < 1e-9);
            prop_assert!((back.y_min - t.y_min).abs() < 1e-9);
            prop_assert!((back.width - t.width).abs() < 1e-9);
            prop_assert!((back.height - t.height).abs() < 1e-9);
        }

        #[test]
        fn nms_output_is_suppressed_subset(
            boxes in proptest::collection::vec((arb_box(), 0usize..3, 0.0..1.0f64), 0..30),
            thresh in 0.05..0.95f64,
        ) {
            let dets: Vec<Detection> = boxes.into_iter().map(|(b, c, s)| det(b, c, s)).collect();
            let kept = nms(&dets, thresh);
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    if a.class_id == b.class_id {
                        prop_assert!(iou(&a.bbox, &b.bbox) <= thresh);
                        prop_assert!(a.score >= b.score);
                    }
                }
            }
        }

        #[test]
        fn clipped_box_is_inside(b in arb_box()) {
            let c = clip_box(&b, 100.0, 80.0);
            prop_assert!(c.within_frame(100.0, 80.0, 1e-9));
            prop_assert!(c.width > 0.0 && c.height > 0.0);
        }
    }
}

//! Axis-aligned boxes, proposal-relative delta encoding, IoU and greedy NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default bound applied to the log-scale size offsets before exponentiation.
pub const DEFAULT_DELTA_CLAMP: f64 = 4.0;

/// Smallest extent a decoded box is allowed to collapse to when clipped.
const MIN_EXTENT: f64 = 1e-6;

/// Corner-form box `(x1, y1, x2, y2)` in pixels.
///
/// A `BBox` can only be built through [`BBox::new`], which rejects degenerate
/// or non-finite extents, so every value in circulation is valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Square root of the area, the per-object "scale".
    pub fn scale(&self) -> f64 {
        self.area().sqrt()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clip to `[0, width] x [0, height]`, keeping at least a tiny positive extent.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let clamp_axis = |lo: f64, hi: f64, limit: f64| {
            let mut a = lo.clamp(0.0, limit);
            let mut b = hi.clamp(0.0, limit);
            if b - a < MIN_EXTENT {
                if a + MIN_EXTENT <= limit {
                    b = a + MIN_EXTENT;
                } else {
                    a = b - MIN_EXTENT;
                }
            }
            (a, b)
        };
        let (x1, x2) = clamp_axis(self.x1, self.x2, width);
        let (y1, y2) = clamp_axis(self.y1, self.y2, height);
        BBox { x1, y1, x2, y2 }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Regression offset of a target box relative to a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Delta {
    pub const ZERO: Delta = Delta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Copy with `dw` and `dh` clamped to `[-bound, bound]`.
    pub fn clamped(&self, bound: f64) -> Delta {
        Delta {
            dw: self.dw.clamp(-bound, bound),
            dh: self.dh.clamp(-bound, bound),
            ..*self
        }
    }
}

/// Intersection over union. Symmetric, 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    // union computed from the sum so that iou(a, b) == iou(b, a) bit for bit
    let union = (a.area() + b.area()) - inter;
    inter / union
}

/// Encodes `target` relative to `proposal` (Faster R-CNN parameterization),
/// clamping the log-size terms to `clamp`.
pub fn encode_delta_clamped(proposal: &BBox, target: &BBox, clamp: f64) -> Delta {
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    Delta {
        dx: (tcx - pcx) / pw,
        dy: (tcy - pcy) / ph,
        dw: (target.width() / pw).ln(),
        dh: (target.height() / ph).ln(),
    }
    .clamped(clamp)
}

pub fn encode_delta(proposal: &BBox, target: &BBox) -> Delta {
    encode_delta_clamped(proposal, target, DEFAULT_DELTA_CLAMP)
}

/// Inverse of [`encode_delta_clamped`]. When `image` is given the result is
/// clipped to `[0, w] x [0, h]`.
pub fn decode_delta_clamped(
    proposal: &BBox,
    d: &Delta,
    clamp: f64,
    image: Option<(f64, f64)>,
) -> BBox {
    debug_assert!(d.is_finite(), "decode_delta given a non-finite delta");
    let d = d.clamped(clamp);
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let cx = pcx + d.dx * pw;
    let cy = pcy + d.dy * ph;
    let w = pw * d.dw.exp();
    let h = ph * d.dh.exp();
    let out = BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    };
    match image {
        Some((iw, ih)) => out.clip(iw, ih),
        None => out,
    }
}

pub fn decode_delta(proposal: &BBox, d: &Delta) -> BBox {
    decode_delta_clamped(proposal, d, DEFAULT_DELTA_CLAMP, None)
}

/// Orders indices by descending score, ties by ascending index.
pub(crate) fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Greedy non-maximum suppression.
///
/// Returns the kept indices in selection order (descending score, equal
/// scores by input index). A detection is dropped iff an already kept one
/// overlaps it with IoU strictly greater than `iou_threshold`.
pub fn nms(detections: &[(BBox, f64)], iou_threshold: f64) -> Vec<usize> {
    assert!(
        iou_threshold > 0.0 && iou_threshold < 1.0,
        "nms threshold must lie in (0, 1), got {iou_threshold}"
    );
    let order = score_order(detections.iter().map(|d| d.1));
    let mut suppressed = vec![false; detections.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&detections[i].0, &detections[j].0) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        let half = iou(&a, &bx(5.0, 0.0, 15.0, 10.0));
        assert!((half - 50.0 / 150.0).abs() < 1e-15);
        // touching edges do not overlap
        assert_eq!(iou(&a, &bx(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 10.0).is_err());
        assert!(BBox::new(0.0, 5.0, 10.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
        let err = serde_json::from_str::<BBox>("[0, 0, -1, 2]");
        assert!(err.is_err());
    }

    #[test]
    fn encode_examples() {
        let p = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_delta(&p, &p), Delta::ZERO);
        let d = encode_delta(&p, &bx(0.0, 0.0, 20.0, 10.0));
        assert!((d.dx - 0.5).abs() < 1e-15);
        assert_eq!(d.dy, 0.0);
        assert!((d.dw - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d.dh, 0.0);
    }

    #[test]
    fn decode_examples() {
        let p = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(decode_delta(&p, &Delta::ZERO), p);
        let out = decode_delta(&p, &Delta::new(0.5, 0.0, 2f64.ln(), 0.0));
        let want = [0.0, 0.0, 20.0, 10.0];
        for (a, b) in out.to_array().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn decode_clamps_and_clips() {
        let p = bx(0.0, 0.0, 10.0, 10.0);
        let huge = decode_delta(&p, &Delta::new(0.0, 0.0, 1e6, -1e6));
        assert!((huge.width() - 10.0 * 4f64.exp()).abs() < 1e-9);
        assert!((huge.height() - 10.0 * (-4f64).exp()).abs() < 1e-12);
        let clipped =
            decode_delta_clamped(&p, &Delta::new(0.0, 0.0, 1.0, 1.0), 4.0, Some((12.0, 8.0)));
        assert_eq!(clipped.x1(), 0.0);
        assert_eq!(clipped.x2(), 12.0);
        assert_eq!(clipped.y2(), 8.0);
        let outside = bx(100.0, 100.0, 110.0, 110.0);
        let c = decode_delta_clamped(&outside, &Delta::ZERO, 4.0, Some((50.0, 50.0)));
        assert!(c.width() > 0.0 && c.height() > 0.0);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[(a, 0.3)], 0.5), vec![0]);
        assert_eq!(nms(&[(a, 0.8), (a, 0.9)], 0.5), vec![1]);
        // equal scores: the earlier input wins
        assert_eq!(nms(&[(a, 0.5), (a, 0.5)], 0.5), vec![0]);
    }

    #[test]
    fn nms_is_not_monotone_in_threshold() {
        // IoU(A,B) = 0.6 lies between the thresholds, IoU(B,C) = 0.7 above both.
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(2.5, 0.0, 12.5, 10.0);
        let shift = 2.5 + 3.0 / 1.7;
        let c = bx(shift, 0.0, 10.0 + shift, 10.0);
        assert!((iou(&a, &b) - 0.6).abs() < 1e-12);
        assert!(iou(&b, &c) > 0.69 && iou(&a, &c) < 0.5);
        let dets = [(a, 0.9), (b, 0.8), (c, 0.7)];
        let low: Vec<usize> = nms(&dets, 0.55);
        let high: Vec<usize> = nms(&dets, 0.65);
        assert_eq!(low, vec![0, 2]);
        assert_eq!(high, vec![0, 1]);
    }
}

//! Boxes, regions of interest and the center/log-size box parameterization.

use crate::error::{Error, Result};

/// Axis-aligned rectangle in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
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

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A candidate region tied to one image of the forward batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub bbox: BBox,
    pub batch_index: usize,
}

impl Roi {
    pub fn new(bbox: BBox) -> Self {
        Roi {
            bbox,
            batch_index: 0,
        }
    }
}

/// A scored, labelled box. `class_id` is 1-based; 0 is background and never
/// appears in a detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Largest log-scale delta accepted by [`decode_box`] (a 1000/16 size ratio).
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

fn check_reference(anchor: &BBox) -> Result<()> {
    if !(anchor.width() > 0.0 && anchor.height() > 0.0) {
        return Err(Error::Geometry(format!(
            "reference box {anchor:?} must have positive width and height"
        )));
    }
    Ok(())
}

/// Regression target `(tx, ty, tw, th)` that moves `anchor` onto `gt`.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    check_reference(anchor)?;
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return Err(Error::Geometry(format!("target box {gt:?} is degenerate")));
    }
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok([
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ])
}

/// Inverse of [`encode_box`], without clipping. Log-scale deltas are capped
/// at [`MAX_LOG_SCALE`] so wild predictions cannot overflow.
pub fn decode_box(anchor: &BBox, delta: &[f64; 4]) -> Result<BBox> {
    check_reference(anchor)?;
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + delta[0] * aw;
    let cy = ay + delta[1] * ah;
    let w = aw * delta[2].min(MAX_LOG_SCALE).exp();
    let h = ah * delta[3].min(MAX_LOG_SCALE).exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

/// [`decode_box`] followed by clipping to a `width × height` image.
pub fn decode_box_clipped(anchor: &BBox, delta: &[f64; 4], width: f64, height: f64) -> Result<BBox> {
    decode_box(anchor, delta).map(|b| b.clip(width, height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        let point = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&point, &point), 0.0);
    }

    #[test]
    fn encode_identity_and_hand_case() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_box(&a, &a).unwrap(), [0.0; 4]);
        let d = encode_box(&a, &BBox::new(5.0, 5.0, 15.0, 15.0)).unwrap();
        assert_eq!(d, [0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_anchor_is_geometry_error() {
        let flat = BBox::new(0.0, 0.0, 0.0, 4.0);
        assert!(matches!(decode_box(&flat, &[0.0; 4]), Err(Error::Geometry(_))));
        assert!(matches!(
            encode_box(&flat, &BBox::new(0.0, 0.0, 1.0, 1.0)),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn decode_clips_to_image() {
        let a = BBox::new(-4.0, -4.0, 12.0, 12.0);
        let b = decode_box_clipped(&a, &[0.0; 4], 64.0, 64.0).unwrap();
        assert_eq!(b, BBox::new(0.0, 0.0, 12.0, 12.0));
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(a in arb_box(), g in arb_box()) {
            let d = encode_box(&a, &g).unwrap();
            prop_assume!(d[2] < MAX_LOG_SCALE && d[3] < MAX_LOG_SCALE);
            let r = decode_box(&a, &d).unwrap();
            for (u, v) in [(r.x1, g.x1), (r.y1, g.y1), (r.x2, g.x2), (r.y2, g.y2)] {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
        }
    }
}

//! Training targets for the proposal network and the RoI head, plus
//! minibatch sampling.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::detect::geometry::{encode_box, iou, BBox};
use crate::error::Result;
use crate::synth::Annotation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// Encoded offset of each anchor to its best-overlap ground truth
    /// (zeros when there is no ground truth).
    pub deltas: Vec<[f64; 4]>,
}

/// Index and IoU of the best-overlapping box of `gt` (first on ties).
fn best_match(b: &BBox, gt: &[BBox]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, g) in gt.iter().enumerate() {
        let o = iou(b, g);
        if best.is_none_or(|(_, m)| o > m) {
            best = Some((j, o));
        }
    }
    best
}

/// Labels anchors: positive when IoU ≥ `pos_iou` with some box or when the
/// anchor attains a box's highest IoU (ties included, IoU > 0); negative when
/// the best IoU is below `neg_iou`; ignored otherwise.
pub fn assign_rpn_targets(anchors: &[BBox], gt: &[BBox], pos_iou: f64, neg_iou: f64) -> Result<RpnTargets> {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    let mut deltas = vec![[0.0; 4]; anchors.len()];
    if gt.is_empty() {
        return Ok(RpnTargets { labels, deltas });
    }
    let overlaps: Vec<Vec<f64>> = anchors.iter().map(|a| gt.iter().map(|g| iou(a, g)).collect()).collect();
    let gt_max: Vec<f64> = (0..gt.len())
        .map(|j| overlaps.iter().map(|row| row[j]).fold(0.0, f64::max))
        .collect();
    for (i, a) in anchors.iter().enumerate() {
        let (j, best) = best_match(a, gt).expect("gt nonempty");
        deltas[i] = encode_box(a, &gt[j])?;
        let is_argmax = overlaps[i]
            .iter()
            .zip(&gt_max)
            .any(|(&o, &m)| m > 0.0 && o == m);
        labels[i] = if best >= pos_iou || is_argmax {
            AnchorLabel::Positive
        } else if best < neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignored
        };
    }
    Ok(RpnTargets { labels, deltas })
}

/// Draws up to `batch` indices: at most `fg_fraction · batch` from
/// `positives`, the remainder from `negatives`. Both returned lists are sorted.
pub fn sample_balanced<R: Rng + ?Sized>(
    positives: &[usize],
    negatives: &[usize],
    batch: usize,
    fg_fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let fg_cap = (batch as f64 * fg_fraction).round() as usize;
    let mut pos = positives.to_vec();
    pos.shuffle(rng);
    pos.truncate(fg_cap);
    let mut neg = negatives.to_vec();
    neg.shuffle(rng);
    neg.truncate(batch.saturating_sub(pos.len()));
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

/// Target of one region for the classification/regression head.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTarget {
    /// 0 = background, otherwise the class of the matched box.
    pub class_id: usize,
    /// Encoded offset to the matched box divided by the per-coordinate std.
    pub delta: [f64; 4],
}

/// Foreground when the best IoU reaches `fg_iou`.
pub fn assign_roi_targets(rois: &[BBox], gt: &[Annotation], fg_iou: f64, bbox_std: [f64; 4]) -> Result<Vec<RoiTarget>> {
    let boxes: Vec<BBox> = gt.iter().map(|a| a.bbox).collect();
    rois.iter()
        .map(|r| match best_match(r, &boxes) {
            Some((j, o)) if o >= fg_iou => {
                let d = encode_box(r, &boxes[j])?;
                Ok(RoiTarget {
                    class_id: gt[j].class_id,
                    delta: std::array::from_fn(|k| d[k] / bbox_std[k]),
                })
            }
            _ => Ok(RoiTarget {
                class_id: 0,
                delta: [0.0; 4],
            }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, STREAM_SAMPLING};

    #[test]
    fn exact_anchor_is_positive_with_zero_delta() {
        let g = BBox::new(8.0, 8.0, 24.0, 24.0);
        let anchors = [g, BBox::new(40.0, 40.0, 50.0, 50.0)];
        let t = assign_rpn_targets(&anchors, &[g], 0.7, 0.3).unwrap();
        assert_eq!(t.labels, vec![AnchorLabel::Positive, AnchorLabel::Negative]);
        assert_eq!(t.deltas[0], [0.0; 4]);
    }

    #[test]
    fn low_overlap_argmax_is_positive() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        // IoU 0.25 and 1/7 with g: only the first is the argmax
        let anchors = [BBox::new(0.0, 0.0, 20.0, 20.0), BBox::new(5.0, 5.0, 15.0, 15.0)];
        let t = assign_rpn_targets(&anchors, &[g], 0.7, 0.1).unwrap();
        assert_eq!(t.labels, vec![AnchorLabel::Positive, AnchorLabel::Ignored]);
    }

    #[test]
    fn no_ground_truth_all_negative() {
        let t = assign_rpn_targets(&[BBox::new(0.0, 0.0, 4.0, 4.0)], &[], 0.7, 0.3).unwrap();
        assert_eq!(t.labels, vec![AnchorLabel::Negative]);
    }

    #[test]
    fn sampling_respects_budget() {
        let pos: Vec<usize> = (0..50).collect();
        let neg: Vec<usize> = (50..500).collect();
        let mut rng = stream(1, STREAM_SAMPLING);
        let (p, n) = sample_balanced(&pos, &neg, 64, 0.5, &mut rng);
        assert_eq!((p.len(), n.len()), (32, 32));
        let (p, n) = sample_balanced(&pos[..3], &neg, 64, 0.5, &mut rng);
        assert_eq!((p.len(), n.len()), (3, 61));
        assert!(n.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn roi_targets_background_and_class() {
        let gt = [Annotation {
            class_id: 3,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
        }];
        let rois = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(30.0, 30.0, 40.0, 40.0)];
        let t = assign_roi_targets(&rois, &gt, 0.5, [0.1, 0.1, 0.2, 0.2]).unwrap();
        assert_eq!(t[0].class_id, 3);
        assert_eq!(t[0].delta, [0.0; 4]);
        assert_eq!(t[1].class_id, 0);
    }
}

//! Region proposals from the objectness/regression maps of the RPN head.

use crate::detect::geometry::{decode_box_clipped, Roi};
use crate::detect::nms::{nms, order_by_score};
use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms: usize,
    pub post_nms: usize,
    pub nms_thresh: f64,
    /// Boxes with a side shorter than this (pixels, after clipping) are dropped.
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms: 200,
            post_nms: 50,
            nms_thresh: 0.7,
            min_size: 4.0,
        }
    }
}

/// Flat offset of per-anchor channel `part` (of `per` channels per anchor)
/// for anchor `anchor` in a `[N, A·per, hf, wf]` head output.
pub fn anchor_offset(
    anchor: usize,
    part: usize,
    per: usize,
    per_location: usize,
    batch: usize,
    hf: usize,
    wf: usize,
) -> usize {
    let cell = anchor / per_location;
    let local = anchor % per_location;
    let channels = per_location * per;
    ((batch * channels + local * per + part) * hf + cell / wf) * wf + cell % wf
}

/// Foreground probability of every anchor (softmax over the bg/fg pair).
pub fn objectness_scores<T: Real>(objectness: &Tensor<T>, per_location: usize, batch: usize) -> Result<Vec<f64>> {
    let (_, c, hf, wf) = objectness.dims4("rpn_propose")?;
    if c != 2 * per_location {
        return Err(Error::dim(
            "rpn_propose",
            format!("objectness has {c} channels, expected 2 per anchor ({per_location} anchors)"),
        ));
    }
    let d = objectness.data();
    Ok((0..hf * wf * per_location)
        .map(|a| {
            let bg = d[anchor_offset(a, 0, 2, per_location, batch, hf, wf)].as_f64();
            let fg = d[anchor_offset(a, 1, 2, per_location, batch, hf, wf)].as_f64();
            1.0 / (1.0 + (bg - fg).exp())
        })
        .collect())
}

/// Regression deltas of every anchor.
pub fn anchor_deltas<T: Real>(reg: &Tensor<T>, per_location: usize, batch: usize) -> Result<Vec<[f64; 4]>> {
    let (_, c, hf, wf) = reg.dims4("rpn_propose")?;
    if c != 4 * per_location {
        return Err(Error::dim(
            "rpn_propose",
            format!("regression has {c} channels, expected 4 per anchor ({per_location} anchors)"),
        ));
    }
    let d = reg.data();
    Ok((0..hf * wf * per_location)
        .map(|a| std::array::from_fn(|k| d[anchor_offset(a, k, 4, per_location, batch, hf, wf)].as_f64()))
        .collect())
}

/// Decodes, clips and filters anchors, then keeps the best `pre_nms`, runs
/// NMS and keeps the best `post_nms`. Returns RoIs with their scores in
/// descending-score order.
#[allow(clippy::too_many_arguments)]
pub fn rpn_propose_scored<T: Real>(
    objectness: &Tensor<T>,
    reg: &Tensor<T>,
    anchors: &[BBox],
    per_location: usize,
    batch: usize,
    image: (f64, f64),
    cfg: &ProposalConfig,
) -> Result<Vec<(Roi, f64)>> {
    let scores = objectness_scores(objectness, per_location, batch)?;
    let deltas = anchor_deltas(reg, per_location, batch)?;
    if scores.len() != anchors.len() {
        return Err(Error::dim(
            "rpn_propose",
            format!("{} anchors for {} head positions", anchors.len(), scores.len()),
        ));
    }
    let mut boxes = Vec::new();
    let mut kept_scores = Vec::new();
    for ((anchor, delta), &s) in anchors.iter().zip(&deltas).zip(&scores) {
        let b = decode_box_clipped(anchor, delta, image.0, image.1)?;
        if b.width() >= cfg.min_size && b.height() >= cfg.min_size {
            boxes.push(b);
            kept_scores.push(s);
        }
    }
    let mut order = order_by_score(&kept_scores);
    order.truncate(cfg.pre_nms);
    let top_boxes: Vec<BBox> = order.iter().map(|&i| boxes[i]).collect();
    let top_scores: Vec<f64> = order.iter().map(|&i| kept_scores[i]).collect();
    let mut keep = nms(&top_boxes, &top_scores, cfg.nms_thresh);
    keep.truncate(cfg.post_nms);
    Ok(keep
        .into_iter()
        .map(|i| {
            (
                Roi {
                    bbox: top_boxes[i],
                    batch_index: batch,
                },
                top_scores[i],
            )
        })
        .collect())
}

pub fn rpn_propose<T: Real>(
    objectness: &Tensor<T>,
    reg: &Tensor<T>,
    anchors: &[BBox],
    per_location: usize,
    image: (f64, f64),
    cfg: &ProposalConfig,
) -> Result<Vec<Roi>> {
    Ok(rpn_propose_scored(objectness, reg, anchors, per_location, 0, image, cfg)?
        .into_iter()
        .map(|(r, _)| r)
        .collect())
}

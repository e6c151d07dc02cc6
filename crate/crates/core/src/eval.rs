//! Mean average precision at a fixed IoU threshold with all-point
//! interpolation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::detect::geometry::iou;
use crate::detect::io::DetectionRecord;
use crate::error::{Error, Result};
use crate::synth::{Annotation, Scene};

/// Ground-truth boxes keyed by image id.
pub type GroundTruth = BTreeMap<String, Vec<Annotation>>;

pub const DEFAULT_IOU: f64 = 0.5;

pub fn ground_truth(scenes: &[Scene]) -> GroundTruth {
    scenes
        .iter()
        .map(|s| (s.image_id.clone(), s.annotations.clone()))
        .collect()
}

/// Indices of `scores` by descending score, ties kept in input order.
pub fn rank_by_score(scores: impl IntoIterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.into_iter().collect();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Greedy TP/FP labelling. Detections are visited by descending score (ties
/// by input order); each takes the unmatched same-class ground-truth box of
/// highest IoU on its image if that IoU reaches `iou_thresh`.
///
/// Returns one label per detection, in input order (`true` = TP).
pub fn match_detections(dets: &[DetectionRecord], gt: &GroundTruth, iou_thresh: f64) -> Vec<bool> {
    let mut used: BTreeMap<&str, Vec<bool>> = gt
        .iter()
        .map(|(k, v)| (k.as_str(), vec![false; v.len()]))
        .collect();
    let mut labels = vec![false; dets.len()];
    for i in rank_by_score(dets.iter().map(|d| d.score)) {
        let d = &dets[i];
        let (Some(boxes), Some(taken)) = (gt.get(&d.image_id), used.get_mut(d.image_id.as_str())) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in boxes.iter().enumerate() {
            if g.class_id != d.class_id || taken[j] {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, o)) = best {
            if o >= iou_thresh {
                taken[j] = true;
                labels[i] = true;
            }
        }
    }
    labels
}

/// Area under the precision envelope for labels in rank order.
///
/// `None` when the class has neither ground truth nor detections (it is left
/// out of the mean); `Some(0.0)` when there is no ground truth but there
/// are detections.
pub fn average_precision(labels: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if labels.is_empty() { None } else { Some(0.0) };
    }
    let mut recall = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        tp += usize::from(l);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // running max from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// Unweighted mean over defined APs.
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Eval("no class has ground truth or detections".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<ClassAp>,
    pub map: f64,
}

impl EvalReport {
    /// `class_id ap` rows (`n/a` when undefined), then `mAP <value>`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.per_class {
            match c.ap {
                Some(ap) => {
                    let _ = writeln!(out, "{} {:.4}", c.class_id, ap);
                }
                None => {
                    let _ = writeln!(out, "{} n/a", c.class_id);
                }
            }
        }
        let _ = writeln!(out, "mAP {:.4}", self.map);
        out
    }
}

/// Scores detections of classes `1..=classes` against `gt`.
pub fn evaluate(dets: &[DetectionRecord], gt: &GroundTruth, classes: usize, iou_thresh: f64) -> Result<EvalReport> {
    if let Some(d) = dets.iter().find(|d| d.class_id == 0 || d.class_id > classes) {
        return Err(Error::Eval(format!("detection class {} outside 1..={classes}", d.class_id)));
    }
    let labels = match_detections(dets, gt, iou_thresh);
    let order = rank_by_score(dets.iter().map(|d| d.score));
    let per_class: Vec<ClassAp> = (1..=classes)
        .map(|c| {
            let ranked: Vec<bool> = order
                .iter()
                .filter(|&&i| dets[i].class_id == c)
                .map(|&i| labels[i])
                .collect();
            let num_gt = gt.values().flatten().filter(|a| a.class_id == c).count();
            ClassAp {
                class_id: c,
                ap: average_precision(&ranked, num_gt),
                num_gt,
                num_det: ranked.len(),
            }
        })
        .collect();
    let map = mean_ap(&per_class.iter().map(|c| c.ap).collect::<Vec<_>>())?;
    Ok(EvalReport { per_class, map })
}

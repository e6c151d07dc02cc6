//! Full detector forward pass and detection post-processing.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::{InferenceConfig, RunConfig};
use crate::detect::anchors::generate_anchors;
use crate::detect::geometry::{decode_box_clipped, BBox, Detection, Roi};
use crate::detect::nms::nms;
use crate::detect::proposal::rpn_propose;
use crate::error::{Error, Result};
use crate::eval::rank_by_score;
use crate::graph::{Graph, Var};
use crate::nn::{bind_params, forward_detector, DetectorOutputs, ForwardCtx, ParamStore};
use crate::rng::{stream, STREAM_DROPOUT};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Graph state after one single-image forward pass.
pub struct Forward {
    /// Graph leaf of every parameter, by name.
    pub vars: BTreeMap<String, Var>,
    pub outputs: DetectorOutputs,
    pub anchors: Vec<BBox>,
    pub image_size: (f64, f64),
}

/// Runs the detector on one `[3, H, W]` image inside `g`.
pub fn forward_image<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    cfg: &RunConfig,
    image: &Tensor<f64>,
    trainable: bool,
    training: bool,
    rng: &mut R,
) -> Result<Forward> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::dim("detect", format!("expected a [3, H, W] image, got {:?}", image.shape())));
    };
    let vars = bind_params(g, store, trainable);
    let img = g.input(image.cast::<T>().reshape(&[1, c, h, w])?);
    let mut ctx = ForwardCtx {
        graph: g,
        vars: &vars,
        store,
        training,
        rng,
        bn_eps: T::lit(cfg.net.bn_eps),
        bn_momentum: T::lit(cfg.net.bn_momentum),
    };
    let outputs = forward_detector(&mut ctx, img, &cfg.net)?;
    let (_, _, hf, wf) = g.value(outputs.features).dims4("detect")?;
    let anchors = generate_anchors(&cfg.net.anchors, hf, wf, cfg.net.feature_stride());
    Ok(Forward {
        vars,
        outputs,
        anchors,
        image_size: (w as f64, h as f64),
    })
}

/// Per-RoI class probabilities `[R, C+1]` and voted box deltas `[R, 4]`.
pub fn roi_head<T: Real>(g: &mut Graph<T>, cfg: &RunConfig, out: &DetectorOutputs, rois: &[Roi]) -> Result<(Var, Var)> {
    let ps = cfg.net.ps_head();
    let pooled = g.ps_roi_pool(out.ps_cls, rois, ps.k, ps.groups(), ps.feature_stride)?;
    let logits = g.mean_spatial(pooled)?;
    let pooled_reg = g.ps_roi_pool(out.ps_reg, rois, ps.k, 4, ps.feature_stride)?;
    let deltas = g.mean_spatial(pooled_reg)?;
    Ok((logits, deltas))
}

/// Class-wise thresholding and NMS of scored boxes, merged by descending
/// score and truncated to `max_dets`.
pub fn postprocess(boxes: &[BBox], probs: &[Vec<f64>], post: &InferenceConfig) -> Vec<Detection> {
    let classes = probs.first().map_or(0, |p| p.len().saturating_sub(1));
    let mut dets = Vec::new();
    for c in 1..=classes {
        let cand: Vec<usize> = (0..boxes.len())
            .filter(|&i| probs[i][c] > post.score_thresh && boxes[i].width() > 0.0 && boxes[i].height() > 0.0)
            .collect();
        let b: Vec<BBox> = cand.iter().map(|&i| boxes[i]).collect();
        let s: Vec<f64> = cand.iter().map(|&i| probs[i][c]).collect();
        for k in nms(&b, &s, post.nms_thresh) {
            dets.push(Detection {
                bbox: b[k],
                class_id: c,
                score: s[k],
            });
        }
    }
    let order = rank_by_score(dets.iter().map(|d| d.score));
    order.into_iter().take(post.max_dets).map(|i| dets[i]).collect()
}

/// Inference wrapper owning a copy of the weights (normalization layers
/// need mutable access even when their statistics are frozen).
pub struct Detector<T: Real> {
    store: ParamStore<T>,
    cfg: RunConfig,
}

impl<T: Real> Detector<T> {
    pub fn new(store: ParamStore<T>, cfg: RunConfig) -> Self {
        Detector { store, cfg }
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn detect(&mut self, image: &Tensor<f64>, post: &InferenceConfig) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        // dropout is inactive in evaluation; the stream is never drawn from
        let mut rng = stream(0, STREAM_DROPOUT);
        let f = forward_image(&mut g, &mut self.store, &self.cfg, image, false, false, &mut rng)?;
        let rois = rpn_propose(
            g.value(f.outputs.rpn_cls),
            g.value(f.outputs.rpn_reg),
            &f.anchors,
            self.cfg.net.anchors.per_location(),
            f.image_size,
            &self.cfg.proposals,
        )?;
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let (logits, deltas) = roi_head(&mut g, &self.cfg, &f.outputs, &rois)?;
        let probs_var = g.softmax(logits)?;
        let width = self.cfg.net.classes + 1;
        let probs: Vec<Vec<f64>> = g
            .value(probs_var)
            .data()
            .chunks(width)
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect();
        let std = self.cfg.bbox_std;
        let boxes = rois
            .iter()
            .zip(g.value(deltas).data().chunks(4))
            .map(|(r, d)| {
                let d: [f64; 4] = std::array::from_fn(|k| d[k].as_f64() * std[k]);
                decode_box_clipped(&r.bbox, &d, f.image_size.0, f.image_size.1)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(postprocess(&boxes, &probs, post))
    }
}

//! Joint end-to-end training of backbone, proposal network and
//! position-sensitive head, plus the variant comparison harness.

pub mod ablation;
pub mod loss;
pub mod sgd;
pub mod targets;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{Precision, RunConfig};
use crate::detect::geometry::{BBox, Roi};
use crate::detect::io::DetectionRecord;
use crate::detect::proposal::{anchor_offset, rpn_propose};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ground_truth, EvalReport};
use crate::graph::Graph;
use crate::inference::{forward_image, roi_head, Detector};
use crate::nn::{build_network, ParamStore};
use crate::rng::{stream, STREAM_DROPOUT, STREAM_INIT, STREAM_SAMPLING, STREAM_SHUFFLE};
use crate::scalar::Real;
use crate::synth::{Dataset, Scene};
use crate::tensor::Tensor;

pub use ablation::{ablation_sweep, parse_sweep, AblationTable, Variant};
pub use loss::{detection_loss, head_loss, HeadBatch, LossReport, LossVars};
pub use sgd::{sgd_step, OptimConfig, SgdState};
pub use targets::{assign_roi_targets, assign_rpn_targets, sample_balanced, AnchorLabel, RoiTarget, RpnTargets};

pub const CHECKPOINT_FILE: &str = "checkpoint.psrd";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean total loss over the epoch's images.
    pub total_loss: f64,
    pub val_map: f64,
}

impl EpochMetrics {
    pub fn line(&self) -> String {
        format!("{} {:.4} {:.4}", self.epoch, self.total_loss, self.val_map)
    }
}

pub fn render_metrics(metrics: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        let _ = writeln!(out, "{}", m.line());
    }
    out
}

/// Random streams owned by one training run.
pub struct TrainRngs<R> {
    pub dropout: R,
    pub sampling: R,
}

/// Loss graph of one image, ready for backward.
pub struct StepGraph<T> {
    pub graph: Graph<T>,
    pub loss: LossVars,
    pub vars: BTreeMap<String, crate::graph::Var>,
}

/// Builds the full loss of one scene: forward in training mode, anchor and
/// RoI sampling, both heads' losses.
pub fn build_step<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    cfg: &RunConfig,
    scene: &Scene,
    rngs: &mut TrainRngs<R>,
) -> Result<StepGraph<T>> {
    let mut g = Graph::new();
    let f = forward_image(&mut g, store, cfg, &scene.image, true, true, &mut rngs.dropout)?;
    let s = &cfg.sampling;
    let gt: Vec<BBox> = scene.annotations.iter().map(|a| a.bbox).collect();
    let per_location = cfg.net.anchors.per_location();
    let (_, _, hf, wf) = g.value(f.outputs.rpn_cls).dims4("train")?;

    // proposal network minibatch
    let t = assign_rpn_targets(&f.anchors, &gt, s.rpn_pos_iou, s.rpn_neg_iou)?;
    let by_label = |l: AnchorLabel| -> Vec<usize> { (0..t.labels.len()).filter(|&i| t.labels[i] == l).collect() };
    let (pos, neg) = sample_balanced(
        &by_label(AnchorLabel::Positive),
        &by_label(AnchorLabel::Negative),
        s.rpn_batch,
        s.rpn_fg_fraction,
        &mut rngs.sampling,
    );
    let sampled: Vec<usize> = pos.iter().chain(&neg).copied().collect();
    let rpn_labels: Vec<usize> = pos.iter().map(|_| 1).chain(neg.iter().map(|_| 0)).collect();
    let off = |a: usize, part: usize, per: usize| anchor_offset(a, part, per, per_location, 0, hf, wf);
    let cls_index: Vec<usize> = sampled.iter().flat_map(|&a| [off(a, 0, 2), off(a, 1, 2)]).collect();
    let rpn_logits = g.gather(f.outputs.rpn_cls, cls_index, &[sampled.len(), 2])?;
    let rpn_reg_targets: Vec<T> = pos.iter().flat_map(|&a| t.deltas[a].map(T::lit)).collect();
    let rpn_reg = if pos.is_empty() {
        None
    } else {
        let idx: Vec<usize> = pos.iter().flat_map(|&a| (0..4).map(move |k| (a, k))).map(|(a, k)| off(a, k, 4)).collect();
        Some(g.gather(f.outputs.rpn_reg, idx, &[pos.len(), 4])?)
    };

    // RoI minibatch: current proposals plus the ground truth itself
    let mut boxes: Vec<BBox> = rpn_propose(
        g.value(f.outputs.rpn_cls),
        g.value(f.outputs.rpn_reg),
        &f.anchors,
        per_location,
        f.image_size,
        &cfg.proposals,
    )?
    .into_iter()
    .map(|r| r.bbox)
    .collect();
    boxes.extend(&gt);
    let targets = assign_roi_targets(&boxes, &scene.annotations, s.roi_fg_iou, cfg.bbox_std)?;
    let fg: Vec<usize> = (0..boxes.len()).filter(|&i| targets[i].class_id > 0).collect();
    let bg: Vec<usize> = (0..boxes.len()).filter(|&i| targets[i].class_id == 0).collect();
    let (fg, bg) = sample_balanced(&fg, &bg, s.roi_batch, s.roi_fg_fraction, &mut rngs.sampling);
    let chosen: Vec<usize> = fg.iter().chain(&bg).copied().collect();
    let rois: Vec<Roi> = chosen.iter().map(|&i| Roi::new(boxes[i])).collect();
    let roi_labels: Vec<usize> = chosen.iter().map(|&i| targets[i].class_id).collect();
    let (roi_logits, roi_deltas) = roi_head(&mut g, cfg, &f.outputs, &rois)?;
    let roi_reg_targets: Vec<T> = fg.iter().flat_map(|&i| targets[i].delta.map(T::lit)).collect();
    let roi_reg = if fg.is_empty() {
        None
    } else {
        Some(g.gather(roi_deltas, (0..4 * fg.len()).collect(), &[fg.len(), 4])?)
    };

    let loss = detection_loss(
        &mut g,
        &HeadBatch {
            logits: rpn_logits,
            labels: &rpn_labels,
            reg: rpn_reg,
            reg_targets: &rpn_reg_targets,
        },
        &HeadBatch {
            logits: roi_logits,
            labels: &roi_labels,
            reg: roi_reg,
            reg_targets: &roi_reg_targets,
        },
        cfg.loss_lambda,
    )?;
    Ok(StepGraph {
        graph: g,
        loss,
        vars: f.vars,
    })
}

fn as_divergence(e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged(format!("non-finite value in {op}")),
        other => other,
    }
}

/// One forward/backward/update on a single scene.
pub fn train_step<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    state: &mut SgdState<T>,
    cfg: &RunConfig,
    scene: &Scene,
    lr: f64,
    rngs: &mut TrainRngs<R>,
) -> Result<LossReport> {
    let mut step = build_step(store, cfg, scene, rngs).map_err(as_divergence)?;
    let report = step.loss.report(&step.graph);
    if !report.total.is_finite() {
        return Err(Error::Diverged(format!("loss {} on image {}", report.total, scene.image_id)));
    }
    step.graph.backward(step.loss.total)?;
    let grads: BTreeMap<String, Tensor<T>> = step
        .vars
        .iter()
        .filter_map(|(name, &v)| step.graph.grad(v).map(|g| (name.clone(), g)))
        .collect();
    sgd_step(&mut store.params, &grads, state, &cfg.optim, lr)?;
    Ok(report)
}

/// Runs the detector over `scenes` and returns the detections.
pub fn detect_scenes<T: Real>(store: &ParamStore<T>, cfg: &RunConfig, scenes: &[Scene]) -> Result<Vec<DetectionRecord>> {
    let mut det = Detector::new(store.clone(), cfg.clone());
    let mut out = Vec::new();
    for s in scenes {
        for d in det.detect(&s.image, &cfg.eval)? {
            out.push(DetectionRecord {
                image_id: s.image_id.clone(),
                class_id: d.class_id,
                score: d.score,
                bbox: d.bbox,
            });
        }
    }
    Ok(out)
}

pub fn evaluate_scenes<T: Real>(store: &ParamStore<T>, cfg: &RunConfig, scenes: &[Scene]) -> Result<EvalReport> {
    let dets = detect_scenes(store, cfg, scenes)?;
    evaluate(&dets, &ground_truth(scenes), cfg.net.classes, cfg.eval_iou)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub store: ParamStore<T>,
    pub metrics: Vec<EpochMetrics>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains from a fresh initialization. Writes `config.txt` up front, then
/// after every epoch the checkpoint and the metrics file, so a failure
/// leaves the last completed epoch on disk.
pub fn train<T: Real>(
    dataset: &Dataset,
    cfg: &RunConfig,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let classes = cfg.net.classes;
    for s in dataset.train.iter().chain(&dataset.val) {
        if let Some(a) = s.annotations.iter().find(|a| a.class_id == 0 || a.class_id > classes) {
            return Err(Error::Config(format!(
                "image {} has class {} but the network has {classes} classes",
                s.image_id, a.class_id
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join(CONFIG_FILE), &cfg.render())?;
    let seed = cfg.optim.seed;
    let mut store: ParamStore<T> = build_network(&cfg.net, &mut stream(seed, STREAM_INIT))?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    store.save(&ckpt)?;
    write_file(&metrics_path, "")?;

    let mut state = SgdState::default();
    let mut shuffle = stream(seed, STREAM_SHUFFLE);
    let mut rngs = TrainRngs {
        dropout: stream(seed, STREAM_DROPOUT),
        sampling: stream(seed, STREAM_SAMPLING),
    };
    let mut metrics = Vec::with_capacity(cfg.optim.epochs);
    for epoch in 0..cfg.optim.epochs {
        let lr = cfg.optim.lr_at(epoch);
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for &i in &order {
            total += train_step(&mut store, &mut state, cfg, &dataset.train[i], lr, &mut rngs)?.total;
        }
        let val_map = evaluate_scenes(&store, cfg, &dataset.val)?.map;
        let m = EpochMetrics {
            epoch: epoch + 1,
            total_loss: total / order.len() as f64,
            val_map,
        };
        metrics.push(m);
        store.save(&ckpt)?;
        write_file(&metrics_path, &render_metrics(&metrics))?;
        on_epoch(&m);
    }
    Ok(TrainOutcome { store, metrics })
}

/// [`train`] at the precision named in the config; returns the metrics.
pub fn train_at_precision(
    dataset: &Dataset,
    cfg: &RunConfig,
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    match cfg.precision {
        Precision::F32 => train::<f32>(dataset, cfg, out_dir, on_epoch).map(|o| o.metrics),
        Precision::F64 => train::<f64>(dataset, cfg, out_dir, on_epoch).map(|o| o.metrics),
    }
}

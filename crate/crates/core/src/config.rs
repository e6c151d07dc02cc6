//! Run configuration: every tunable of data generation, network, training,
//! inference and evaluation in one flat `key = value` file.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::detect::proposal::ProposalConfig;
use crate::error::{Error, Result};
use crate::kv::{join_list, KvFile};
use crate::nn::NetworkConfig;
use crate::synth::DatasetSpec;
use crate::train::OptimConfig;

/// Scalar type used for training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "32",
            Precision::F64 => "64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" => Ok(Precision::F32),
            "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision {s:?} is not 32 or 64"))),
        }
    }
}

/// Anchor and RoI minibatch construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_fg_fraction: f64,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub roi_fg_iou: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 64,
            rpn_fg_fraction: 0.5,
            roi_batch: 32,
            roi_fg_fraction: 0.25,
            roi_fg_iou: 0.5,
        }
    }
}

/// Post-processing of the RoI head output.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_dets: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_thresh: 0.05,
            nms_thresh: 0.3,
            max_dets: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub net: NetworkConfig,
    pub proposals: ProposalConfig,
    pub sampling: SamplingConfig,
    pub loss_lambda: f64,
    /// Divisors of the RoI-head regression targets.
    pub bbox_std: [f64; 4],
    pub optim: OptimConfig,
    pub precision: Precision,
    /// Detection post-processing used for evaluation.
    pub eval: InferenceConfig,
    pub eval_iou: f64,
    /// Minimum score of boxes drawn by the overlay command.
    pub detect_score_thresh: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DatasetSpec::default(),
            net: NetworkConfig::default(),
            proposals: ProposalConfig::default(),
            sampling: SamplingConfig::default(),
            loss_lambda: 1.0,
            bbox_std: [0.1, 0.1, 0.2, 0.2],
            optim: OptimConfig::default(),
            precision: Precision::F32,
            eval: InferenceConfig::default(),
            eval_iou: 0.5,
            detect_score_thresh: 0.5,
        }
    }
}

const NON_DATA_KEYS: &[&str] = &[
    "net.stem_channels",
    "net.stem_kernel",
    "net.stem_stride",
    "net.pool_window",
    "net.pool_stride",
    "net.stages",
    "net.block_variant",
    "net.dropout",
    "net.dropout_rate",
    "net.head_reduce_channels",
    "net.rpn_channels",
    "net.bn_eps",
    "net.bn_momentum",
    "anchor.sizes",
    "anchor.ratios",
    "ps.k",
    "ps.classes",
    "rpn.pos_iou",
    "rpn.neg_iou",
    "rpn.batch",
    "rpn.fg_fraction",
    "rpn.nms",
    "rpn.pre_nms",
    "rpn.post_nms",
    "rpn.min_size",
    "roi.batch",
    "roi.fg_fraction",
    "roi.fg_iou",
    "loss.lambda",
    "loss.bbox_std",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.epochs",
    "optim.seed",
    "optim.lr_decay_at",
    "optim.lr_decay",
    "optim.clip_norm",
    "optim.precision",
    "eval.iou",
    "eval.nms",
    "eval.score_thresh",
    "eval.max_dets",
    "detect.score_thresh",
];

impl RunConfig {
    /// Every accepted key.
    pub fn keys() -> Vec<&'static str> {
        DatasetSpec::KEYS.iter().chain(NON_DATA_KEYS).copied().collect()
    }

    pub fn parse(origin: &str, text: &str) -> Result<Self> {
        let f = KvFile::parse(origin, text)?;
        f.reject_unknown(&Self::keys())?;
        let mut c = RunConfig::default();
        c.data.apply_kv(&f)?;
        let n = &mut c.net;
        f.get_into("net.stem_channels", &mut n.stem.channels)?;
        f.get_into("net.stem_kernel", &mut n.stem.kernel)?;
        f.get_into("net.stem_stride", &mut n.stem.stride)?;
        f.get_into("net.pool_window", &mut n.stem.pool_window)?;
        f.get_into("net.pool_stride", &mut n.stem.pool_stride)?;
        f.get_list_into("net.stages", &mut n.stages)?;
        f.get_into("net.block_variant", &mut n.block_variant)?;
        f.get_into("net.dropout", &mut n.dropout.placement)?;
        f.get_into("net.dropout_rate", &mut n.dropout.rate)?;
        f.get_into("net.head_reduce_channels", &mut n.head_reduce_channels)?;
        f.get_into("net.rpn_channels", &mut n.rpn_channels)?;
        f.get_into("net.bn_eps", &mut n.bn_eps)?;
        f.get_into("net.bn_momentum", &mut n.bn_momentum)?;
        f.get_list_into("anchor.sizes", &mut n.anchors.base_sizes)?;
        f.get_list_into("anchor.ratios", &mut n.anchors.aspect_ratios)?;
        f.get_into("ps.k", &mut n.ps_k)?;
        f.get_into("ps.classes", &mut n.classes)?;
        let s = &mut c.sampling;
        f.get_into("rpn.pos_iou", &mut s.rpn_pos_iou)?;
        f.get_into("rpn.neg_iou", &mut s.rpn_neg_iou)?;
        f.get_into("rpn.batch", &mut s.rpn_batch)?;
        f.get_into("rpn.fg_fraction", &mut s.rpn_fg_fraction)?;
        f.get_into("roi.batch", &mut s.roi_batch)?;
        f.get_into("roi.fg_fraction", &mut s.roi_fg_fraction)?;
        f.get_into("roi.fg_iou", &mut s.roi_fg_iou)?;
        let p = &mut c.proposals;
        f.get_into("rpn.nms", &mut p.nms_thresh)?;
        f.get_into("rpn.pre_nms", &mut p.pre_nms)?;
        f.get_into("rpn.post_nms", &mut p.post_nms)?;
        f.get_into("rpn.min_size", &mut p.min_size)?;
        f.get_into("loss.lambda", &mut c.loss_lambda)?;
        let mut std = c.bbox_std.to_vec();
        f.get_list_into("loss.bbox_std", &mut std)?;
        c.bbox_std = std.try_into().map_err(|v: Vec<f64>| Error::Parse {
            path: origin.to_owned(),
            line: 0,
            detail: format!("loss.bbox_std needs 4 values, got {}", v.len()),
        })?;
        let o = &mut c.optim;
        f.get_into("optim.lr", &mut o.lr)?;
        f.get_into("optim.momentum", &mut o.momentum)?;
        f.get_into("optim.weight_decay", &mut o.weight_decay)?;
        f.get_into("optim.epochs", &mut o.epochs)?;
        f.get_into("optim.seed", &mut o.seed)?;
        f.get_into("optim.lr_decay_at", &mut o.lr_decay_at)?;
        f.get_into("optim.lr_decay", &mut o.lr_decay)?;
        f.get_into("optim.clip_norm", &mut o.clip_norm)?;
        f.get_into("optim.precision", &mut c.precision)?;
        f.get_into("eval.iou", &mut c.eval_iou)?;
        f.get_into("eval.nms", &mut c.eval.nms_thresh)?;
        f.get_into("eval.score_thresh", &mut c.eval.score_thresh)?;
        f.get_into("eval.max_dets", &mut c.eval.max_dets)?;
        f.get_into("detect.score_thresh", &mut c.detect_score_thresh)?;
        c.validate()?;
        Ok(c)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        self.data.render_kv(&mut out);
        let n = &self.net;
        let s = &self.sampling;
        let p = &self.proposals;
        let o = &self.optim;
        let pairs: Vec<(&str, String)> = vec![
            ("net.stem_channels", n.stem.channels.to_string()),
            ("net.stem_kernel", n.stem.kernel.to_string()),
            ("net.stem_stride", n.stem.stride.to_string()),
            ("net.pool_window", n.stem.pool_window.to_string()),
            ("net.pool_stride", n.stem.pool_stride.to_string()),
            ("net.stages", join_list(&n.stages)),
            ("net.block_variant", n.block_variant.to_string()),
            ("net.dropout", n.dropout.placement.to_string()),
            ("net.dropout_rate", n.dropout.rate.to_string()),
            ("net.head_reduce_channels", n.head_reduce_channels.to_string()),
            ("net.rpn_channels", n.rpn_channels.to_string()),
            ("net.bn_eps", n.bn_eps.to_string()),
            ("net.bn_momentum", n.bn_momentum.to_string()),
            ("anchor.sizes", join_list(&n.anchors.base_sizes)),
            ("anchor.ratios", join_list(&n.anchors.aspect_ratios)),
            ("ps.k", n.ps_k.to_string()),
            ("ps.classes", n.classes.to_string()),
            ("rpn.pos_iou", s.rpn_pos_iou.to_string()),
            ("rpn.neg_iou", s.rpn_neg_iou.to_string()),
            ("rpn.batch", s.rpn_batch.to_string()),
            ("rpn.fg_fraction", s.rpn_fg_fraction.to_string()),
            ("rpn.nms", p.nms_thresh.to_string()),
            ("rpn.pre_nms", p.pre_nms.to_string()),
            ("rpn.post_nms", p.post_nms.to_string()),
            ("rpn.min_size", p.min_size.to_string()),
            ("roi.batch", s.roi_batch.to_string()),
            ("roi.fg_fraction", s.roi_fg_fraction.to_string()),
            ("roi.fg_iou", s.roi_fg_iou.to_string()),
            ("loss.lambda", self.loss_lambda.to_string()),
            ("loss.bbox_std", join_list(&self.bbox_std)),
            ("optim.lr", o.lr.to_string()),
            ("optim.momentum", o.momentum.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.epochs", o.epochs.to_string()),
            ("optim.seed", o.seed.to_string()),
            ("optim.lr_decay_at", o.lr_decay_at.to_string()),
            ("optim.lr_decay", o.lr_decay.to_string()),
            ("optim.clip_norm", o.clip_norm.to_string()),
            ("optim.precision", self.precision.to_string()),
            ("eval.iou", self.eval_iou.to_string()),
            ("eval.nms", self.eval.nms_thresh.to_string()),
            ("eval.score_thresh", self.eval.score_thresh.to_string()),
            ("eval.max_dets", self.eval.max_dets.to_string()),
            ("detect.score_thresh", self.detect_score_thresh.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.net.validate()?;
        self.optim.validate()?;
        let s = &self.sampling;
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(s.rpn_pos_iou > s.rpn_neg_iou) || !unit(s.rpn_pos_iou) || !unit(s.rpn_neg_iou) {
            return Err(Error::Config(format!(
                "rpn thresholds need 0 <= neg_iou ({}) < pos_iou ({}) <= 1",
                s.rpn_neg_iou, s.rpn_pos_iou
            )));
        }
        if s.rpn_batch == 0 || s.roi_batch == 0 {
            return Err(Error::Config("sampling batch sizes must be > 0".into()));
        }
        if !unit(s.rpn_fg_fraction) || !unit(s.roi_fg_fraction) || !unit(s.roi_fg_iou) {
            return Err(Error::Config("sampling fractions and IoUs must lie in [0, 1]".into()));
        }
        let p = &self.proposals;
        if p.pre_nms == 0 || p.post_nms == 0 || !unit(p.nms_thresh) || !(p.min_size >= 0.0) {
            return Err(Error::Config("proposal settings out of range".into()));
        }
        if !(self.loss_lambda > 0.0) {
            return Err(Error::Config(format!("loss.lambda {} must be > 0", self.loss_lambda)));
        }
        if self.bbox_std.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("loss.bbox_std entries must be > 0".into()));
        }
        let e = &self.eval;
        if !unit(e.score_thresh) || !unit(e.nms_thresh) || e.max_dets == 0 || !unit(self.eval_iou) {
            return Err(Error::Config("eval settings out of range".into()));
        }
        if !unit(self.detect_score_thresh) {
            return Err(Error::Config("detect.score_thresh outside [0, 1]".into()));
        }
        self.net.feature_size(self.data.height, self.data.width)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BlockVariant, DropoutPlacement};

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::parse("c", &c.render()).unwrap(), c);
    }

    #[test]
    fn every_key_is_rendered_once() {
        let text = RunConfig::default().render();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys.len(), RunConfig::keys().len());
        for k in RunConfig::keys() {
            assert!(keys.contains(&k), "{k}");
        }
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::parse(
            "c",
            "ps.k = 7\nnet.block_variant = no_second_relu\nnet.dropout = none\noptim.precision = 64\n",
        )
        .unwrap();
        assert_eq!(c.net.ps_k, 7);
        assert_eq!(c.net.block_variant, BlockVariant::NoSecondRelu);
        assert_eq!(c.net.dropout.placement, DropoutPlacement::None);
        assert_eq!(c.precision, Precision::F64);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::parse("c", "ps.kk = 3\n"), Err(Error::Parse { line: 1, .. })));
        assert!(RunConfig::parse("c", "optim.lr = 0\n").is_err());
        assert!(RunConfig::parse("c", "rpn.pos_iou = 0.2\n").is_err());
        assert!(RunConfig::parse("c", "loss.bbox_std = 1,2\n").is_err());
        assert!(RunConfig::parse("c", "data.height = 63\n").is_err());
    }
}

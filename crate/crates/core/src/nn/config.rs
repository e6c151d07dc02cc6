use std::fmt;
use std::str::FromStr;

use crate::detect::anchors::AnchorSpec;
use crate::detect::psroi::PsHeadConfig;
use crate::error::{Error, Result};
use crate::kernels::norm::{DEFAULT_EPS, DEFAULT_MOMENTUM_STAT};

/// Wiring of the two-conv residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockVariant {
    /// `relu(BN(conv(relu(BN(conv x)))) + shortcut x)`
    Original,
    /// `relu(BN(conv(relu(BN(conv x))) + shortcut x))`
    BnAfterAdd,
    /// `BN(conv(relu(BN(conv x)))) + shortcut x`
    NoSecondRelu,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 3] = [
        BlockVariant::Original,
        BlockVariant::BnAfterAdd,
        BlockVariant::NoSecondRelu,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BlockVariant::Original => "original",
            BlockVariant::BnAfterAdd => "bn_after_add",
            BlockVariant::NoSecondRelu => "no_second_relu",
        }
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown block variant {s:?}")))
    }
}

/// Where (if anywhere) dropout is inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropoutPlacement {
    None,
    /// Once, right after the stem pooling layer (before the first block).
    AfterFirstPool,
    /// Between the two convs of every residual branch.
    InsideBlock,
}

impl DropoutPlacement {
    pub const ALL: [DropoutPlacement; 3] = [
        DropoutPlacement::None,
        DropoutPlacement::AfterFirstPool,
        DropoutPlacement::InsideBlock,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DropoutPlacement::None => "none",
            DropoutPlacement::AfterFirstPool => "after_first_pool",
            DropoutPlacement::InsideBlock => "inside_block",
        }
    }
}

impl fmt::Display for DropoutPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DropoutPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DropoutPlacement::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown dropout placement {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutConfig {
    pub placement: DropoutPlacement,
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
}

/// `blocks` residual blocks of `width` channels; the first one uses `stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub width: usize,
    pub stride: usize,
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.blocks, self.width, self.stride)
    }
}

impl FromStr for StageSpec {
    type Err = Error;

    /// `blocks x width x stride`, e.g. `2x32x2`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('x').collect();
        let bad = || Error::Config(format!("stage {s:?} is not <blocks>x<width>x<stride>"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let n = |p: &str| p.trim().parse::<usize>().map_err(|_| bad());
        Ok(StageSpec {
            blocks: n(parts[0])?,
            width: n(parts[1])?,
            stride: n(parts[2])?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub block_variant: BlockVariant,
    pub dropout: DropoutConfig,
    pub head_reduce_channels: usize,
    pub rpn_channels: usize,
    pub anchors: AnchorSpec,
    /// Pooling grid side of the position-sensitive head.
    pub ps_k: usize,
    /// Foreground classes.
    pub classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    /// Desk-scale backbone: 3×3/1 stem, 2×2 pool, three stages of two blocks
    /// (16/32/64 channels), total stride 2.
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            stem: StemSpec {
                channels: 16,
                kernel: 3,
                stride: 1,
                pool_window: 2,
                pool_stride: 2,
            },
            stages: vec![
                StageSpec { blocks: 2, width: 16, stride: 1 },
                StageSpec { blocks: 2, width: 32, stride: 1 },
                StageSpec { blocks: 2, width: 64, stride: 1 },
            ],
            block_variant: BlockVariant::Original,
            dropout: DropoutConfig {
                placement: DropoutPlacement::AfterFirstPool,
                rate: 0.5,
            },
            head_reduce_channels: 64,
            rpn_channels: 64,
            anchors: AnchorSpec {
                base_sizes: vec![12.0, 20.0],
                aspect_ratios: vec![1.0],
            },
            ps_k: 3,
            classes: 3,
            bn_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM_STAT,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return err("network needs at least one stage".into());
        }
        let s = &self.stem;
        if [s.channels, s.kernel, s.stride, s.pool_window, s.pool_stride].contains(&0) {
            return err(format!("stem extents must be positive: {s:?}"));
        }
        let mut prev = self.stages[0].width;
        for (i, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 || st.width == 0 {
                return err(format!("stage {i} needs blocks and width >= 1"));
            }
            if !matches!(st.stride, 1 | 2) {
                return err(format!("stage {i} stride {} not in {{1, 2}}", st.stride));
            }
            if st.width < prev {
                return err(format!("stage {i} width {} narrower than previous {prev}", st.width));
            }
            prev = st.width;
        }
        if self.in_channels == 0 || self.head_reduce_channels == 0 || self.rpn_channels == 0 {
            return err("channel counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout.rate) {
            return err(format!("dropout rate {} outside [0, 1)", self.dropout.rate));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return err("bn_eps must be > 0 and bn_momentum in (0, 1)".into());
        }
        self.anchors.validate()?;
        self.ps_head().validate()
    }

    /// Product of every stride from the input to the feature map.
    pub fn feature_stride(&self) -> usize {
        self.stem.stride * self.stem.pool_stride * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn ps_head(&self) -> PsHeadConfig {
        PsHeadConfig {
            k: self.ps_k,
            classes: self.classes,
            feature_stride: self.feature_stride(),
        }
    }

    pub fn backbone_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.width)
    }

    /// Spatial extent of the stem output (before pooling) for an input side.
    fn stem_out(&self, side: usize) -> usize {
        let pad = self.stem.kernel / 2;
        (side + 2 * pad - self.stem.kernel) / self.stem.stride + 1
    }

    /// Feature map extent `(Hf, Wf)` for an `h × w` input, checking divisibility.
    pub fn feature_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.feature_stride();
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::dim(
                "forward_backbone",
                format!("input {h}x{w} not divisible by feature stride {s} on axes 2/3"),
            ));
        }
        let (sh, sw) = (self.stem_out(h), self.stem_out(w));
        if self.stem.pool_window > sh || self.stem.pool_window > sw {
            return Err(Error::dim("forward_backbone", format!("input {h}x{w} too small for the stem")));
        }
        Ok((h / s, w / s))
    }
}

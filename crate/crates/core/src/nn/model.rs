//! Forward wiring of the backbone, residual blocks and detector heads.

use std::collections::BTreeMap;

use rand::Rng;

use crate::detect::psroi::PsHeadConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::norm::RunningStats;
use crate::nn::config::{BlockVariant, DropoutPlacement, NetworkConfig};
use crate::nn::params::{block_prefix, ParamStore};
use crate::scalar::Real;

/// Loads every parameter of `store` into `g` as a leaf. Trainable leaves
/// receive gradients on backward.
pub fn bind_params<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, trainable: bool) -> BTreeMap<String, Var> {
    store
        .params
        .iter()
        .map(|(name, t)| {
            let v = if trainable { g.param(t.clone()) } else { g.input(t.clone()) };
            (name.clone(), v)
        })
        .collect()
}

/// Everything a forward pass needs besides its input.
pub struct ForwardCtx<'a, T: Real, R: Rng + ?Sized> {
    pub graph: &'a mut Graph<T>,
    pub vars: &'a BTreeMap<String, Var>,
    /// Source of the running normalization statistics.
    pub store: &'a mut ParamStore<T>,
    pub training: bool,
    pub rng: &'a mut R,
    pub bn_eps: T,
    pub bn_momentum: T,
}

impl<T: Real, R: Rng + ?Sized> ForwardCtx<'_, T, R> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Convolution `prefix/w` (+ `prefix/b` when present).
    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{prefix}/w"))?;
        let b = self.vars.get(&format!("{prefix}/b")).copied();
        self.graph.conv2d(x, w, b, stride, pad)
    }

    pub fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}/gamma"))?;
        let beta = self.var(&format!("{prefix}/beta"))?;
        let (mean, var) = self.store.running_stats_mut(prefix)?;
        let stats = RunningStats {
            mean,
            var,
            eps: self.bn_eps,
            momentum_stat: self.bn_momentum,
        };
        self.graph.batch_norm(x, gamma, beta, stats, self.training)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.graph.dropout(x, rate, self.training, &mut *self.rng)
    }
}

/// One two-conv residual block at `prefix`.
///
/// The shortcut is the identity unless `prefix/proj/w` exists, in which
/// case it is a strided 1×1 projection. `inner_dropout` is applied between
/// the two convs of the residual branch only.
pub fn forward_block<T: Real, R: Rng + ?Sized>(
    ctx: &mut ForwardCtx<'_, T, R>,
    x: Var,
    prefix: &str,
    variant: BlockVariant,
    stride: usize,
    inner_dropout: Option<f64>,
) -> Result<Var> {
    let h = ctx.conv(x, &format!("{prefix}/conv1"), stride, 1)?;
    let h = ctx.bn(h, &format!("{prefix}/bn1"))?;
    let mut h = ctx.graph.relu(h)?;
    if let Some(rate) = inner_dropout {
        h = ctx.dropout(h, rate)?;
    }
    let h = ctx.conv(h, &format!("{prefix}/conv2"), 1, 1)?;
    let shortcut = if ctx.has(&format!("{prefix}/proj/w")) {
        ctx.conv(x, &format!("{prefix}/proj"), stride, 0)?
    } else {
        x
    };
    let bn2 = format!("{prefix}/bn2");
    match variant {
        BlockVariant::Original => {
            let h = ctx.bn(h, &bn2)?;
            let sum = ctx.graph.add(h, shortcut)?;
            ctx.graph.relu(sum)
        }
        BlockVariant::BnAfterAdd => {
            let sum = ctx.graph.add(h, shortcut)?;
            let n = ctx.bn(sum, &bn2)?;
            ctx.graph.relu(n)
        }
        BlockVariant::NoSecondRelu => {
            let h = ctx.bn(h, &bn2)?;
            ctx.graph.add(h, shortcut)
        }
    }
}

/// Stem → pool → [dropout] → residual stages → 1×1 reduction (+ReLU).
/// Input `[N, C, H, W]` with `H`, `W` divisible by the feature stride.
pub fn forward_backbone<T: Real, R: Rng + ?Sized>(
    ctx: &mut ForwardCtx<'_, T, R>,
    img: Var,
    cfg: &NetworkConfig,
) -> Result<Var> {
    let (_, c, h, w) = ctx.graph.value(img).dims4("forward_backbone")?;
    if c != cfg.in_channels {
        return Err(Error::dim(
            "forward_backbone",
            format!("input has {c} channels on axis 1, network expects {}", cfg.in_channels),
        ));
    }
    cfg.feature_size(h, w)?;
    let stem = &cfg.stem;
    let x = ctx.conv(img, "stem/conv", stem.stride, stem.kernel / 2)?;
    let x = ctx.bn(x, "stem/bn")?;
    let x = ctx.graph.relu(x)?;
    let mut x = ctx.graph.max_pool2d(x, stem.pool_window, stem.pool_stride)?;
    if cfg.dropout.placement == DropoutPlacement::AfterFirstPool {
        x = ctx.dropout(x, cfg.dropout.rate)?;
    }
    let inner = (cfg.dropout.placement == DropoutPlacement::InsideBlock).then_some(cfg.dropout.rate);
    for (s, st) in cfg.stages.iter().enumerate() {
        for b in 0..st.blocks {
            let stride = if b == 0 { st.stride } else { 1 };
            x = forward_block(ctx, x, &block_prefix(s, b), cfg.block_variant, stride, inner)?;
        }
    }
    let x = ctx.conv(x, "head/reduce", 1, 0)?;
    ctx.graph.relu(x)
}

/// Sibling 1×1 convs producing `k²(C+1)` class maps and `4k²` box maps.
pub fn score_map_heads<T: Real, R: Rng + ?Sized>(
    ctx: &mut ForwardCtx<'_, T, R>,
    feat: Var,
    ps: &PsHeadConfig,
) -> Result<(Var, Var)> {
    ps.validate()?;
    let cls = ctx.conv(feat, "ps/cls", 1, 0)?;
    let reg = ctx.conv(feat, "ps/reg", 1, 0)?;
    let (cc, rc) = (ctx.graph.value(cls).shape()[1], ctx.graph.value(reg).shape()[1]);
    if cc != ps.cls_channels() || rc != ps.reg_channels() {
        return Err(Error::dim(
            "score_map_heads",
            format!(
                "head convs give {cc}/{rc} channels, expected {}/{}",
                ps.cls_channels(),
                ps.reg_channels()
            ),
        ));
    }
    Ok((cls, reg))
}

/// 3×3 conv + ReLU, then objectness (`2A`) and box-delta (`4A`) 1×1 convs.
pub fn rpn_head<T: Real, R: Rng + ?Sized>(ctx: &mut ForwardCtx<'_, T, R>, feat: Var) -> Result<(Var, Var)> {
    let h = ctx.conv(feat, "rpn/conv", 1, 1)?;
    let h = ctx.graph.relu(h)?;
    let cls = ctx.conv(h, "rpn/cls", 1, 0)?;
    let reg = ctx.conv(h, "rpn/reg", 1, 0)?;
    Ok((cls, reg))
}

/// Graph handles of every detector output for one batch.
#[derive(Clone, Copy, Debug)]
pub struct DetectorOutputs {
    pub features: Var,
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub ps_cls: Var,
    pub ps_reg: Var,
}

pub fn forward_detector<T: Real, R: Rng + ?Sized>(
    ctx: &mut ForwardCtx<'_, T, R>,
    img: Var,
    cfg: &NetworkConfig,
) -> Result<DetectorOutputs> {
    let features = forward_backbone(ctx, img, cfg)?;
    let (rpn_cls, rpn_reg) = rpn_head(ctx, features)?;
    let (ps_cls, ps_reg) = score_map_heads(ctx, features, &cfg.ps_head())?;
    Ok(DetectorOutputs {
        features,
        rpn_cls,
        rpn_reg,
        ps_cls,
        ps_reg,
    })
}

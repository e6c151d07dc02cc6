use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::config::NetworkConfig;
use crate::scalar::Real;
use crate::tensor::Tensor;

const RUNNING_MEAN: &str = "running_mean";
const RUNNING_VAR: &str = "running_var";

/// Trainable tensors and normalization buffers, keyed by slash-separated
/// layer path (`stage1/block0/conv1/w`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(RUNNING_MEAN) || name.ends_with(RUNNING_VAR)
}

impl<T: Real> ParamStore<T> {
    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Running mean and variance of the normalization layer at `prefix`.
    pub fn running_stats_mut(&mut self, prefix: &str) -> Result<(&mut [T], &mut [T])> {
        let mean_key = format!("{prefix}/{RUNNING_MEAN}");
        let var_key = format!("{prefix}/{RUNNING_VAR}");
        let missing = || Error::Config(format!("missing running statistics for {prefix}"));
        // Two distinct keys of one map: split the borrow through an iterator.
        let mut mean = None;
        let mut var = None;
        for (k, v) in self.buffers.iter_mut() {
            if *k == mean_key {
                mean = Some(v.data_mut());
            } else if *k == var_key {
                var = Some(v.data_mut());
            }
        }
        Ok((mean.ok_or_else(missing)?, var.ok_or_else(missing)?))
    }

    /// Every tensor (parameters and buffers) under one namespace.
    pub fn all_tensors(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = self.params.clone();
        out.extend(self.buffers.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        let (buffers, params) = tensors.into_iter().partition(|(k, _)| is_buffer(k));
        ParamStore { params, buffers }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.all_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path).map(Self::from_tensors)
    }

    /// Checks that every name and shape matches `reference` (e.g. a freshly
    /// built network for the same config).
    pub fn check_compatible(&self, reference: &ParamStore<T>) -> Result<()> {
        let shapes = |m: &BTreeMap<String, Tensor<T>>| -> Vec<(String, Vec<usize>)> {
            m.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
        };
        if shapes(&self.params) != shapes(&reference.params) || shapes(&self.buffers) != shapes(&reference.buffers) {
            return Err(Error::Config(
                "checkpoint tensors do not match the network configuration".into(),
            ));
        }
        Ok(())
    }

    fn add_conv<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        cout: usize,
        cin: usize,
        kernel: usize,
        bias: bool,
    ) {
        let fan_in = cin * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = (0..cout * fan_in)
            .map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        self.params.insert(
            format!("{prefix}/w"),
            Tensor::new(&[cout, cin, kernel, kernel], w).expect("conv shape"),
        );
        if bias {
            self.params.insert(format!("{prefix}/b"), Tensor::zeros(&[cout]));
        }
    }

    fn add_bn(&mut self, prefix: &str, channels: usize) {
        self.params.insert(format!("{prefix}/gamma"), Tensor::ones(&[channels]));
        self.params.insert(format!("{prefix}/beta"), Tensor::zeros(&[channels]));
        self.buffers.insert(format!("{prefix}/{RUNNING_MEAN}"), Tensor::zeros(&[channels]));
        self.buffers.insert(format!("{prefix}/{RUNNING_VAR}"), Tensor::ones(&[channels]));
    }
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("stage{}/block{}", stage + 1, block)
}

/// Whether block `block` of `stage` needs a projection shortcut.
pub fn needs_projection(cfg: &NetworkConfig, stage: usize, block: usize) -> bool {
    if block > 0 {
        return false;
    }
    let st = &cfg.stages[stage];
    let cin = if stage == 0 { cfg.stem.channels } else { cfg.stages[stage - 1].width };
    st.stride != 1 || cin != st.width
}

/// Allocates and initializes every tensor of the detector: He-normal conv
/// weights (std `sqrt(2 / fan_in)`), zero biases, unit BN scale, zero shift.
pub fn build_network<T: Real, R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut p = ParamStore::default();
    let stem = &cfg.stem;
    p.add_conv(rng, "stem/conv", stem.channels, cfg.in_channels, stem.kernel, false);
    p.add_bn("stem/bn", stem.channels);

    let mut cin = stem.channels;
    for (s, st) in cfg.stages.iter().enumerate() {
        for b in 0..st.blocks {
            let pre = block_prefix(s, b);
            let block_in = if b == 0 { cin } else { st.width };
            p.add_conv(rng, &format!("{pre}/conv1"), st.width, block_in, 3, false);
            p.add_bn(&format!("{pre}/bn1"), st.width);
            p.add_conv(rng, &format!("{pre}/conv2"), st.width, st.width, 3, false);
            p.add_bn(&format!("{pre}/bn2"), st.width);
            if needs_projection(cfg, s, b) {
                p.add_conv(rng, &format!("{pre}/proj"), st.width, block_in, 1, false);
            }
        }
        cin = st.width;
    }

    let red = cfg.head_reduce_channels;
    p.add_conv(rng, "head/reduce", red, cin, 1, true);
    let a = cfg.anchors.per_location();
    p.add_conv(rng, "rpn/conv", cfg.rpn_channels, red, 3, true);
    p.add_conv(rng, "rpn/cls", 2 * a, cfg.rpn_channels, 1, true);
    p.add_conv(rng, "rpn/reg", 4 * a, cfg.rpn_channels, 1, true);
    let ps = cfg.ps_head();
    p.add_conv(rng, "ps/cls", ps.cls_channels(), red, 1, true);
    p.add_conv(rng, "ps/reg", ps.reg_channels(), red, 1, true);
    Ok(p)
}

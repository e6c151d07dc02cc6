use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of the epochs after which the rate is multiplied by `lr_decay`.
    pub lr_decay_at: f64,
    pub lr_decay: f64,
    /// Global gradient L2 norm cap applied before the update; 0 disables it.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            seed: 1,
            lr_decay_at: 2.0 / 3.0,
            lr_decay: 0.1,
            clip_norm: 10.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr_decay_at must be in [0, 1] and lr_decay > 0".into()));
        }
        if !(self.clip_norm >= 0.0) || !self.clip_norm.is_finite() {
            return Err(Error::Config(format!("clip norm {} must be >= 0", self.clip_norm)));
        }
        Ok(())
    }

    /// Step-decayed learning rate for `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let boundary = (self.epochs as f64 * self.lr_decay_at).round() as usize;
        if epoch >= boundary && self.epochs > 0 {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

/// Per-parameter velocity buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState<T> {
    pub velocity: BTreeMap<String, Vec<T>>,
}

/// Momentum SGD with coupled weight decay:
/// `v ← m·v + g + wd·p`, `p ← p − lr·v`.
///
/// With `clip_norm > 0` the gradients are first scaled by
/// `min(1, clip_norm / ‖g‖)`, `‖g‖` taken over all parameters jointly.
///
/// Parameters without a gradient entry are left untouched (their velocity
/// too). A non-finite gradient aborts before anything is modified.
pub fn sgd_step<T: Real>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut SgdState<T>,
    opt: &OptimConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Diverged(format!("non-finite gradient for parameter {name}")));
        }
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => {
                return Err(Error::dim(
                    "sgd_step",
                    format!("gradient of {name} has shape {:?}, parameter {:?}", g.shape(), p.shape()),
                ))
            }
            None => return Err(Error::Config(format!("gradient for unknown parameter {name}"))),
        }
    }
    let (m, wd, lr) = (T::lit(opt.momentum), T::lit(opt.weight_decay), T::lit(lr));
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    let clip = if opt.clip_norm > 0.0 && norm > opt.clip_norm {
        T::lit(opt.clip_norm / norm)
    } else {
        T::one()
    };
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vi = m * *vi + clip * gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_owned(), Tensor::scalar(v))])
    }

    fn plain(lr: f64, momentum: f64) -> OptimConfig {
        OptimConfig {
            lr,
            momentum,
            weight_decay: 0.0,
            clip_norm: 0.0,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn plain_descent() {
        let mut p = one("w", 2.0);
        let mut s = SgdState::default();
        sgd_step(&mut p, &one("w", 0.5), &mut s, &plain(0.1, 0.0), 0.1).unwrap();
        assert!((p["w"].data()[0] - 1.95).abs() < 1e-15);
    }

    #[test]
    fn velocity_keeps_moving_without_gradient() {
        let mut p = one("w", 0.0);
        let mut s = SgdState::default();
        s.velocity.insert("w".into(), vec![2.0]);
        sgd_step(&mut p, &one("w", 0.0), &mut s, &plain(0.1, 0.5), 0.1).unwrap();
        // v = 0.5·2 = 1, p = −0.1
        assert!((p["w"].data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn two_steps_on_x_squared() {
        // f = x², x0 = 1, lr 0.1, m 0.9:
        // v1 = 2, x1 = 0.8; v2 = 0.9·2 + 1.6 = 3.4, x2 = 0.46
        let opt = plain(0.1, 0.9);
        let mut p = one("x", 1.0);
        let mut s = SgdState::default();
        for want in [0.8, 0.46] {
            let x = p["x"].data()[0];
            sgd_step(&mut p, &one("x", 2.0 * x), &mut s, &opt, opt.lr).unwrap();
            assert!((p["x"].data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = one("stage1/block0/conv1/w", 1.0);
        let mut s = SgdState::default();
        let err = sgd_step(&mut p, &one("stage1/block0/conv1/w", f64::NAN), &mut s, &plain(0.1, 0.0), 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("stage1/block0/conv1/w"));
        assert_eq!(p["stage1/block0/conv1/w"].data()[0], 1.0);
    }

    #[test]
    fn clipping_scales_joint_norm() {
        let opt = OptimConfig {
            clip_norm: 1.0,
            ..plain(1.0, 0.0)
        };
        let mut p: BTreeMap<String, Tensor<f64>> = [("a", 0.0), ("b", 0.0)]
            .map(|(n, v)| (n.to_owned(), Tensor::scalar(v)))
            .into();
        let g = [("a", 3.0), ("b", 4.0)].map(|(n, v)| (n.to_owned(), Tensor::scalar(v))).into();
        sgd_step(&mut p, &g, &mut SgdState::default(), &opt, 1.0).unwrap();
        assert!((p["a"].data()[0] + 0.6).abs() < 1e-15);
        assert!((p["b"].data()[0] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn schedule_decays_at_two_thirds() {
        let opt = OptimConfig {
            epochs: 30,
            ..OptimConfig::default()
        };
        assert_eq!(opt.lr_at(19), 0.01);
        assert!((opt.lr_at(20) - 0.001).abs() < 1e-15);
    }
}

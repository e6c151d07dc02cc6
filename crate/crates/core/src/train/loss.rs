//! Two-head detection loss: cross-entropy plus smooth-L1 box regression.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Sampled outputs of one head.
pub struct HeadBatch<'a, T> {
    /// `[S, K]` class logits of the sampled rows.
    pub logits: Var,
    /// One class index per logit row.
    pub labels: &'a [usize],
    /// `[P, 4]` predicted deltas of the positive rows; `None` when P = 0.
    pub reg: Option<Var>,
    /// `4P` regression targets matching `reg`.
    pub reg_targets: &'a [T],
}

/// Loss terms as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub roi_cls: Var,
    pub roi_reg: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub total: f64,
}

impl LossVars {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> LossReport {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossReport {
            rpn_cls: v(self.rpn_cls),
            rpn_reg: v(self.rpn_reg),
            roi_cls: v(self.roi_cls),
            roi_reg: v(self.roi_reg),
            total: v(self.total),
        }
    }
}

/// Mean cross-entropy and positive-normalized smooth-L1 of one head. The
/// regression term is a constant 0 without positives.
pub fn head_loss<T: Real>(g: &mut Graph<T>, head: &HeadBatch<'_, T>) -> Result<(Var, Var)> {
    let cls = g.softmax_cross_entropy(head.logits, head.labels)?;
    let reg = match head.reg {
        Some(pred) => {
            let rows = head.reg_targets.len() / 4;
            if rows == 0 || head.reg_targets.len() % 4 != 0 {
                return Err(Error::dim(
                    "detection_loss",
                    format!("{} regression targets is not a positive multiple of 4", head.reg_targets.len()),
                ));
            }
            g.smooth_l1(pred, head.reg_targets, T::from_usize_lossy(rows))?
        }
        None => g.input(Tensor::scalar(T::zero())),
    };
    Ok((cls, reg))
}

/// `rpn_cls + λ·rpn_reg + roi_cls + λ·roi_reg`.
pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    rpn: &HeadBatch<'_, T>,
    roi: &HeadBatch<'_, T>,
    lambda: f64,
) -> Result<LossVars> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("loss weight {lambda} must be > 0")));
    }
    let (rpn_cls, rpn_reg) = head_loss(g, rpn)?;
    let (roi_cls, roi_reg) = head_loss(g, roi)?;
    let l = T::lit(lambda);
    let a = g.scale(rpn_reg, l)?;
    let b = g.scale(roi_reg, l)?;
    let s1 = g.add(rpn_cls, a)?;
    let s2 = g.add(roi_cls, b)?;
    let total = g.add(s1, s2)?;
    Ok(LossVars {
        rpn_cls,
        rpn_reg,
        roi_cls,
        roi_reg,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln4() {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::zeros(&[3, 4]));
        let rpn_logits = g.param(Tensor::zeros(&[2, 2]));
        let rpn = HeadBatch {
            logits: rpn_logits,
            labels: &[0, 1],
            reg: None,
            reg_targets: &[],
        };
        let roi = HeadBatch {
            logits,
            labels: &[0, 2, 3],
            reg: None,
            reg_targets: &[],
        };
        let r = detection_loss(&mut g, &rpn, &roi, 1.0).unwrap().report(&g);
        assert!((r.roi_cls - 4f64.ln()).abs() < 1e-12);
        assert!((r.rpn_cls - 2f64.ln()).abs() < 1e-12);
        assert_eq!(r.rpn_reg, 0.0);
        assert!((r.total - (r.rpn_cls + r.rpn_reg + r.roi_cls + r.roi_reg)).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_is_near_zero() {
        let mut g = Graph::<f64>::new();
        let big = 40.0;
        let l1 = g.param(Tensor::from_f64(&[1, 2], &[0.0, big]).unwrap());
        let l2 = g.param(Tensor::from_f64(&[1, 4], &[0.0, 0.0, big, 0.0]).unwrap());
        let p1 = g.param(Tensor::from_f64(&[1, 4], &[0.1, 0.2, 0.3, 0.4]).unwrap());
        let p2 = g.param(Tensor::from_f64(&[1, 4], &[0.5, 0.5, 0.5, 0.5]).unwrap());
        let rpn = HeadBatch {
            logits: l1,
            labels: &[1],
            reg: Some(p1),
            reg_targets: &[0.1, 0.2, 0.3, 0.4],
        };
        let roi = HeadBatch {
            logits: l2,
            labels: &[2],
            reg: Some(p2),
            reg_targets: &[0.5; 4],
        };
        let r = detection_loss(&mut g, &rpn, &roi, 1.0).unwrap().report(&g);
        assert!(r.total < 1e-12, "{r:?}");
    }

    #[test]
    fn lambda_weights_regression() {
        let mut g = Graph::<f64>::new();
        let l = g.param(Tensor::zeros(&[1, 2]));
        let p = g.param(Tensor::from_f64(&[1, 4], &[1.0, 0.0, 0.0, 0.0]).unwrap());
        let head = HeadBatch {
            logits: l,
            labels: &[0],
            reg: Some(p),
            reg_targets: &[0.0; 4],
        };
        let r = detection_loss(&mut g, &head, &head, 2.0).unwrap().report(&g);
        // smooth-L1 at 1 is 0.5 per head
        assert!((r.total - 2.0 * (2f64.ln() + 2.0 * 0.5)).abs() < 1e-12);
        assert!(detection_loss(&mut g, &head, &head, 0.0).is_err());
    }
}

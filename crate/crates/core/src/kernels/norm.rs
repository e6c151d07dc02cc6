//! Per-channel batch normalization over `[N, C, H, W]`.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM_STAT: f64 = 0.9;

/// Learnable scale/shift plus running statistics of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    /// Weight kept on the old running statistic at each update.
    pub momentum_stat: T,
}

impl<T: Real> BnParams<T> {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::lit(DEFAULT_EPS),
            momentum_stat: T::lit(DEFAULT_MOMENTUM_STAT),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Running statistics borrowed from a parameter store during a forward pass.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
    pub eps: T,
    pub momentum_stat: T,
}

/// Values saved by the forward pass for the adjoint.
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub training: bool,
}

pub fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: RunningStats<'_, T>,
    training: bool,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    for (name, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running_mean", stats.mean.len()),
        ("running_var", stats.var.len()),
    ] {
        if len != c {
            return Err(Error::dim(
                "batch_norm",
                format!("{name} has length {len} but input axis 1 has {c} channels"),
            ));
        }
    }
    if !(stats.eps > T::zero()) {
        return Err(Error::Contract("batch_norm eps must be positive".into()));
    }
    let plane = h * w;
    let m = n * plane;
    if training && m < 2 {
        return Err(Error::DegenerateStatistics {
            op: "batch_norm",
            detail: format!("training mode needs at least 2 values per channel, got {m}"),
        });
    }
    let data = x.data();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    let mut inv_std = vec![T::zero(); c];
    let mf = T::from_usize_lossy(m);

    for ch in 0..c {
        let idx = |b: usize| (b * c + ch) * plane;
        let (mean, var) = if training {
            let mut sum = T::zero();
            for b in 0..n {
                sum += data[idx(b)..idx(b) + plane].iter().copied().sum::<T>();
            }
            let mean = sum / mf;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &data[idx(b)..idx(b) + plane] {
                    let d = v - mean;
                    sq += d * d;
                }
            }
            let var = sq / mf;
            let unbiased = sq / T::from_usize_lossy(m - 1);
            let keep = stats.momentum_stat;
            stats.mean[ch] = keep * stats.mean[ch] + (T::one() - keep) * mean;
            stats.var[ch] = keep * stats.var[ch] + (T::one() - keep) * unbiased;
            (mean, var)
        } else {
            (stats.mean[ch], stats.var[ch])
        };
        let is = T::one() / (var + stats.eps).sqrt();
        inv_std[ch] = is;
        for b in 0..n {
            let range = idx(b)..idx(b) + plane;
            for ((o, xh), &v) in out[range.clone()]
                .iter_mut()
                .zip(&mut xhat[range.clone()])
                .zip(&data[range])
            {
                *xh = (v - mean) * is;
                *o = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        BnCache {
            xhat,
            inv_std,
            training,
        },
    ))
}

pub struct BnGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(
    shape: (usize, usize, usize, usize),
    gamma: &[T],
    cache: &BnCache<T>,
    gout: &[T],
) -> BnGrads<T> {
    let (n, c, h, w) = shape;
    let plane = h * w;
    let mf = T::from_usize_lossy(n * plane);
    let mut dx = vec![T::zero(); gout.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let ranges = (0..n).map(|b| {
            let s = (b * c + ch) * plane;
            s..s + plane
        });
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for r in ranges.clone() {
            for (&dy, &xh) in gout[r.clone()].iter().zip(&cache.xhat[r]) {
                sum_dy += dy;
                sum_dy_xhat += dy * xh;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch];
        for r in ranges {
            for ((d, &dy), &xh) in dx[r.clone()].iter_mut().zip(&gout[r.clone()]).zip(&cache.xhat[r]) {
                *d = if cache.training {
                    scale * (dy - sum_dy / mf - xh * sum_dy_xhat / mf)
                } else {
                    scale * dy
                };
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

/// Graph-free normalization of a plain tensor.
pub fn batch_norm<T: Real>(x: &Tensor<T>, p: &mut BnParams<T>, training: bool) -> Result<Tensor<T>> {
    let stats = RunningStats {
        mean: &mut p.running_mean,
        var: &mut p.running_var,
        eps: p.eps,
        momentum_stat: p.momentum_stat,
    };
    batch_norm_forward(x, &p.gamma, &p.beta, stats, training).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_maps_to_beta() {
        // Zero variance: x̂ = 0 / sqrt(eps) = 0 exactly, so y = beta.
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 4.25);
        let mut p = BnParams::identity(1);
        p.beta = vec![5.0];
        let y = batch_norm(&x, &mut p, true).unwrap();
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[1.0, 3.0]).unwrap();
        let mut p = BnParams::identity(1);
        batch_norm(&x, &mut p, true).unwrap();
        // batch mean 2, unbiased var 2
        assert!((p.running_mean[0] - 0.1 * 2.0).abs() < 1e-15);
        assert!((p.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn single_value_channel_is_degenerate_in_training() {
        let x = Tensor::<f64>::ones(&[1, 2, 1, 1]);
        let mut p = BnParams::identity(2);
        assert!(matches!(
            batch_norm(&x, &mut p, true),
            Err(Error::DegenerateStatistics { .. })
        ));
        assert!(batch_norm(&x, &mut p, false).is_ok());
    }

    #[test]
    fn wrong_parameter_length_is_dimension_error() {
        let x = Tensor::<f64>::ones(&[1, 2, 2, 2]);
        let mut p = BnParams::identity(3);
        assert!(matches!(batch_norm(&x, &mut p, true), Err(Error::Dimension { .. })));
    }
}

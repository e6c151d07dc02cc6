//! Position-sensitive RoI pooling and voting.
//!
//! A bank of `k²·G` score maps is read through a `k×k` grid laid over each
//! RoI. Bin `(i, j)` (row `i`, column `j`) pools channel group `i·k + j`
//! only, so channel `(i·k + j)·G + g` feeds output `[g, i, j]`. A feature
//! cell belongs to a bin when its center falls in the bin's half-open
//! interval; bins are averaged and empty bins produce 0.

use std::ops::Range;

use crate::detect::geometry::Roi;
use crate::error::{Error, Result};
use crate::kernels::softmax_rows;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Grid side, class count and feature stride of the position-sensitive head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PsHeadConfig {
    pub k: usize,
    /// Foreground classes; the score maps also carry background.
    pub classes: usize,
    pub feature_stride: usize,
}

impl PsHeadConfig {
    pub fn groups(&self) -> usize {
        self.classes + 1
    }

    pub fn cls_channels(&self) -> usize {
        self.k * self.k * self.groups()
    }

    pub fn reg_channels(&self) -> usize {
        4 * self.k * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.classes == 0 || self.feature_stride == 0 {
            return Err(Error::Config(format!(
                "position-sensitive head needs k, classes and stride >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Feature cells covered by each bin of one RoI: `rows[i]` and `cols[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinLayout {
    pub rows: Vec<Range<usize>>,
    pub cols: Vec<Range<usize>>,
}

impl BinLayout {
    pub fn cell_count(&self, i: usize, j: usize) -> usize {
        self.rows[i].len() * self.cols[j].len()
    }
}

fn covered(lo: f64, hi: f64, extent: usize) -> Range<usize> {
    let mut inside = (0..extent).filter(|&c| {
        let center = c as f64 + 0.5;
        lo <= center && center < hi
    });
    match inside.next() {
        Some(first) => first..inside.last().unwrap_or(first) + 1,
        None => 0..0,
    }
}

/// Bin layout of `roi` on an `hf × wf` map at `stride` pixels per cell.
pub fn bin_layout(roi: &Roi, k: usize, stride: usize, hf: usize, wf: usize) -> Result<BinLayout> {
    let b = &roi.bbox;
    if !b.is_valid() {
        return Err(Error::Geometry(format!("invalid RoI {b:?}")));
    }
    let s = stride as f64;
    let (fx1, fy1, fx2, fy2) = (b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s);
    if fx2 <= 0.0 || fy2 <= 0.0 || fx1 >= wf as f64 || fy1 >= hf as f64 {
        return Err(Error::Geometry(format!(
            "RoI {b:?} lies outside the {hf}x{wf} feature map (stride {stride})"
        )));
    }
    let (bw, bh) = ((fx2 - fx1) / k as f64, (fy2 - fy1) / k as f64);
    let rows = (0..k)
        .map(|i| covered(fy1 + i as f64 * bh, fy1 + (i + 1) as f64 * bh, hf))
        .collect();
    let cols = (0..k)
        .map(|j| covered(fx1 + j as f64 * bw, fx1 + (j + 1) as f64 * bw, wf))
        .collect();
    Ok(BinLayout { rows, cols })
}

fn check_maps<T: Real>(maps: &Tensor<T>, roi: &Roi, k: usize, groups: usize) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = maps.dims4("ps_roi_pool")?;
    if k == 0 || groups == 0 {
        return Err(Error::dim("ps_roi_pool", "k and group size must be positive"));
    }
    if c != k * k * groups {
        return Err(Error::dim(
            "ps_roi_pool",
            format!("axis 1 has {c} channels, expected k²·groups = {}", k * k * groups),
        ));
    }
    if roi.batch_index >= n {
        return Err(Error::dim(
            "ps_roi_pool",
            format!("RoI batch index {} out of range for batch {n}", roi.batch_index),
        ));
    }
    Ok((n, c, h, w))
}

/// Pools one RoI into `[groups, k, k]` and returns the layout used.
pub fn ps_roi_pool_groups<T: Real>(
    maps: &Tensor<T>,
    roi: &Roi,
    k: usize,
    groups: usize,
    stride: usize,
) -> Result<(Vec<T>, BinLayout)> {
    let (_, c, h, w) = check_maps(maps, roi, k, groups)?;
    let layout = bin_layout(roi, k, stride, h, w)?;
    let data = maps.data();
    let mut out = vec![T::zero(); groups * k * k];
    for i in 0..k {
        for j in 0..k {
            let count = layout.cell_count(i, j);
            if count == 0 {
                continue;
            }
            let inv = T::one() / T::from_usize_lossy(count);
            for g in 0..groups {
                let ch = (i * k + j) * groups + g;
                let plane = (roi.batch_index * c + ch) * h * w;
                let mut acc = T::zero();
                for y in layout.rows[i].clone() {
                    let row = plane + y * w;
                    acc += data[row + layout.cols[j].start..row + layout.cols[j].end]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
                out[(g * k + i) * k + j] = acc * inv;
            }
        }
    }
    Ok((out, layout))
}

/// Adjoint of [`ps_roi_pool_groups`] for one RoI, accumulated into `dmaps`.
pub fn ps_roi_pool_backward<T: Real>(
    maps_shape: &[usize],
    roi: &Roi,
    layout: &BinLayout,
    k: usize,
    groups: usize,
    gout: &[T],
    dmaps: &mut [T],
) {
    let (c, h, w) = (maps_shape[1], maps_shape[2], maps_shape[3]);
    for i in 0..k {
        for j in 0..k {
            let count = layout.cell_count(i, j);
            if count == 0 {
                continue;
            }
            let inv = T::one() / T::from_usize_lossy(count);
            for g in 0..groups {
                let share = gout[(g * k + i) * k + j] * inv;
                let ch = (i * k + j) * groups + g;
                let plane = (roi.batch_index * c + ch) * h * w;
                for y in layout.rows[i].clone() {
                    let row = plane + y * w;
                    for d in &mut dmaps[row + layout.cols[j].start..row + layout.cols[j].end] {
                        *d += share;
                    }
                }
            }
        }
    }
}

/// Class score maps `[N, k²(C+1), Hf, Wf]` pooled for one RoI into `[C+1, k, k]`.
pub fn ps_roi_pool<T: Real>(cls_maps: &Tensor<T>, roi: &Roi, ps: &PsHeadConfig) -> Result<Tensor<T>> {
    let (v, _) = ps_roi_pool_groups(cls_maps, roi, ps.k, ps.groups(), ps.feature_stride)?;
    Tensor::new(&[ps.groups(), ps.k, ps.k], v)
}

/// Class-agnostic box deltas voted from the `4k²` regression maps.
pub fn ps_roi_pool_reg<T: Real>(reg_maps: &Tensor<T>, roi: &Roi, ps: &PsHeadConfig) -> Result<[T; 4]> {
    let (v, _) = ps_roi_pool_groups(reg_maps, roi, ps.k, 4, ps.feature_stride)?;
    let kk = ps.k * ps.k;
    let mut out = [T::zero(); 4];
    for (d, slot) in out.iter_mut().enumerate() {
        *slot = v[d * kk..(d + 1) * kk].iter().copied().sum::<T>() / T::from_usize_lossy(kk);
    }
    Ok(out)
}

/// Averages the `k×k` positions of each class and applies softmax.
pub fn ps_vote_classify<T: Real>(pooled: &Tensor<T>) -> Result<Tensor<T>> {
    let &[groups, kh, kw] = pooled.shape() else {
        return Err(Error::dim(
            "ps_vote_classify",
            format!("expected [C+1, k, k], got {:?}", pooled.shape()),
        ));
    };
    let kk = kh * kw;
    let mut votes: Vec<T> = pooled
        .data()
        .chunks(kk)
        .map(|c| c.iter().copied().sum::<T>() / T::from_usize_lossy(kk))
        .collect();
    softmax_rows(&mut votes, groups);
    Tensor::new(&[groups], votes)
}

/// Plain average of every channel over the cells whose centers lie in the RoI.
pub fn roi_average_pool<T: Real>(maps: &Tensor<T>, roi: &Roi, stride: usize) -> Result<Vec<T>> {
    let (n, c, h, w) = maps.dims4("roi_average_pool")?;
    if roi.batch_index >= n {
        return Err(Error::dim("roi_average_pool", "batch index out of range"));
    }
    let layout = bin_layout(roi, 1, stride, h, w)?;
    let count = layout.cell_count(0, 0);
    Ok((0..c)
        .map(|ch| {
            if count == 0 {
                return T::zero();
            }
            let mut acc = T::zero();
            for y in layout.rows[0].clone() {
                for x in layout.cols[0].clone() {
                    acc += maps.at4(roi.batch_index, ch, y, x);
                }
            }
            acc / T::from_usize_lossy(count)
        })
        .collect())
}

use crate::detect::geometry::BBox;
use crate::error::{Error, Result};

/// Reference box shapes replicated at every feature cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSpec {
    /// Side of the square anchor of each scale, in pixels (`area = size²`).
    pub base_sizes: Vec<f64>,
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
}

impl AnchorSpec {
    pub fn per_location(&self) -> usize {
        self.base_sizes.len() * self.aspect_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|&x| x.is_finite() && x > 0.0);
        if !positive(&self.base_sizes) || !positive(&self.aspect_ratios) {
            return Err(Error::Config(format!("anchor sizes and ratios must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Anchor shapes `(w, h)` of one cell in ratio-major order.
    pub fn shapes(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.per_location());
        for &r in &self.aspect_ratios {
            for &s in &self.base_sizes {
                let h = s / r.sqrt();
                out.push((h * r, h));
            }
        }
        out
    }
}

/// Anchors for an `hf × wf` map. Cell `(i, j)` is centered at
/// `((j + ½)·stride, (i + ½)·stride)`; the anchor of shape `a` at that cell
/// has index `(i·wf + j)·A + a`.
pub fn generate_anchors(spec: &AnchorSpec, hf: usize, wf: usize, stride: usize) -> Vec<BBox> {
    let shapes = spec.shapes();
    let mut out = Vec::with_capacity(hf * wf * shapes.len());
    for i in 0..hf {
        for j in 0..wf {
            let cx = (j as f64 + 0.5) * stride as f64;
            let cy = (i as f64 + 0.5) * stride as f64;
            out.extend(shapes.iter().map(|&(w, h)| BBox::from_center(cx, cy, w, h)));
        }
    }
    out
}

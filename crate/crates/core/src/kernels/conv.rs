//! 2-D cross-correlation lowered to matrix multiplication (im2col).

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        bias_len: Option<usize>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (&[batch, in_channels, height, width], &[out_channels, w_in, kernel_h, kernel_w]) =
            (x_shape, w_shape)
        else {
            return Err(Error::dim(
                "conv2d",
                format!("expected rank-4 input and weight, got {x_shape:?} and {w_shape:?}"),
            ));
        };
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if w_in != in_channels {
            return Err(Error::dim(
                "conv2d",
                format!("input channel axis 1 is {in_channels} but weight axis 1 is {w_in}"),
            ));
        }
        if kernel_h > height + 2 * pad || kernel_w > width + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {kernel_h}x{kernel_w} exceeds padded input {}x{} on axes 2/3",
                    height + 2 * pad,
                    width + 2 * pad
                ),
            ));
        }
        if let Some(len) = bias_len {
            if len != out_channels {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias length {len} but weight axis 0 is {out_channels}"),
                ));
            }
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel_h) / stride + 1,
            out_w: (width + 2 * pad - kernel_w) / stride + 1,
        })
    }

    /// Rows of the lowered patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1, stride 1, unpadded: the input image already is the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Lowers one image `[Cin, H, W]` into `cols[Cin·kh·kw, oh·ow]`.
pub fn im2col<T: Real>(image: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        *slot = if x < 0 || x >= g.width as isize {
                            T::zero()
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds patch gradients back into `image`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, image: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass. Returns the output and, when `keep_cols`, the lowered patch
/// matrices of every image (reused by the backward pass).
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> Result<(Tensor<T>, ConvGeometry, Vec<T>)> {
    let g = ConvGeometry::resolve(x.shape(), w.shape(), b.map(|b| b.len()), stride, pad)?;
    let (kl, p) = (g.patch_len(), g.out_pixels());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * p;
    let mut out = vec![T::zero(); g.batch * out_len];
    let pointwise = g.is_pointwise();
    let mut saved = Vec::new();
    let mut scratch = if pointwise { Vec::new() } else { vec![T::zero(); kl * p] };

    for n in 0..g.batch {
        let image = &x.data()[n * in_len..(n + 1) * in_len];
        let cols: &[T] = if pointwise {
            image
        } else {
            im2col(image, &g, &mut scratch);
            &scratch
        };
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = b {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b.data()[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.out_channels,
            kl,
            p,
            w.data(),
            (kl as isize, 1),
            cols,
            (p as isize, 1),
            beta,
            dst,
            (p as isize, 1),
        );
        if keep_cols && !pointwise {
            saved.extend_from_slice(cols);
        }
    }
    Ok((Tensor::new(&g.out_shape(), out)?, g, saved))
}

/// Gradients of a convolution given the upstream gradient.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Backward pass. `cols` holds the saved patch matrices (empty for pointwise
/// convolutions, where the input itself is used).
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    cols: &[T],
    gout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (kl, p) = (g.patch_len(), g.out_pixels());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * p;
    let pointwise = g.is_pointwise();

    let mut dx = need.0.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = need.1.then(|| vec![T::zero(); g.out_channels * kl]);
    let mut db = need.2.then(|| vec![T::zero(); g.out_channels]);
    let mut dcols = if need.0 && !pointwise { vec![T::zero(); kl * p] } else { Vec::new() };

    for n in 0..g.batch {
        let go = &gout[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, row) in go.chunks(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        let patches = if pointwise {
            &x[n * in_len..(n + 1) * in_len]
        } else {
            &cols[n * kl * p..(n + 1) * kl * p]
        };
        if let Some(dw) = dw.as_mut() {
            // dW[co, q] += Σ_p gout[co, p] · cols[q, p]
            T::gemm(
                g.out_channels,
                p,
                kl,
                go,
                (p as isize, 1),
                patches,
                (1, p as isize),
                T::one(),
                dw,
                (kl as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * in_len..(n + 1) * in_len];
            if pointwise {
                T::gemm(
                    kl,
                    g.out_channels,
                    p,
                    w,
                    (1, kl as isize),
                    go,
                    (p as isize, 1),
                    T::zero(),
                    dst,
                    (p as isize, 1),
                );
            } else {
                T::gemm(
                    kl,
                    g.out_channels,
                    p,
                    w,
                    (1, kl as isize),
                    go,
                    (p as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (p as isize, 1),
                );
                col2im(&dcols, g, dst);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

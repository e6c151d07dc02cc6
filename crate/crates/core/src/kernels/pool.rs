use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Windowed maximum. Also returns, per output element, the flat input index
/// that won (first in row-major scan on ties).
pub fn max_pool2d_forward<T: Real>(
    x: &Tensor<T>,
    win: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("max_pool2d")?;
    if win == 0 || stride == 0 {
        return Err(Error::dim("max_pool2d", "window and stride must be positive"));
    }
    if win > h || win > w {
        return Err(Error::dim(
            "max_pool2d",
            format!("window {win} larger than input {h}x{w} on axes 2/3"),
        ));
    }
    let oh = (h - win) / stride + 1;
    let ow = (w - win) / stride + 1;
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..win {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for i in row..row + win {
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, argmax))
}

//! Binary PPM (P6, maxval 255) images and box overlays.

use std::fs;
use std::path::Path;

use crate::detect::geometry::BBox;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    /// Quantizes a `[3, H, W]` tensor in `[0, 1]` (values are clamped, then rounded).
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let &[3, height, width] = t.shape() else {
            return Err(Error::dim("ppm", format!("expected [3, H, W], got {:?}", t.shape())));
        };
        let plane = height * width;
        let mut pixels = vec![0u8; 3 * plane];
        for c in 0..3 {
            for i in 0..plane {
                let v = t.data()[c * plane + i].as_f64().clamp(0.0, 1.0);
                pixels[3 * i + c] = (v * 255.0).round() as u8;
            }
        }
        Ok(RgbImage { width, height, pixels })
    }

    /// `[3, H, W]` tensor with values `byte / 255`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut data = vec![T::zero(); 3 * plane];
        let inv = T::lit(1.0 / 255.0);
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = T::lit(self.pixels[3 * i + c] as f64) * inv;
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("image shape")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        if magic != "P6" {
            return Err(Error::Format(format!("not a binary PPM (magic {magic:?}, expected P6)")));
        }
        let mut num = |what: &str| -> Result<usize> {
            let t = token()?;
            t.parse()
                .map_err(|_| Error::Format(format!("bad PPM {what} {t:?}")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Format("PPM with zero extent".into()));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let need = 3 * width * height;
        if bytes.len() < start + need {
            return Err(Error::Format(format!(
                "PPM raster truncated: need {need} bytes, have {}",
                bytes.len().saturating_sub(start)
            )));
        }
        Ok(RgbImage {
            width,
            height,
            pixels: bytes[start..start + need].to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.pixels[i..i + 3].copy_from_slice(&rgb);
        }
    }

    /// Draws a rectangle outline `thickness` pixels wide just inside `b`
    /// (rounded to whole pixels, clipped to the image).
    pub fn draw_box(&mut self, b: &BBox, rgb: [u8; 3], thickness: usize) {
        let x1 = b.x1.round() as i64;
        let y1 = b.y1.round() as i64;
        let x2 = b.x2.round() as i64 - 1;
        let y2 = b.y2.round() as i64 - 1;
        if x2 < x1 || y2 < y1 {
            return;
        }
        for t in 0..thickness as i64 {
            for x in x1..=x2 {
                self.put(x, y1 + t, rgb);
                self.put(x, y2 - t, rgb);
            }
            for y in y1..=y2 {
                self.put(x1 + t, y, rgb);
                self.put(x2 - t, y, rgb);
            }
        }
    }
}

/// Outline color of each foreground class in overlays.
pub fn class_color(class_id: usize) -> [u8; 3] {
    match class_id {
        1 => [255, 0, 255],
        2 => [0, 255, 255],
        3 => [255, 255, 255],
        _ => [255, 128, 0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_for_64x64() {
        let img = RgbImage {
            width: 64,
            height: 64,
            pixels: vec![7; 64 * 64 * 3],
        };
        let bytes = img.encode();
        assert!(bytes.starts_with(b"P6\n64 64\n255\n"));
        assert_eq!(bytes.len(), 13 + 12288);
        assert_eq!(RgbImage::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(matches!(RgbImage::decode(b"P3\n1 1\n255\n0 0 0"), Err(Error::Format(_))));
        assert!(matches!(RgbImage::decode(b"P6\n2 2\n255\nabc"), Err(Error::Format(_))));
        assert!(RgbImage::decode(b"\x89PNG\r\n").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = RgbImage::decode(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.pixels, vec![1, 2, 3]);
    }

    #[test]
    fn tensor_round_trip_within_quantization() {
        let t = Tensor::<f64>::from_f64(&[3, 1, 2], &[0.0, 0.1, 0.5, 0.73, 1.0, 0.999]).unwrap();
        let back: Tensor<f64> = RgbImage::from_tensor(&t).unwrap().to_tensor();
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn outline_is_two_pixels() {
        let mut img = RgbImage {
            width: 8,
            height: 8,
            pixels: vec![0; 192],
        };
        img.draw_box(&BBox::new(1.0, 1.0, 7.0, 7.0), [9, 9, 9], 2);
        let lit = img.pixels.chunks(3).filter(|p| p[0] == 9).count();
        // 6x6 square minus its 2x2 interior
        assert_eq!(lit, 36 - 4);
    }
}

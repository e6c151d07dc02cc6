//! Text form of detections: `image_id class_id score x1 y1 x2 y2`.

use std::fmt::Write as _;

use crate::detect::geometry::BBox;
use crate::error::{Error, Result};

/// A detection tied to the image it was made on.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Formats like C's `%g`: 6 significant digits, trailing zeros dropped,
/// scientific notation outside `[1e-4, 1e6)`.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    // the exponent after rounding to 6 digits
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_owned()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn render_detections(dets: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            d.image_id,
            d.class_id,
            format_g6(d.score),
            format_g6(b.x1),
            format_g6(b.y1),
            format_g6(b.x2),
            format_g6(b.y2)
        );
    }
    out
}

pub fn parse_detections(origin: &str, text: &str) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Parse {
            path: origin.to_owned(),
            line: i + 1,
            detail,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad(format!(
                "expected `image_id class_id score x1 y1 x2 y2`, got {} fields",
                f.len()
            )));
        }
        let class_id = f[1].parse().map_err(|_| bad(format!("bad class id {:?}", f[1])))?;
        let mut nums = [0.0f64; 5];
        for (slot, s) in nums.iter_mut().zip(&f[2..]) {
            *slot = s.parse().map_err(|_| bad(format!("bad number {s:?}")))?;
            if !slot.is_finite() {
                return Err(bad(format!("non-finite number {s:?}")));
            }
        }
        out.push(DetectionRecord {
            image_id: f[0].to_owned(),
            class_id,
            score: nums[0],
            bbox: BBox::new(nums[1], nums[2], nums[3], nums[4]),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g6_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.5, "0.5"),
            (12.0, "12"),
            (0.123456789, "0.123457"),
            (63.99999999, "64"),
            (123456.7, "123457"),
            (999999.5, "1e+06"),
            (1234567.0, "1.23457e+06"),
            (0.0000123, "1.23e-05"),
            (0.0001, "0.0001"),
            (-2.5, "-2.5"),
        ];
        for (v, want) in cases {
            assert_eq!(format_g6(v), want, "{v}");
        }
    }

    #[test]
    fn round_trip() {
        let d = vec![DetectionRecord {
            image_id: "img00001".into(),
            class_id: 2,
            score: 0.875,
            bbox: BBox::new(3.0, 4.5, 20.25, 30.0),
        }];
        let text = render_detections(&d);
        assert_eq!(text, "img00001 2 0.875 3 4.5 20.25 30\n");
        assert_eq!(parse_detections("d", &text).unwrap(), d);
    }

    #[test]
    fn parse_errors_have_lines() {
        match parse_detections("d.txt", "a 1 0.5 0 0 1 1\n\nb 1 x 0 0 1 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}

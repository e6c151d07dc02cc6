//! Scene rendering: textured background, filled shapes, pixel noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::detect::geometry::{iou, BBox};
use crate::error::{Error, Result};
use crate::synth::{Annotation, DatasetSpec, Scene};
use crate::tensor::Tensor;

pub const CLASS_DISC: usize = 1;
pub const CLASS_SQUARE: usize = 2;
pub const CLASS_TRIANGLE: usize = 3;
pub const NUM_CLASSES: usize = 3;

/// Smallest object side in pixels.
pub const MIN_SIDE: usize = 8;
/// Largest IoU allowed between two objects of one scene (exclusive).
pub const MAX_PAIR_IOU: f64 = 0.3;
/// Placement attempts per object before giving up.
pub const PLACEMENT_ATTEMPTS: usize = 100;

const COLOR_JITTER: f64 = 0.1;

/// Mean RGB of each class before jitter (index = class id - 1).
pub const CLASS_PROTOTYPES: [[f64; 3]; NUM_CLASSES] = [
    [0.85, 0.2, 0.2],
    [0.2, 0.3, 0.85],
    [0.9, 0.85, 0.2],
];

/// Whether the point `(px, py)` lies inside the shape of class `class_id`
/// whose bounding square is `b`.
///
/// Disc: inscribed circle. Square: the box itself. Triangle: apex at the
/// top middle, base along the bottom edge.
pub fn shape_contains(class_id: usize, b: &BBox, px: f64, py: f64) -> bool {
    if px < b.x1 || px > b.x2 || py < b.y1 || py > b.y2 {
        return false;
    }
    match class_id {
        CLASS_DISC => {
            let (cx, cy) = b.center();
            let r = b.width() / 2.0;
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        CLASS_SQUARE => true,
        _ => {
            let (cx, _) = b.center();
            // half-width grows linearly from 0 at the apex to w/2 at the base
            let half = 0.5 * b.width() * (py - b.y1) / b.height();
            (px - cx).abs() <= half
        }
    }
}

/// Paints one filled shape; a pixel is covered when its center is inside.
pub fn paint_shape(image: &mut Tensor<f64>, class_id: usize, b: &BBox, rgb: [f64; 3]) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let y0 = b.y1.floor().max(0.0) as usize;
    let x0 = b.x1.floor().max(0.0) as usize;
    let y1 = (b.y2.ceil() as usize).min(h);
    let x1 = (b.x2.ceil() as usize).min(w);
    let data = image.data_mut();
    for y in y0..y1 {
        for x in x0..x1 {
            if shape_contains(class_id, b, x as f64 + 0.5, y as f64 + 0.5) {
                for (c, v) in rgb.iter().enumerate() {
                    data[c * plane + y * w + x] = *v;
                }
            }
        }
    }
}

fn background<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor<f64> {
    let base: [f64; 3] = [
        0.35 + 0.1 * rng.random::<f64>(),
        0.42 + 0.1 * rng.random::<f64>(),
        0.28 + 0.1 * rng.random::<f64>(),
    ];
    let fx = 0.15 + 0.35 * rng.random::<f64>();
    let fy = 0.15 + 0.35 * rng.random::<f64>();
    let px = std::f64::consts::TAU * rng.random::<f64>();
    let py = std::f64::consts::TAU * rng.random::<f64>();
    let amp = 0.04 + 0.05 * rng.random::<f64>();
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = amp * (fx * x as f64 + px).sin() * (fy * y as f64 + py).sin();
            for (c, b) in base.iter().enumerate() {
                data[c * h * w + y * w + x] = b + t;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("background shape")
}

/// Draws a box of integer side in `[MIN_SIDE, min(H, W) / 3]` not overlapping
/// `placed` beyond [`MAX_PAIR_IOU`].
fn place<R: Rng + ?Sized>(spec: &DatasetSpec, placed: &[Annotation], rng: &mut R) -> Option<BBox> {
    let max_side = spec.height.min(spec.width) / 3;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let s = rng.random_range(MIN_SIDE..=max_side);
        let x = rng.random_range(0..=spec.width - s) as f64;
        let y = rng.random_range(0..=spec.height - s) as f64;
        let b = BBox::new(x, y, x + s as f64, y + s as f64);
        if placed.iter().all(|a| iou(&a.bbox, &b) < MAX_PAIR_IOU) {
            return Some(b);
        }
    }
    None
}

/// Renders one scene. All randomness comes from `rng`.
pub fn render_scene<R: Rng + ?Sized>(spec: &DatasetSpec, image_id: &str, rng: &mut R) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut image = background(h, w, rng);
    let count = rng.random_range(spec.objects_min..=spec.objects_max);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);
    for _ in 0..count {
        let bbox = place(spec, &annotations, rng).ok_or(Error::Placement {
            requested: count,
            attempts: PLACEMENT_ATTEMPTS,
        })?;
        let class_id = rng.random_range(1..=NUM_CLASSES);
        let proto = CLASS_PROTOTYPES[class_id - 1];
        let rgb = proto.map(|v| (v + COLOR_JITTER * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 1.0));
        paint_shape(&mut image, class_id, &bbox, rgb);
        annotations.push(Annotation { class_id, bbox });
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
        for v in image.data_mut() {
            *v += normal.sample(rng);
        }
    }
    let image = image.map(|v| v.clamp(0.0, 1.0));
    Ok(Scene {
        image_id: image_id.to_owned(),
        image,
        annotations,
    })
}

//! Horizontal flip and four-image mosaic.

use rand::Rng;

use crate::data::AnnotatedImage;
use crate::detector::{Annotation, BBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Boxes whose normalized area falls below this after mosaic clipping are dropped.
pub const MIN_BOX_AREA: f64 = 1e-4;

/// Value of canvas pixels not covered by any source image.
const FILL: f32 = 0.5;

/// Mirrors the image about its vertical axis.
pub fn hflip(img: &AnnotatedImage) -> AnnotatedImage {
    let (h, w) = (img.height(), img.width());
    let src = img.image.data();
    let mut data = Vec::with_capacity(src.len());
    for row in src.chunks(w) {
        data.extend(row.iter().rev());
    }
    AnnotatedImage {
        image: Tensor::new(&[3, h, w], data).expect("same shape"),
        boxes: img
            .boxes
            .iter()
            .map(|a| Annotation {
                bbox: a.bbox.hflip(),
                ..*a
            })
            .collect(),
        source_id: img.source_id.clone(),
    }
}

/// Full-resolution `2S`×`2S` mosaic with the split point at pixel `center`.
///
/// Image 0 fills the top-left quadrant with its bottom-right corner at the
/// center, image 1 the top-right, image 2 the bottom-left, image 3 the
/// bottom-right, each anchored at the center. Boxes are clipped to their
/// quadrant and normalized to the canvas.
pub fn mosaic_canvas(imgs: [&AnnotatedImage; 4], center: (usize, usize)) -> Result<AnnotatedImage> {
    let s = imgs[0].height();
    if imgs.iter().any(|im| im.height() != s || im.width() != s) {
        return Err(Error::Shape(
            "mosaic needs four square images of equal size".into(),
        ));
    }
    let c = 2 * s;
    let (xc, yc) = center;
    if xc == 0 || yc == 0 || xc >= c || yc >= c {
        return Err(Error::Argument(format!(
            "mosaic center {center:?} outside the {c}x{c} canvas"
        )));
    }
    let mut data = vec![FILL; 3 * c * c];
    let mut boxes = Vec::new();
    let cf = c as f64;
    for (k, im) in imgs.iter().enumerate() {
        // Quadrant on the canvas and offset of the source image within it.
        let (qx0, qx1) = if k % 2 == 0 { (0, xc) } else { (xc, c) };
        let (qy0, qy1) = if k < 2 { (0, yc) } else { (yc, c) };
        let ox = if k % 2 == 0 {
            xc as isize - s as isize
        } else {
            xc as isize
        };
        let oy = if k < 2 {
            yc as isize - s as isize
        } else {
            yc as isize
        };
        let src = im.image.data();
        for ch in 0..3 {
            for y in qy0..qy1 {
                let sy = y as isize - oy;
                if sy < 0 || sy >= s as isize {
                    continue;
                }
                for x in qx0..qx1 {
                    let sx = x as isize - ox;
                    if sx < 0 || sx >= s as isize {
                        continue;
                    }
                    data[(ch * c + y) * c + x] = src[(ch * s + sy as usize) * s + sx as usize];
                }
            }
        }
        let clip_x = (
            qx0.max(ox.max(0) as usize) as f64,
            qx1.min((ox + s as isize).max(0) as usize) as f64,
        );
        let clip_y = (
            qy0.max(oy.max(0) as usize) as f64,
            qy1.min((oy + s as isize).max(0) as usize) as f64,
        );
        for a in &im.boxes {
            let (x1, y1, x2, y2) = a.bbox.corners();
            let sf = s as f64;
            let x1 = (x1 * sf + ox as f64).clamp(clip_x.0, clip_x.1);
            let x2 = (x2 * sf + ox as f64).clamp(clip_x.0, clip_x.1);
            let y1 = (y1 * sf + oy as f64).clamp(clip_y.0, clip_y.1);
            let y2 = (y2 * sf + oy as f64).clamp(clip_y.0, clip_y.1);
            let b = BBox::from_corners(x1 / cf, y1 / cf, x2 / cf, y2 / cf);
            if b.area() >= MIN_BOX_AREA && b.w > 0.0 && b.h > 0.0 {
                boxes.push(Annotation {
                    class_id: a.class_id,
                    bbox: b,
                });
            }
        }
    }
    Ok(AnnotatedImage {
        image: Tensor::new(&[3, c, c], data)?,
        boxes,
        source_id: imgs
            .iter()
            .map(|i| i.source_id.as_str())
            .collect::<Vec<_>>()
            .join("+"),
    })
}

/// 2×2 average pooling.
pub fn downsample2(img: &AnnotatedImage) -> AnnotatedImage {
    let (h, w) = (img.height(), img.width());
    let (h2, w2) = (h / 2, w / 2);
    let src = img.image.data();
    let mut data = vec![0f32; 3 * h2 * w2];
    for ch in 0..3 {
        for y in 0..h2 {
            for x in 0..w2 {
                let at = |dy: usize, dx: usize| src[(ch * h + 2 * y + dy) * w + 2 * x + dx];
                data[(ch * h2 + y) * w2 + x] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    AnnotatedImage {
        image: Tensor::new(&[3, h2, w2], data).expect("pooled shape"),
        boxes: img.boxes.clone(),
        source_id: img.source_id.clone(),
    }
}

/// Mosaic at a uniformly drawn center in the middle half of the canvas,
/// resized back to the source size.
pub fn mosaic<R: Rng>(imgs: [&AnnotatedImage; 4], rng: &mut R) -> Result<AnnotatedImage> {
    let s = imgs[0].height();
    let center = (
        rng.random_range(s / 2..=3 * s / 2),
        rng.random_range(s / 2..=3 * s / 2),
    );
    Ok(downsample2(&mosaic_canvas(imgs, center)?))
}

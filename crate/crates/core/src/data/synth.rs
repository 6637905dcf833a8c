//! Deterministic synthetic stand-in for the driver-monitoring images.
//!
//! Class 0 is a filled rectangle with an inscribed ellipse, class 1 the left
//! or right half of that shape, class 2 a thin rectangle tilted by up to 30°
//! from horizontal or vertical. Objects never overlap and every box is the
//! tight bound of its object's pixels.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{save_dataset, split_dataset, write_split, AnnotatedImage, SPLIT_FILE};
use crate::detector::{Annotation, BBox};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub size: usize,
    pub max_objects: usize,
}

impl SynthConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            size: 160,
            max_objects: 3,
        }
    }
}

/// Pixel mask of one object on the full canvas.
pub type Mask = Vec<bool>;

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn contrasting_color(rng: &mut ChaCha8Rng, against: [f64; 3]) -> [f64; 3] {
    loop {
        let c = [rng.random::<f64>(), rng.random(), rng.random()];
        if (luma(c) - luma(against)).abs() > 0.22 {
            return c;
        }
    }
}

impl Canvas {
    fn background(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let base = [
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
        ];
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.02..0.15),
                    rng.random_range(0.02..0.15),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.03..0.08),
                )
            })
            .collect();
        let mut px = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let tex: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                    .sum();
                px.push(std::array::from_fn(|c| {
                    base[c] + tex + rng.random_range(-0.06..0.06)
                }));
            }
        }
        Self { size, px }
    }

    fn mean(&self, mask: &Mask) -> [f64; 3] {
        let mut s = [0.0; 3];
        let mut n = 0f64;
        for (p, _) in self.px.iter().zip(mask).filter(|(_, m)| **m) {
            for c in 0..3 {
                s[c] += p[c];
            }
            n += 1.0;
        }
        s.map(|v| v / n.max(1.0))
    }

    fn paint(&mut self, rng: &mut ChaCha8Rng, mask: &Mask, color: [f64; 3]) {
        for (p, _) in self.px.iter_mut().zip(mask).filter(|(_, m)| **m) {
            *p = std::array::from_fn(|c| color[c] + rng.random_range(-0.04..0.04));
        }
    }

    fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.size as u32, self.size as u32, |x, y| {
            let p = self.px[y as usize * self.size + x as usize];
            Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }
}

/// Tight pixel bounds `(x0, y0, x1, y1)` (exclusive upper ends).
fn bounds(mask: &Mask, size: usize) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (x, y) = (i % size, i / size);
        b = Some(match b {
            None => (x, y, x + 1, y + 1),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
        });
    }
    b
}

/// Mask and shape of one object with its top-left corner at the origin, `(mask, w, h)`.
fn shape(rng: &mut ChaCha8Rng, class_id: usize) -> (Vec<bool>, Vec<bool>, usize, usize) {
    match class_id {
        0 | 1 => {
            let (w, h) = (
                rng.random_range(24..=52usize),
                rng.random_range(26..=56usize),
            );
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            let ellipse: Vec<bool> = (0..w * h)
                .map(|i| {
                    let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                    ((x - cx) / cx).powi(2) + ((y - cy) / cy).powi(2) <= 1.0
                })
                .collect();
            if class_id == 0 {
                return (vec![true; w * h], ellipse, w, h);
            }
            let half = w / 2;
            let left = rng.random_bool(0.5);
            let keep = |x: usize| if left { x < half } else { x >= half };
            let (x0, nw) = if left { (0, half) } else { (half, w - half) };
            let crop = |m: &[bool]| -> Vec<bool> {
                (0..nw * h)
                    .map(|i| keep(x0 + i % nw) && m[(i / nw) * w + x0 + i % nw])
                    .collect()
            };
            (crop(&vec![true; w * h]), crop(&ellipse), nw, h)
        }
        _ => {
            let len = rng.random_range(30.0..64.0);
            let thick = rng.random_range(5.0..9.0);
            let vertical = rng.random_bool(0.5);
            let tilt = rng.random_range(-PI / 6.0..PI / 6.0);
            let theta = if vertical { PI / 2.0 + tilt } else { tilt };
            let (ux, uy) = (theta.cos(), theta.sin());
            let ext_x = (len * ux.abs() + thick * uy.abs()).ceil() as usize + 2;
            let ext_y = (len * uy.abs() + thick * ux.abs()).ceil() as usize + 2;
            let (cx, cy) = (ext_x as f64 / 2.0, ext_y as f64 / 2.0);
            let body: Vec<bool> = (0..ext_x * ext_y)
                .map(|i| {
                    let (dx, dy) = ((i % ext_x) as f64 + 0.5 - cx, (i / ext_x) as f64 + 0.5 - cy);
                    let along = dx * ux + dy * uy;
                    let across = -dx * uy + dy * ux;
                    along.abs() <= len / 2.0 && across.abs() <= thick / 2.0
                })
                .collect();
            let screen = vec![false; ext_x * ext_y];
            (body, screen, ext_x, ext_y)
        }
    }
}

/// One image with its per-object masks.
pub fn render_sample(
    rng: &mut ChaCha8Rng,
    size: usize,
    max_objects: usize,
    id: &str,
) -> (AnnotatedImage, Vec<Mask>) {
    let mut canvas = Canvas::background(rng, size);
    let n_obj = rng.random_range(1..=max_objects.max(1));
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut boxes = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..n_obj {
        let class_id = rng.random_range(0..3usize);
        let (body, inner, w, h) = shape(rng, class_id);
        if w + 2 >= size || h + 2 >= size {
            continue;
        }
        let spot = (0..50).find_map(|_| {
            let (x0, y0) = (
                rng.random_range(1..size - w - 1),
                rng.random_range(1..size - h - 1),
            );
            let clear = placed.iter().all(|&(a0, b0, a1, b1)| {
                x0 + w + 2 <= a0 || a1 + 2 <= x0 || y0 + h + 2 <= b0 || b1 + 2 <= y0
            });
            clear.then_some((x0, y0))
        });
        let Some((x0, y0)) = spot else { continue };
        let place = |m: &[bool]| -> Mask {
            let mut full = vec![false; size * size];
            for (i, _) in m.iter().enumerate().filter(|(_, v)| **v) {
                full[(y0 + i / w) * size + x0 + i % w] = true;
            }
            full
        };
        let (body, inner) = (place(&body), place(&inner));
        let Some((bx0, by0, bx1, by1)) = bounds(&body, size) else {
            continue;
        };
        let bg = canvas.mean(&body);
        let outer = contrasting_color(rng, bg);
        canvas.paint(rng, &body, outer);
        if inner.iter().any(|v| *v) {
            let fill = contrasting_color(rng, outer);
            canvas.paint(rng, &inner, fill);
        }
        placed.push((x0, y0, x0 + w, y0 + h));
        let s = size as f64;
        boxes.push(Annotation {
            class_id,
            bbox: BBox::from_corners(
                bx0 as f64 / s,
                by0 as f64 / s,
                bx1 as f64 / s,
                by1 as f64 / s,
            ),
        });
        masks.push(body);
    }
    (AnnotatedImage::from_rgb(&canvas.to_rgb(), boxes, id), masks)
}

pub fn synth_samples(cfg: &SynthConfig) -> Vec<AnnotatedImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n)
        .map(|i| {
            render_sample(
                &mut rng,
                cfg.size,
                cfg.max_objects,
                &format!("synth_{i:05}"),
            )
            .0
        })
        .collect()
}

/// Renders the dataset under `out` with a seeded 7:2:1 split file; returns the files written.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<Vec<PathBuf>> {
    if cfg.n < 10 {
        return Err(Error::Argument(format!(
            "need at least 10 images, got {}",
            cfg.n
        )));
    }
    if cfg.size < 96 {
        return Err(Error::Argument(format!(
            "image size {} too small for the object sizes",
            cfg.size
        )));
    }
    let samples = synth_samples(cfg);
    let mut written = save_dataset(out, &samples)?;
    let stems: Vec<String> = samples.iter().map(|s| s.source_id.clone()).collect();
    let split = split_dataset(samples.len(), cfg.seed)?;
    let split_path = out.join(SPLIT_FILE);
    write_split(&split_path, &split, &stems)?;
    written.push(split_path);
    Ok(written)
}

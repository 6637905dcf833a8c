//! On-disk datasets (`images/*.png` + `labels/*.txt`), the 7:2:1 split and
//! the synthetic generator.

pub mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{Annotation, BBox, Detection};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use self::synth::{synth_generate, SynthConfig};

pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";
pub const SPLIT_FILE: &str = "split.txt";
const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

/// An RGB image in `[0, 1]`, `[3, H, W]`, with its objects.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image: Tensor<f32>,
    pub boxes: Vec<Annotation>,
    pub source_id: String,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn from_rgb(img: &RgbImage, boxes: Vec<Annotation>, source_id: impl Into<String>) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
            }
        }
        Self {
            image: Tensor::new(&[3, h, w], data).expect("rgb shape"),
            boxes,
            source_id: source_id.into(),
        }
    }

    pub fn to_rgb(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        let d = self.image.data();
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([px(0), px(1), px(2)])
        })
    }

    /// Same image at `size`×`size`; boxes are normalized so they carry over.
    pub fn resized(&self, size: usize) -> Self {
        if self.height() == size && self.width() == size {
            return self.clone();
        }
        let img = imageops::resize(
            &self.to_rgb(),
            size as u32,
            size as u32,
            imageops::FilterType::Triangle,
        );
        Self::from_rgb(&img, self.boxes.clone(), self.source_id.clone())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<AnnotatedImage>,
    /// Images that could not be decoded.
    pub skipped: Vec<PathBuf>,
}

/// Parses one label file: `class_id cx cy w h` per line, normalized.
pub fn parse_labels(path: &Path, text: &str, num_classes: usize) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            file: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!(
                "expected 5 fields 'class cx cy w h', found {}",
                fields.len()
            )));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id '{}'", fields[0])))?;
        if class_id >= num_classes {
            return Err(err(format!(
                "class id {class_id} out of range 0..{num_classes}"
            )));
        }
        let mut v = [0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("bad number '{f}'")))?;
        }
        let bbox = BBox::new(v[0], v[1], v[2], v[3]);
        if !bbox.is_valid() {
            return Err(err(format!("box {v:?} outside the normalized range")));
        }
        out.push(Annotation { class_id, bbox });
    }
    Ok(out)
}

pub fn format_labels(boxes: &[Annotation]) -> String {
    boxes
        .iter()
        .map(|a| {
            format!(
                "{} {:.6} {:.6} {:.6} {:.6}\n",
                a.class_id, a.bbox.cx, a.bbox.cy, a.bbox.w, a.bbox.h
            )
        })
        .collect()
}

/// `class cx cy w h score` per detection.
pub fn format_detections(dets: &[Detection]) -> String {
    dets.iter()
        .map(|d| {
            let b = d.bbox;
            format!(
                "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
                d.class_id, b.cx, b.cy, b.w, b.h, d.score
            )
        })
        .collect()
}

/// Image files of a directory (sorted), or the path itself if it is a file.
pub fn list_images(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    image_paths(path)
}

/// One unlabeled image.
pub fn load_image(path: &Path) -> Result<AnnotatedImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(AnnotatedImage::from_rgb(
        &img.to_rgb8(),
        Vec::new(),
        stem(path),
    ))
}

const CLASS_COLORS: [[u8; 3]; 4] = [[230, 40, 40], [40, 200, 60], [40, 90, 230], [230, 200, 30]];

/// Draws one-pixel outlines of `dets` over the image and saves it as PNG.
pub fn save_overlay(path: &Path, sample: &AnnotatedImage, dets: &[Detection]) -> Result<()> {
    let mut img = sample.to_rgb();
    let (w, h) = (img.width() as f64, img.height() as f64);
    for d in dets {
        let (x1, y1, x2, y2) = d.bbox.corners();
        let px = |v: f64, n: f64| (v * n).round().clamp(0.0, n - 1.0) as u32;
        let (x1, x2, y1, y2) = (px(x1, w), px(x2, w), px(y1, h), px(y2, h));
        let c = Rgb(CLASS_COLORS[d.class_id % CLASS_COLORS.len()]);
        for x in x1..=x2 {
            img.put_pixel(x, y1, c);
            img.put_pixel(x, y2, c);
        }
        for y in y1..=y2 {
            img.put_pixel(x1, y, c);
            img.put_pixel(x2, y, c);
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads `root/images/*` with labels from `root/labels/{stem}.txt`.
///
/// A missing label file means no objects. Undecodable images are skipped
/// with a warning; malformed labels are hard errors.
pub fn load_dataset(root: &Path, num_classes: usize) -> Result<Dataset> {
    let img_dir = root.join(IMAGES_DIR);
    if !img_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "{} has no {IMAGES_DIR}/ directory",
            root.display()
        )));
    }
    let mut ds = Dataset::default();
    for path in image_paths(&img_dir)? {
        let id = stem(&path);
        let label_path = root.join(LABELS_DIR).join(format!("{id}.txt"));
        let boxes = match fs::read_to_string(&label_path) {
            Ok(text) => parse_labels(&label_path, &text, num_classes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(label_path, e)),
        };
        match image::open(&path) {
            Ok(img) => ds
                .samples
                .push(AnnotatedImage::from_rgb(&img.to_rgb8(), boxes, id)),
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", path.display());
                ds.skipped.push(path);
            }
        }
    }
    Ok(ds)
}

/// Writes samples as PNG plus label text; returns the files written.
pub fn save_dataset(root: &Path, samples: &[AnnotatedImage]) -> Result<Vec<PathBuf>> {
    let (img_dir, lbl_dir) = (root.join(IMAGES_DIR), root.join(LABELS_DIR));
    for d in [&img_dir, &lbl_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut written = Vec::with_capacity(2 * samples.len());
    for s in samples {
        let ip = img_dir.join(format!("{}.png", s.source_id));
        s.to_rgb().save(&ip).map_err(|e| Error::Image {
            path: ip.clone(),
            source: e,
        })?;
        let lp = lbl_dir.join(format!("{}.txt", s.source_id));
        fs::write(&lp, format_labels(&s.boxes)).map_err(|e| Error::io(&lp, e))?;
        written.extend([ip, lp]);
    }
    Ok(written)
}

/// Index lists into a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle then a contiguous 70/20/10 cut.
pub fn split_dataset(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 10 {
        return Err(Error::Dataset(format!(
            "need at least 10 samples to split, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = (0.2 * n as f64).round() as usize;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(DatasetSplit {
        train: idx,
        val,
        test,
    })
}

/// Split file: `[train]`, `[val]`, `[test]` sections listing one stem per line.
pub fn write_split(path: &Path, split: &DatasetSplit, stems: &[String]) -> Result<()> {
    let mut s = String::new();
    for (name, part) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        s.push_str(&format!("[{name}]\n"));
        for &i in part {
            s.push_str(&stems[i]);
            s.push('\n');
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a split file and resolves stems against `stems`.
pub fn read_split(path: &Path, stems: &[String]) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut current: Option<usize> = None;
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            file: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line {
            "[train]" => current = Some(0),
            "[val]" => current = Some(1),
            "[test]" => current = Some(2),
            _ if line.starts_with('[') => return Err(err(format!("unknown section {line}"))),
            _ => {
                let sec = current.ok_or_else(|| err("entry before any section".into()))?;
                let idx = stems
                    .iter()
                    .position(|s| s == line)
                    .ok_or_else(|| err(format!("unknown sample '{line}'")))?;
                if !seen.insert(idx) {
                    return Err(err(format!("sample '{line}' listed twice")));
                }
                parts[sec].push(idx);
            }
        }
    }
    let [train, val, test] = parts;
    Ok(DatasetSplit { train, val, test })
}

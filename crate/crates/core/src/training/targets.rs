//! Center-cell target assignment and the detection loss with its analytic gradient.

use crate::detector::boxes::sigmoid;
use crate::detector::{decode_cell, encode_cell, Annotation, BBox, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Weight of the box term relative to classification.
pub const BOX_WEIGHT: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Positive {
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
    pub bbox: BBox,
    /// Regressor values that decode exactly to `bbox` from this cell.
    pub t: [f64; 4],
}

/// Positive cells of one image, per scale.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetAssignment {
    pub scales: Vec<Vec<Positive>>,
}

impl TargetAssignment {
    pub fn num_positives(&self) -> usize {
        self.scales.iter().map(|s| s.len()).sum()
    }
}

/// Scale a box prefers: the largest stride `s` with `max_side ≥ 2s/S`, else the finest.
pub fn preferred_scale(b: &BBox, strides: &[usize], input_size: usize) -> usize {
    (0..strides.len())
        .rev()
        .find(|&i| b.max_side() >= 2.0 * strides[i] as f64 / input_size as f64)
        .unwrap_or(0)
}

/// Assigns each box to the grid cell containing its center at its preferred scale.
///
/// Boxes are visited smallest first; a box whose cell is already taken falls
/// back to the next finer scales, then the coarser ones. A box is dropped
/// only if every scale's cell is taken or cannot represent it.
pub fn assign_targets(gts: &[Annotation], cfg: &ModelConfig) -> TargetAssignment {
    let strides = &cfg.strides;
    let size = cfg.input_size;
    let mut scales: Vec<Vec<Positive>> = vec![Vec::new(); strides.len()];
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| gts[a].bbox.area().total_cmp(&gts[b].bbox.area()));
    for i in order {
        let a = &gts[i];
        let pref = preferred_scale(&a.bbox, strides, size);
        let candidates = std::iter::once(pref)
            .chain((0..pref).rev())
            .chain(pref + 1..strides.len());
        let mut placed = false;
        for si in candidates {
            let n = size / strides[si];
            let cell = |c: f64| ((c * n as f64).floor().max(0.0) as usize).min(n - 1);
            let (col, row) = (cell(a.bbox.cx), cell(a.bbox.cy));
            if scales[si].iter().any(|p| p.row == row && p.col == col) {
                continue;
            }
            if let Some(t) = encode_cell(&a.bbox, col, row, strides[si], size) {
                scales[si].push(Positive {
                    row,
                    col,
                    class_id: a.class_id,
                    bbox: a.bbox,
                    t,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            log::debug!("box {:?} could not be assigned", a.bbox);
        }
    }
    TargetAssignment { scales }
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
    /// Gradient of `total` w.r.t. each raw grid.
    pub grads: Vec<Tensor<T>>,
}

/// IoU between the box decoded from `t` and `target`, with its gradient w.r.t. `t`.
pub fn iou_and_grad(
    t: [f64; 4],
    col: usize,
    row: usize,
    stride: usize,
    input_size: usize,
    target: &BBox,
) -> (f64, [f64; 4]) {
    let s = stride as f64 / input_size as f64;
    let p = decode_cell(t, col, row, stride, input_size);
    let sig = t.map(sigmoid);
    let d_center = |k: usize| 2.0 * s * sig[k] * (1.0 - sig[k]);
    let d_size = |k: usize| 16.0 * s * sig[k] * sig[k] * (1.0 - sig[k]);

    let (px1, py1, px2, py2) = p.corners();
    let (gx1, gy1, gx2, gy2) = target.corners();
    let ix = px2.min(gx2) - px1.max(gx1);
    let iy = py2.min(gy2) - py1.max(gy1);
    let (ix, iy) = (ix.max(0.0), iy.max(0.0));
    let inter = ix * iy;
    let union = p.w * p.h + target.w * target.h - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = inter / union;
    // d ix / d(left edge), d ix / d(right edge); likewise for y.
    let (dx1, dx2) = if ix > 0.0 {
        (-((px1 > gx1) as u8 as f64), (px2 < gx2) as u8 as f64)
    } else {
        (0.0, 0.0)
    };
    let (dy1, dy2) = if iy > 0.0 {
        (-((py1 > gy1) as u8 as f64), (py2 < gy2) as u8 as f64)
    } else {
        (0.0, 0.0)
    };
    let d_inter = 1.0 / union + inter / (union * union);
    let d_area = -inter / (union * union);
    let d_cx = d_inter * iy * (dx1 + dx2);
    let d_cy = d_inter * ix * (dy1 + dy2);
    let d_w = d_inter * iy * (dx2 - dx1) / 2.0 + d_area * p.h;
    let d_h = d_inter * ix * (dy2 - dy1) / 2.0 + d_area * p.w;
    (
        iou,
        [
            d_cx * d_center(0),
            d_cy * d_center(1),
            d_w * d_size(2),
            d_h * d_size(3),
        ],
    )
}

/// Binary cross-entropy with logits.
fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// `cls + BOX_WEIGHT · box`, both summed over cells and divided by the batch size.
///
/// `cls` is the BCE of every class logit against one-hot targets at positive
/// cells and zero elsewhere; `box` is `1 − IoU` over positive cells.
pub fn detection_loss<T: Float>(
    raw: &[Tensor<T>],
    targets: &[TargetAssignment],
    cfg: &ModelConfig,
) -> Result<LossOutput<T>> {
    let nc = cfg.num_classes;
    if raw.len() != cfg.strides.len() {
        return Err(Error::Shape(format!(
            "expected {} grids, got {}",
            cfg.strides.len(),
            raw.len()
        )));
    }
    let batch = raw[0].dims4()?.0;
    if targets.len() != batch {
        return Err(Error::Shape(format!(
            "{} target sets for a batch of {batch}",
            targets.len()
        )));
    }
    let inv_b = 1.0 / batch as f64;
    let (mut cls, mut bbox) = (0.0, 0.0);
    let mut grads = Vec::with_capacity(raw.len());
    for (si, grid) in raw.iter().enumerate() {
        let (b, c, h, w) = grid.dims4()?;
        let n = cfg.input_size / cfg.strides[si];
        if b != batch || c != nc + 4 || h != n || w != n {
            return Err(Error::Shape(format!(
                "grid {si} has shape {:?}",
                grid.shape()
            )));
        }
        let d = grid.data();
        let mut g = vec![0f64; d.len()];
        let idx = |bi: usize, ch: usize, y: usize, x: usize| ((bi * c + ch) * h + y) * w + x;
        let mut onehot = vec![0f64; b * nc * h * w];
        for (bi, ta) in targets.iter().enumerate() {
            for p in ta.scales.get(si).into_iter().flatten() {
                onehot[((bi * nc + p.class_id) * h + p.row) * w + p.col] = 1.0;
                let t: [f64; 4] =
                    std::array::from_fn(|k| d[idx(bi, nc + k, p.row, p.col)].as_f64());
                let (iou, dt) =
                    iou_and_grad(t, p.col, p.row, cfg.strides[si], cfg.input_size, &p.bbox);
                bbox += (1.0 - iou) * inv_b;
                for k in 0..4 {
                    g[idx(bi, nc + k, p.row, p.col)] -= BOX_WEIGHT * inv_b * dt[k];
                }
            }
        }
        for bi in 0..b {
            for k in 0..nc {
                for y in 0..h {
                    for x in 0..w {
                        let i = idx(bi, k, y, x);
                        let z = d[i].as_f64();
                        let tgt = onehot[((bi * nc + k) * h + y) * w + x];
                        cls += bce(z, tgt) * inv_b;
                        g[i] += (sigmoid(z) - tgt) * inv_b;
                    }
                }
            }
        }
        grads.push(Tensor::new(
            grid.shape(),
            g.into_iter().map(T::of).collect(),
        )?);
    }
    Ok(LossOutput {
        total: cls + BOX_WEIGHT * bbox,
        cls,
        bbox,
        grads,
    })
}

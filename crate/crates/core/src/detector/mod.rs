//! The detector: residual backbone, split-channel tail, path-aggregation
//! neck and decoupled three-scale heads.

pub mod boxes;
pub mod c2psa;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::cafm::DEFAULT_SHUFFLE_GROUPS;
use crate::error::{Error, Result};
use crate::nn::{Act, Conv2d, ConvBnAct};
use crate::params::{ParamBuilder, ParamStore};
use crate::rcm::{Rcm, DEFAULT_STRIP_K};
use crate::tensor::{Float, Tensor};

pub use self::boxes::{decode_cell, encode_cell, iou, nms, Annotation, BBox, Detection};
pub use self::c2psa::{C2Psa, PsaBlock};

pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const BASE_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const CLASS_NAMES: [&str; 3] = ["normal_face", "profile_face", "mobile_phone"];

/// Initial class bias, `-ln((1 - p) / p)` for a prior foreground probability of 0.01.
const CLS_PRIOR_BIAS: f64 = -4.595;

/// The four architecture variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Cafm,
    Rcm,
    Cr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Rcm, Variant::Cafm, Variant::Cr];

    /// `(use_cafm, use_rcm)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Base => (false, false),
            Variant::Cafm => (true, false),
            Variant::Rcm => (false, true),
            Variant::Cr => (true, true),
        }
    }

    pub fn from_flags(use_cafm: bool, use_rcm: bool) -> Self {
        match (use_cafm, use_rcm) {
            (false, false) => Variant::Base,
            (true, false) => Variant::Cafm,
            (false, true) => Variant::Rcm,
            (true, true) => Variant::Cr,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Cafm => "cafm",
            Variant::Rcm => "rcm",
            Variant::Cr => "cr",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "cafm" => Ok(Variant::Cafm),
            "rcm" => Ok(Variant::Rcm),
            "cr" => Ok(Variant::Cr),
            _ => Err(Error::Argument(format!(
                "unknown variant '{s}' (expected base, cafm, rcm or cr)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub use_cafm: bool,
    pub use_rcm: bool,
    pub shuffle_groups: usize,
    pub strip_k: usize,
    pub input_size: usize,
    pub strides: [usize; 3],
    /// Inner blocks of the backbone tail.
    pub tail_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            width_mult: 0.5,
            depth_mult: 0.5,
            use_cafm: true,
            use_rcm: true,
            shuffle_groups: DEFAULT_SHUFFLE_GROUPS,
            strip_k: DEFAULT_STRIP_K,
            input_size: 160,
            strides: STRIDES,
            tail_blocks: 1,
        }
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self::default().with_variant(variant)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        (self.use_cafm, self.use_rcm) = variant.flags();
        self
    }

    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.use_cafm, self.use_rcm)
    }

    /// Stage widths after scaling.
    pub fn widths(&self) -> Result<[usize; 4]> {
        let mut out = [0; 4];
        for (o, &base) in out.iter_mut().zip(&BASE_WIDTHS) {
            let w = base as f64 * self.width_mult;
            if !(w >= 2.0) || (w - w.round()).abs() > 1e-9 || w.round() as usize % 2 != 0 {
                return Err(Error::Config(format!(
                    "width_mult {} gives {} channels for base width {base}; need an even integer",
                    self.width_mult, w
                )));
            }
            *o = w.round() as usize;
        }
        Ok(out)
    }

    /// Residual blocks per backbone stage.
    pub fn depth(&self) -> usize {
        (2.0 * self.depth_mult).round().max(0.0) as usize
    }

    pub fn grid_sizes(&self) -> [usize; 3] {
        self.strides.map(|s| self.input_size / s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.strides != STRIDES {
            return Err(Error::Config(format!(
                "strides must be {STRIDES:?}, got {:?}",
                self.strides
            )));
        }
        if !(self.depth_mult >= 0.0 && self.depth_mult.is_finite()) {
            return Err(Error::Config(format!(
                "depth_mult must be non-negative, got {}",
                self.depth_mult
            )));
        }
        if self.strip_k == 0 || self.strip_k % 2 == 0 {
            return Err(Error::Config(format!(
                "strip_k must be odd, got {}",
                self.strip_k
            )));
        }
        let widths = self.widths()?;
        let half = widths[3] / 2;
        if self.use_cafm && (self.shuffle_groups == 0 || half % self.shuffle_groups != 0) {
            return Err(Error::Config(format!(
                "shuffle_groups {} must divide the attention width {half}",
                self.shuffle_groups
            )));
        }
        Ok(())
    }
}

/// `x + cba(cba(x))` with 3×3 convolutions.
#[derive(Clone, Debug)]
struct ResBlock {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
}

impl ResBlock {
    fn new<T: Float>(b: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Self {
            cv1: ConvBnAct::new(&mut s, "cv1", c, c, 3, 1, Act::Silu)?,
            cv2: ConvBnAct::new(&mut s, "cv2", c, c, 3, 1, Act::Silu)?,
        })
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(g, x)?;
        let y = self.cv2.forward(g, y)?;
        g.add(x, y)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvBnAct,
    blocks: Vec<ResBlock>,
}

impl Stage {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut x = self.down.forward(g, x)?;
        for blk in &self.blocks {
            x = blk.forward(g, x)?;
        }
        Ok(x)
    }
}

/// A 3×3 feature-mixing site that is either a plain conv or a calibration block.
#[derive(Clone, Debug)]
enum Mixer {
    Conv(ConvBnAct),
    Rcm(Rcm),
}

impl Mixer {
    fn new<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        c: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        if cfg.use_rcm {
            Ok(Mixer::Rcm(Rcm::new(b, name, c, cfg.strip_k)?))
        } else {
            Ok(Mixer::Conv(ConvBnAct::new(b, name, c, c, 3, 1, Act::Silu)?))
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            Mixer::Conv(c) => c.forward(g, x),
            Mixer::Rcm(r) => r.forward(g, x),
        }
    }
}

/// Neck fusion: 1×1 reduce of the concatenated inputs then a mixer.
#[derive(Clone, Debug)]
struct Fuse {
    reduce: ConvBnAct,
    mix: Mixer,
}

impl Fuse {
    fn new<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Self {
            reduce: ConvBnAct::new(&mut s, "reduce", cin, cout, 1, 1, Act::Silu)?,
            mix: Mixer::new(&mut s, "mix", cout, cfg)?,
        })
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, parts: &[Var]) -> Result<Var> {
        let x = g.concat_channels(parts)?;
        let x = self.reduce.forward(g, x)?;
        self.mix.forward(g, x)
    }
}

#[derive(Clone, Debug)]
struct Head {
    entry: Mixer,
    cls_conv: ConvBnAct,
    cls_out: Conv2d,
    box_conv: ConvBnAct,
    box_out: Conv2d,
}

impl Head {
    fn new<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        c: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let mut s = b.sub(name);
        let entry = Mixer::new(&mut s, "entry", c, cfg)?;
        let cls_conv = ConvBnAct::new(&mut s, "cls_conv", c, c, 3, 1, Act::Silu)?;
        let cls_out = Conv2d::pointwise(&mut s, "cls_out", c, cfg.num_classes)?;
        let box_conv = ConvBnAct::new(&mut s, "box_conv", c, c, 3, 1, Act::Silu)?;
        let box_out = Conv2d::pointwise(&mut s, "box_out", c, 4)?;
        Ok(Self {
            entry,
            cls_conv,
            cls_out,
            box_conv,
            box_out,
        })
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let x = self.entry.forward(g, x)?;
        let c = self.cls_conv.forward(g, x)?;
        let c = self.cls_out.forward(g, c)?;
        let r = self.box_conv.forward(g, x)?;
        let r = self.box_out.forward(g, r)?;
        g.concat_channels(&[c, r])
    }
}

/// Network structure; parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    stem: ConvBnAct,
    stages: Vec<Stage>,
    tail: C2Psa,
    top_down4: Fuse,
    top_down3: Fuse,
    down3: ConvBnAct,
    bottom_up4: Fuse,
    down4: ConvBnAct,
    bottom_up5: Fuse,
    heads: Vec<Head>,
}

impl Model {
    /// Builds the structure and a freshly initialized parameter store.
    pub fn new<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(cfg, &mut ParamBuilder::new(&mut store, &mut rng))?;
        Ok((model, store))
    }

    pub fn build<T: Float>(cfg: &ModelConfig, b: &mut ParamBuilder<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let [w0, w1, w2, w3] = cfg.widths()?;
        let widths = [w0, w1, w2, w3];
        let stem = ConvBnAct::new(b, "stem", 3, w0, 3, 2, Act::Silu)?;
        let mut stages = Vec::with_capacity(4);
        let mut bb = b.sub("backbone");
        for (i, &w) in widths.iter().enumerate() {
            let cin = if i == 0 { w0 } else { widths[i - 1] };
            let mut s = bb.sub(&format!("stage{i}"));
            let down = ConvBnAct::new(&mut s, "down", cin, w, 3, 2, Act::Silu)?;
            let blocks = (0..cfg.depth())
                .map(|j| ResBlock::new(&mut s, &format!("res{j}"), w))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
        }
        let tail = C2Psa::new(
            b,
            "tail",
            w3,
            cfg.tail_blocks,
            cfg.shuffle_groups,
            cfg.use_cafm,
        )?;
        let mut nk = b.sub("neck");
        let top_down4 = Fuse::new(&mut nk, "top_down4", w3 + w2, w2, cfg)?;
        let top_down3 = Fuse::new(&mut nk, "top_down3", w2 + w1, w1, cfg)?;
        let down3 = ConvBnAct::new(&mut nk, "down3", w1, w1, 3, 2, Act::Silu)?;
        let bottom_up4 = Fuse::new(&mut nk, "bottom_up4", w1 + w2, w2, cfg)?;
        let down4 = ConvBnAct::new(&mut nk, "down4", w2, w2, 3, 2, Act::Silu)?;
        let bottom_up5 = Fuse::new(&mut nk, "bottom_up5", w2 + w3, w3, cfg)?;
        let mut hd = b.sub("head");
        let heads = [w1, w2, w3]
            .iter()
            .enumerate()
            .map(|(i, &c)| Head::new(&mut hd, &format!("p{}", i + 3), c, cfg))
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            cfg: cfg.clone(),
            stem,
            stages,
            tail,
            top_down4,
            top_down3,
            down3,
            bottom_up4,
            down4,
            bottom_up5,
            heads,
        };
        for h in &model.heads {
            if let Some(bias) = h.cls_out.bias {
                let store = b.store_mut();
                store
                    .get_mut(bias)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = T::of(CLS_PRIOR_BIAS));
            }
        }
        Ok(model)
    }

    /// Raw grids `[B, num_classes + 4, S/s, S/s]` for strides 8, 16, 32.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<[Var; 3]> {
        let shape = g.shape(x);
        let s = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!(
                "model expects [B, 3, {s}, {s}] input, got {shape:?}"
            )));
        }
        let mut y = self.stem.forward(g, x)?;
        let mut feats = Vec::with_capacity(4);
        for st in &self.stages {
            y = st.forward(g, y)?;
            feats.push(y);
        }
        let (c3, c4) = (feats[1], feats[2]);
        let c5 = self.tail.forward(g, feats[3])?;

        let up5 = g.upsample2x(c5)?;
        let n4 = self.top_down4.forward(g, &[up5, c4])?;
        let up4 = g.upsample2x(n4)?;
        let p3 = self.top_down3.forward(g, &[up4, c3])?;
        let d3 = self.down3.forward(g, p3)?;
        let p4 = self.bottom_up4.forward(g, &[d3, n4])?;
        let d4 = self.down4.forward(g, p4)?;
        let p5 = self.bottom_up5.forward(g, &[d4, c5])?;

        Ok([
            self.heads[0].forward(g, p3)?,
            self.heads[1].forward(g, p4)?,
            self.heads[2].forward(g, p5)?,
        ])
    }

    /// Eval-mode forward returning the raw grids as tensors.
    pub fn predict<T: Float>(
        &self,
        store: &ParamStore<T>,
        images: Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new(store, false);
        let x = g.input(images);
        let out = self.forward(&mut g, x)?;
        Ok(out.iter().map(|&v| g.value(v).clone()).collect())
    }
}

/// Decodes raw grids into detections per image.
///
/// A cell whose best class score reaches `conf_thresh` emits one box for that
/// class; boxes are clipped to the image and suppressed per class.
pub fn decode_predictions<T: Float>(
    raw: &[Tensor<T>],
    cfg: &ModelConfig,
    conf_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    if raw.len() != cfg.strides.len() {
        return Err(Error::Shape(format!(
            "expected {} grids, got {}",
            cfg.strides.len(),
            raw.len()
        )));
    }
    let nc = cfg.num_classes;
    let batch = raw[0].dims4()?.0;
    let mut out = vec![Vec::new(); batch];
    for (grid, &stride) in raw.iter().zip(&cfg.strides) {
        let (b, c, h, w) = grid.dims4()?;
        if b != batch || c != nc + 4 || h != cfg.input_size / stride || w != cfg.input_size / stride
        {
            return Err(Error::Shape(format!(
                "grid at stride {stride} has shape {:?}",
                grid.shape()
            )));
        }
        let d = grid.data();
        let at =
            |bi: usize, ch: usize, y: usize, x: usize| d[((bi * c + ch) * h + y) * w + x].as_f64();
        for (bi, dets) in out.iter_mut().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let (class_id, logit) = (0..nc).map(|k| (k, at(bi, k, y, x))).fold(
                        (0, f64::NEG_INFINITY),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
                    let score = boxes::sigmoid(logit);
                    if score < conf_thresh {
                        continue;
                    }
                    let t = [
                        at(bi, nc, y, x),
                        at(bi, nc + 1, y, x),
                        at(bi, nc + 2, y, x),
                        at(bi, nc + 3, y, x),
                    ];
                    let bbox = decode_cell(t, x, y, stride, cfg.input_size).clipped();
                    if bbox.area() > 0.0 {
                        dets.push(Detection {
                            bbox,
                            class_id,
                            score,
                        });
                    }
                }
            }
        }
    }
    Ok(out.into_iter().map(|d| nms(&d, nms_iou)).collect())
}

/// Parameter count and multiply-accumulates of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub params: usize,
    pub macs: u64,
}

impl Cost {
    pub fn gflops(&self) -> f64 {
        2.0 * self.macs as f64 / 1e9
    }
}

/// Cost of an arbitrary network given its forward function and a batch-1 input shape.
pub fn measure_cost<T, F>(store: &ParamStore<T>, input_shape: &[usize], forward: F) -> Result<Cost>
where
    T: Float,
    F: FnOnce(&mut Graph<'_, T>, Var) -> Result<()>,
{
    let mut g = Graph::new(store, false);
    let x = g.input(Tensor::zeros(input_shape));
    forward(&mut g, x)?;
    Ok(Cost {
        params: store.trainable_count(),
        macs: g.macs(),
    })
}

/// `(param_count, gflops)` at the given square input size.
pub fn count_params_flops<T: Float>(
    model: &Model,
    store: &ParamStore<T>,
    input_size: usize,
) -> Result<(usize, f64)> {
    let mut m = model.clone();
    m.cfg.input_size = input_size;
    let cost = measure_cost(store, &[1, 3, input_size, input_size], |g, x| {
        m.forward(g, x).map(|_| ())
    })?;
    Ok((cost.params, cost.gflops()))
}

/// Batch-1 eval forwards per second on a fixed random input.
pub fn measure_fps<T: Float>(
    model: &Model,
    store: &ParamStore<T>,
    input_size: usize,
    warmup: usize,
    iters: usize,
) -> Result<f64> {
    if iters == 0 {
        return Err(Error::Argument("iters must be at least 1".into()));
    }
    let mut m = model.clone();
    m.cfg.input_size = input_size;
    let shape = [1, 3, input_size, input_size];
    let input: Tensor<T> = crate::gradcheck::projection(&shape, 0)
        .cast::<T>()
        .map(|v| v * T::of(0.5) + T::of(0.5));
    for _ in 0..warmup {
        m.predict(store, input.clone())?;
    }
    let start = Instant::now();
    for _ in 0..iters {
        m.predict(store, input.clone())?;
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(iters as f64 / secs)
}

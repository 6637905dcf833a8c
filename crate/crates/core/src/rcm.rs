//! Rectangular calibration block.
//!
//! Pipeline: axial context (row mean + column mean) → shape calibration
//! (1×k strip, batch norm + ReLU, k×1 strip, sigmoid) → multiplicative
//! fusion with a depthwise 3×3 view of the input → batch norm and a
//! two-layer pointwise MLP → residual add.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d};
use crate::params::ParamBuilder;
use crate::tensor::{Float, Tensor};

pub const DEFAULT_STRIP_K: usize = 11;
/// Hidden width of the refinement MLP relative to the block width.
pub const MLP_EXPANSION: usize = 2;

#[derive(Clone, Debug)]
pub struct Rcm {
    pub channels: usize,
    pub k: usize,
    /// Depthwise 1×k strip.
    pub strip_row: Conv2d,
    pub calib_norm: BatchNorm2d,
    /// Depthwise k×1 strip.
    pub strip_col: Conv2d,
    pub local_dw: Conv2d,
    pub mlp_norm: BatchNorm2d,
    pub mlp_fc1: Conv2d,
    pub mlp_fc2: Conv2d,
    prefix: String,
}

impl Rcm {
    pub fn new<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        k: usize,
    ) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::Config(format!(
                "strip kernel length must be odd, got {k}"
            )));
        }
        let mut s = b.sub(name);
        let hidden = channels * MLP_EXPANSION;
        Ok(Self {
            channels,
            k,
            strip_row: Conv2d::depthwise(&mut s, "strip_row", channels, (1, k))?,
            calib_norm: BatchNorm2d::new(&mut s, "calib_norm", channels),
            strip_col: Conv2d::depthwise(&mut s, "strip_col", channels, (k, 1))?,
            local_dw: Conv2d::depthwise(&mut s, "local_dw", channels, (3, 3))?,
            mlp_norm: BatchNorm2d::new(&mut s, "mlp_norm", channels),
            mlp_fc1: Conv2d::pointwise(&mut s, "mlp_fc1", channels, hidden)?,
            mlp_fc2: Conv2d::pointwise(&mut s, "mlp_fc2", hidden, channels)?,
            prefix: s.prefix().to_string(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn check_input<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<()> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "block built for {} channels got input {:?}",
                self.channels, shape
            )));
        }
        Ok(())
    }

    /// Coarse rectangular context: row means broadcast over columns plus column means over rows.
    pub fn axial_context<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        g.axial_context(x)
    }

    /// `sigmoid(strip_col(relu(bn(strip_row(ybar)))))`, strictly inside (0, 1).
    pub fn shape_calibration<T: Float>(&self, g: &mut Graph<'_, T>, ybar: Var) -> Result<Var> {
        self.check_input(g, ybar)?;
        let z = self.strip_row.forward(g, ybar)?;
        let z = self.calib_norm.forward(g, z)?;
        let z = g.relu(z);
        let z = self.strip_col.forward(g, z)?;
        Ok(g.sigmoid(z))
    }

    /// `depthwise3x3(x) ⊙ y`.
    pub fn fuse_local_global<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, y: Var) -> Result<Var> {
        self.check_input(g, x)?;
        if g.shape(x) != g.shape(y) {
            return Err(Error::Shape(format!(
                "fusion inputs differ: {:?} vs {:?}",
                g.shape(x),
                g.shape(y)
            )));
        }
        let local = self.local_dw.forward(g, x)?;
        g.mul(local, y)
    }

    /// Batch norm then pointwise MLP (C → 2C → C) with a ReLU in between.
    pub fn refine<T: Float>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let z = self.mlp_norm.forward(g, z)?;
        let z = self.mlp_fc1.forward(g, z)?;
        let z = g.relu(z);
        self.mlp_fc2.forward(g, z)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let ctx = self.axial_context(g, x)?;
        let calib = self.shape_calibration(g, ctx)?;
        let fused = self.fuse_local_global(g, x, calib)?;
        let refined = self.refine(g, fused)?;
        g.add(refined, x)
    }
}

/// Eager axial context of a rank-4 tensor.
pub fn axial_context<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let store = crate::params::ParamStore::new();
    let mut g = Graph::new(&store, false);
    let xv = g.input(x.clone());
    let out = g.axial_context(xv)?;
    Ok(g.value(out).clone())
}

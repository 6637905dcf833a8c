//! Parameterized layers used to assemble blocks.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId, ParamKind};
use crate::tensor::Float;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Same-padded convolution with an odd `(kh, kw)` kernel.
    pub fn new<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "{}: groups={groups} must divide cin={cin} and cout={cout}",
                b.path(name)
            )));
        }
        if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
            return Err(Error::Config(format!(
                "{}: kernel {:?} must be odd",
                b.path(name),
                kernel
            )));
        }
        let mut s = b.sub(name);
        let fan_in = cin / groups * kernel.0 * kernel.1;
        let weight = s.uniform(
            "weight",
            &[cout, cin / groups, kernel.0, kernel.1],
            fan_in,
            ParamKind::Weight,
        );
        let bias = bias.then(|| s.uniform("bias", &[cout], fan_in, ParamKind::Bias));
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            groups,
        })
    }

    pub fn pointwise<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        Self::new(b, name, cin, cout, (1, 1), 1, 1, true)
    }

    pub fn depthwise<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        kernel: (usize, usize),
    ) -> Result<Self> {
        Self::new(b, name, channels, channels, kernel, 1, channels, true)
    }

    pub fn padding(&self) -> (usize, usize) {
        (self.kernel.0 / 2, self.kernel.1 / 2)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.padding(), self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Float>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            gamma: s.constant("weight", &[channels], 1.0, ParamKind::Norm),
            beta: s.constant("bias", &[channels], 0.0, ParamKind::Norm),
            running_mean: s.constant("running_mean", &[channels], 0.0, ParamKind::Buffer),
            running_var: s.constant("running_var", &[channels], 1.0, ParamKind::Buffer),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            BN_EPS,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Identity,
    Relu,
    Silu,
}

impl Act {
    pub fn apply<T: Float>(self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Act::Identity => x,
            Act::Relu => g.relu(x),
            Act::Silu => g.silu(x),
        }
    }
}

/// Convolution (no bias) followed by batch normalization and an activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Act,
}

impl ConvBnAct {
    pub fn new<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        act: Act,
    ) -> Result<Self> {
        let mut s = b.sub(name);
        let conv = Conv2d::new(&mut s, "conv", cin, cout, (k, k), stride, 1, false)?;
        let bn = BatchNorm2d::new(&mut s, "bn", cout);
        Ok(Self { conv, bn, act })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(self.act.apply(g, y))
    }
}

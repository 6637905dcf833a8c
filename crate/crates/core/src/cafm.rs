//! Convolution-and-attention fusion block.
//!
//! A local branch (pointwise conv, channel shuffle, depthwise 3x3) and a
//! global branch (channel-wise transposed attention with a learnable
//! temperature, residual, output projection) run in parallel on the same
//! input and are summed. The block preserves the feature-map shape.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{ParamBuilder, ParamId, ParamKind, ParamStore};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_SHUFFLE_GROUPS: usize = 4;
pub const ALPHA_INIT: f64 = 1.0;
/// Floor applied to the temperature after each optimizer step.
pub const ALPHA_MIN: f64 = 1e-4;

/// Channel order produced by the reshape-(groups, C/groups)-transpose-flatten shuffle.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Config(format!(
            "channel shuffle needs C divisible by groups (C={channels}, groups={groups})"
        )));
    }
    let per = channels / groups;
    Ok((0..channels)
        .map(|j| (j % groups) * per + j / groups)
        .collect())
}

/// Eager channel shuffle of a rank-4 tensor.
pub fn channel_shuffle<T: Float>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let perm = shuffle_permutation(c, groups)?;
    let hw = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for &src in &perm {
            out.extend_from_slice(x.plane(bi, src));
        }
    }
    let _ = hw;
    Tensor::new(x.shape(), out)
}

/// Eager channel attention `V · softmax(Kᵀ Q / alpha)`, normalized over the contracted index.
pub fn channel_attention<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    alpha: T,
) -> Result<Tensor<T>> {
    let mut store = ParamStore::new();
    let a = store.add("alpha", ParamKind::Scalar, Tensor::scalar(alpha));
    let mut g = Graph::new(&store, false);
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let av = g.param(a);
    let out = g.channel_attention(qv, kv, vv, av)?;
    Ok(g.value(out).clone())
}

/// Column-normalized attention matrix `softmax(Kᵀ Q / alpha)` for batch item `b`, row-major `C x C`.
pub fn attention_matrix<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    alpha: T,
    b: usize,
) -> Result<Vec<T>> {
    let (_, c, _, _) = q.dims4()?;
    q.check_same_shape(k)?;
    if !(alpha > T::zero()) {
        return Err(Error::Param(format!(
            "attention temperature must be positive, got {alpha}"
        )));
    }
    let mut m = vec![T::zero(); c * c];
    for i in 0..c {
        for j in 0..c {
            m[i * c + j] = k
                .plane(b, i)
                .iter()
                .zip(q.plane(b, j))
                .map(|(&a, &b)| a * b)
                .sum::<T>()
                / alpha;
        }
    }
    for j in 0..c {
        let mx = (0..c).map(|i| m[i * c + j]).fold(T::neg_infinity(), T::max);
        let z: T = (0..c).map(|i| (m[i * c + j] - mx).exp()).sum();
        for i in 0..c {
            m[i * c + j] = (m[i * c + j] - mx).exp() / z;
        }
    }
    Ok(m)
}

/// One projection of the global branch: pointwise conv then depthwise 3x3.
#[derive(Clone, Debug)]
pub struct Projection {
    pub pointwise: Conv2d,
    pub depthwise: Conv2d,
}

impl Projection {
    fn new<T: Float>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Self {
            pointwise: Conv2d::pointwise(&mut s, "pw", channels, channels)?,
            depthwise: Conv2d::depthwise(&mut s, "dw", channels, (3, 3))?,
        })
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.pointwise.forward(g, x)?;
        self.depthwise.forward(g, y)
    }
}

#[derive(Clone, Debug)]
pub struct Cafm {
    pub channels: usize,
    pub groups: usize,
    pub local_pw: Conv2d,
    pub local_dw: Conv2d,
    pub query: Projection,
    pub key: Projection,
    pub value: Projection,
    pub out_proj: Conv2d,
    pub alpha: ParamId,
    prefix: String,
}

impl Cafm {
    pub fn new<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        shuffle_permutation(channels, groups)?;
        let mut s = b.sub(name);
        let local_pw = Conv2d::pointwise(&mut s, "local_pw", channels, channels)?;
        let local_dw = Conv2d::depthwise(&mut s, "local_dw", channels, (3, 3))?;
        let query = Projection::new(&mut s, "q", channels)?;
        let key = Projection::new(&mut s, "k", channels)?;
        let value = Projection::new(&mut s, "v", channels)?;
        let out_proj = Conv2d::pointwise(&mut s, "out_proj", channels, channels)?;
        let alpha = s.constant("alpha", &[1], ALPHA_INIT, ParamKind::Scalar);
        s.set_lower_bound(alpha, ALPHA_MIN);
        Ok(Self {
            channels,
            groups,
            local_pw,
            local_dw,
            query,
            key,
            value,
            out_proj,
            alpha,
            prefix: s.prefix().to_string(),
        })
    }

    /// Parameter-name prefix of this block.
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn check_input<T: Float>(&self, g: &Graph<'_, T>, y: Var) -> Result<()> {
        let shape = g.shape(y);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "block built for {} channels got input {:?}",
                self.channels, shape
            )));
        }
        Ok(())
    }

    /// Local branch: depthwise3x3(shuffle(pointwise(y))).
    pub fn local<T: Float>(&self, g: &mut Graph<'_, T>, y: Var) -> Result<Var> {
        self.check_input(g, y)?;
        let z = self.local_pw.forward(g, y)?;
        let z = g.permute_channels(z, shuffle_permutation(self.channels, self.groups)?)?;
        self.local_dw.forward(g, z)
    }

    /// Global branch: out_proj(attention(Q, K, V) + y).
    pub fn global<T: Float>(&self, g: &mut Graph<'_, T>, y: Var) -> Result<Var> {
        self.check_input(g, y)?;
        let q = self.query.forward(g, y)?;
        let k = self.key.forward(g, y)?;
        let v = self.value.forward(g, y)?;
        let alpha = g.param(self.alpha);
        let attn = g.channel_attention(q, k, v, alpha)?;
        let res = g.add(attn, y)?;
        self.out_proj.forward(g, res)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, y: Var) -> Result<Var> {
        let local = self.local(g, y)?;
        let global = self.global(g, y)?;
        if g.shape(local) != g.shape(global) {
            return Err(Error::Shape(format!(
                "branch outputs differ: {:?} vs {:?}",
                g.shape(local),
                g.shape(global)
            )));
        }
        g.add(local, global)
    }
}

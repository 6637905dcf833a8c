//! Tape-based reverse-mode differentiation over NCHW tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are read
//! from a borrowed [`ParamStore`]; `backward` returns gradients for every
//! node that needs one, keyed by [`Var`] and by [`ParamId`].

pub mod conv;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Float, Tensor};

use self::conv::{conv2d_backward, conv2d_forward, ConvGeom};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'s, T> {
    Owned(Tensor<T>),
    Borrowed(&'s Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Input,
    Param,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Silu(usize),
    Sigmoid(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Axial(usize),
    PermuteChannels {
        x: usize,
        perm: Vec<usize>,
    },
    Concat(Vec<usize>),
    SliceChannels {
        x: usize,
        start: usize,
    },
    Upsample2x(usize),
    ChannelAttention {
        q: usize,
        k: usize,
        v: usize,
        alpha: usize,
        attn: Vec<T>,
    },
    Sum(usize),
    Dot(usize, Tensor<T>),
    /// Scalar whose gradient w.r.t. each input was computed externally.
    External(Vec<(usize, Tensor<T>)>),
}

struct Node<'s, T> {
    value: Value<'s, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Running-statistics update emitted by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

pub struct Graph<'s, T> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<'s, T>>,
    params: HashMap<ParamId, usize>,
    training: bool,
    stat_updates: Vec<StatUpdate<T>>,
    macs: u64,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_ref())
    }

    /// Gradients of every parameter touched by the graph.
    pub fn into_param_grads(mut self) -> HashMap<ParamId, Tensor<T>> {
        let mut out = HashMap::with_capacity(self.params.len());
        for (&id, &n) in &self.params {
            if let Some(g) = self.grads[n].take() {
                out.insert(id, g);
            }
        }
        out
    }
}

fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<'s, T: Float> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, training: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            training,
            stat_updates: Vec::new(),
            macs: 0,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Multiply-accumulates spent in convolutions and attention contractions so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by `backward`.
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&n) = self.params.get(&id) {
            return Var(n);
        }
        let entry = self.store.entry(id);
        self.nodes.push(Node {
            value: Value::Borrowed(&entry.value),
            op: Op::Param,
            needs_grad: entry.kind.trainable(),
        });
        let n = self.nodes.len() - 1;
        self.params.insert(id, n);
        Var(n)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad, groups)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::Shape(format!(
                    "bias shape {:?} does not match {} output channels",
                    self.shape(b),
                    geom.cout
                )));
            }
        }
        let out = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&geom.out_shape(), out)?;
        self.macs += geom.macs();
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        Ok(self.push(
            t,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            &parents,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(self.value(b))?;
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).scale(s);
        self.push(t, Op::Scale(a.0, s), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(a.0), &[a.0])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a.0), &[a.0])
    }

    /// Per-channel normalization. Training mode uses batch statistics and
    /// records a [`StatUpdate`]; evaluation mode uses the running buffers.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.store.get(gamma).shape() != [c] {
            return Err(Error::Shape(format!(
                "batch norm over {c} channels got scale of shape {:?}",
                self.store.get(gamma).shape()
            )));
        }
        let hw = h * w;
        let n = b * hw;
        let eps = T::of(eps);
        let xv = self.value(x).data();
        let mut update = None;
        let (mean, inv_std) = if self.training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    s += xv[(bi * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                }
                let m = s / T::of(n as f64);
                let mut ss = T::zero();
                for bi in 0..b {
                    ss += xv[(bi * c + ch) * hw..][..hw]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
                }
                mean[ch] = m;
                var[ch] = ss / T::of(n as f64);
            }
            let unbiased = if n > 1 {
                var.iter()
                    .map(|&v| v * T::of(n as f64 / (n as f64 - 1.0)))
                    .collect()
            } else {
                var.clone()
            };
            update = Some(StatUpdate {
                running_mean,
                running_var,
                batch_mean: mean.clone(),
                batch_var: unbiased,
            });
            let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv)
        } else {
            let rm = self.store.get(running_mean).data().to_vec();
            let inv = self
                .store
                .get(running_var)
                .data()
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            (rm, inv)
        };
        let gv = self.store.get(gamma).data();
        let bv = self.store.get(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let (scale, shift) = (
                    gv[ch] * inv_std[ch],
                    bv[ch] - gv[ch] * inv_std[ch] * mean[ch],
                );
                let off = (bi * c + ch) * hw;
                for (o, &v) in out[off..off + hw].iter_mut().zip(&xv[off..off + hw]) {
                    *o = v * scale + shift;
                }
            }
        }
        let t = Tensor::new(self.value(x).shape(), out)?;
        self.stat_updates.extend(update);
        let (gn, bn) = (self.param(gamma).0, self.param(beta).0);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x: x.0,
                gamma: gn,
                beta: bn,
                mean,
                inv_std,
            },
            &[x.0, gn, bn],
        ))
    }

    /// Row mean broadcast across columns plus column mean broadcast across rows.
    pub fn axial_context(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let (inv_w, inv_h) = (T::one() / T::of(w as f64), T::one() / T::of(h as f64));
        for p in 0..b * c {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            let rows: Vec<T> = plane
                .chunks(w)
                .map(|r| r.iter().copied().sum::<T>() * inv_w)
                .collect();
            let mut cols = vec![T::zero(); w];
            for r in plane.chunks(w) {
                for (c, &v) in cols.iter_mut().zip(r) {
                    *c += v;
                }
            }
            cols.iter_mut().for_each(|v| *v *= inv_h);
            let o = &mut out[p * h * w..(p + 1) * h * w];
            for (y, orow) in o.chunks_mut(w).enumerate() {
                for (x, ov) in orow.iter_mut().enumerate() {
                    *ov = rows[y] + cols[x];
                }
            }
        }
        let t = Tensor::new(self.value(x).shape(), out)?;
        Ok(self.push(t, Op::Axial(x.0), &[x.0]))
    }

    /// Output channel `j` is input channel `perm[j]`.
    pub fn permute_channels(&mut self, x: Var, perm: Vec<usize>) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if perm.len() != c {
            return Err(Error::Shape(format!(
                "permutation of length {} for {c} channels",
                perm.len()
            )));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        for bi in 0..b {
            for &src in &perm {
                out.extend_from_slice(&xv[(bi * c + src) * hw..][..hw]);
            }
        }
        let t = Tensor::new(self.value(x).shape(), out)?;
        Ok(self.push(t, Op::PermuteChannels { x: x.0, perm }, &[x.0]))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let (b, _, h, w) = self.value(xs[0]).dims4()?;
        let mut total = 0;
        for &x in xs {
            let (bi, ci, hi, wi) = self.value(x).dims4()?;
            if (bi, hi, wi) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    self.shape(xs[0]),
                    self.shape(x)
                )));
            }
            total += ci;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for &x in xs {
                let c = self.shape(x)[1];
                out.extend_from_slice(&self.value(x).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let t = Tensor::new(&[b, total, h, w], out)?;
        let parents: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(t, Op::Concat(parents.clone()), &parents))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} of {c}",
                start + len
            )));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            out.extend_from_slice(&xv[(bi * c + start) * hw..(bi * c + start + len) * hw]);
        }
        let t = Tensor::new(&[b, len, h, w], out)?;
        Ok(self.push(t, Op::SliceChannels { x: x.0, start }, &[x.0]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); b * c * h2 * w2];
        for p in 0..b * c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[(p * h2 + y) * w2 + x] = xv[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let t = Tensor::new(&[b, c, h2, w2], out)?;
        Ok(self.push(t, Op::Upsample2x(x.0), &[x.0]))
    }

    /// Transposed (channel-to-channel) attention `V · softmax(Kᵀ Q / alpha)`.
    ///
    /// With `q, k, v` viewed as `[HW, C]` matrices, the `C x C` logits are
    /// normalized over their first index, the one contracted against `V`, so
    /// each output channel is a convex mix of value channels.
    pub fn channel_attention(&mut self, q: Var, k: Var, v: Var, alpha: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(q).dims4()?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::Shape(format!(
                "attention inputs differ: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if self.value(alpha).numel() != 1 {
            return Err(Error::Shape(
                "attention temperature must be a scalar".into(),
            ));
        }
        let a = self.value(alpha).data()[0];
        if !(a > T::zero()) {
            return Err(Error::Param(format!(
                "attention temperature must be positive, got {a}"
            )));
        }
        let n = h * w;
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut attn = vec![T::zero(); b * c * c];
        let mut out = vec![T::zero(); b * c * n];
        for bi in 0..b {
            let off = bi * c * n;
            let s = &mut attn[bi * c * c..(bi + 1) * c * c];
            // s[i][j] = sum_n k[i][n] q[j][n]
            gemm(
                false,
                true,
                c,
                c,
                n,
                T::one() / a,
                &kv[off..off + c * n],
                &qv[off..off + c * n],
                T::zero(),
                s,
            );
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric("non-finite attention logits".into()));
            }
            softmax_columns(s, c);
            // out[j][n] = sum_i s[i][j] v[i][n]
            gemm(
                true,
                false,
                c,
                n,
                c,
                T::one(),
                s,
                &vv[off..off + c * n],
                T::zero(),
                &mut out[off..off + c * n],
            );
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        // K^T Q and V * softmax(.) are each c*c*n MACs per batch item.
        self.macs += 2 * (b * c * c * n) as u64;
        Ok(self.push(
            t,
            Op::ChannelAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                alpha: alpha.0,
                attn,
            },
            &[q.0, k.0, v.0, alpha.0],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    /// `sum(x * weights)`; the weights are constant.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        self.value(x).check_same_shape(&weights)?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(x.0, weights), &[x.0]))
    }

    /// Scalar node with externally computed input gradients.
    pub fn external_scalar(&mut self, value: T, inputs: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        for (v, g) in &inputs {
            self.value(*v).check_same_shape(g)?;
        }
        let parents: Vec<usize> = inputs.iter().map(|(v, _)| v.0).collect();
        let op = Op::External(inputs.into_iter().map(|(v, g)| (v.0, g)).collect());
        Ok(self.push(Tensor::scalar(value), op, &parents))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let keep = matches!(node.op, Op::Input | Op::Param);
            let g = if keep {
                grads[i].clone()
            } else {
                grads[i].take()
            };
            let Some(g) = g else { continue };
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Adds into an existing gradient buffer without allocating when possible.
    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        idx: usize,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let slot = &mut grads[idx];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[idx].value.get().shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.get();
        let needs = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv { x, w, b, geom } => {
                let (x, w) = (*x, *w);
                let xv = val(x).data();
                let wv = val(w).data();
                let mut dx = needs(x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = needs(w).then(|| vec![T::zero(); wv.len()]);
                let mut db = b.filter(|&b| needs(b)).map(|_| vec![T::zero(); geom.cout]);
                conv2d_backward(
                    geom,
                    xv,
                    wv,
                    g.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, x, Tensor::new(val(x).shape(), dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, Tensor::new(val(w).shape(), dw)?);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.accumulate(grads, *b, Tensor::new(&[geom.cout], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |d, y| d * y)?);
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |d, x| d * x)?);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |d, x| if x > T::zero() { d } else { T::zero() })?;
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = g.zip_map(val(*a), |d, x| {
                    let s = sigmoid(x);
                    d * s * (T::one() + x * (T::one() - s))
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(node.value.get(), |d, y| d * y * (T::one() - y))?;
                self.accumulate(grads, *a, d);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (b, c, h, w) = val(*x).dims4()?;
                let hw = h * w;
                let xv = val(*x).data();
                let gd = g.data();
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for (&d, &v) in gd[off..off + hw].iter().zip(&xv[off..off + hw]) {
                            dbeta[ch] += d;
                            dgamma[ch] += d * (v - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if needs(*x) {
                    let n = T::of((b * hw) as f64);
                    let training = self.training;
                    let (mean, inv_std) = (mean.clone(), inv_std.clone());
                    let (dg, db) = (dgamma.clone(), dbeta.clone());
                    self.accumulate_with(grads, *x, |dx| {
                        for bi in 0..b {
                            for ch in 0..c {
                                let off = (bi * c + ch) * hw;
                                let k = gam[ch] * inv_std[ch];
                                for j in off..off + hw {
                                    if training {
                                        let xhat = (xv[j] - mean[ch]) * inv_std[ch];
                                        dx[j] += k / n * (n * gd[j] - db[ch] - xhat * dg[ch]);
                                    } else {
                                        dx[j] += k * gd[j];
                                    }
                                }
                            }
                        }
                    });
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
            }
            Op::Axial(x) => {
                let (b, c, h, w) = val(*x).dims4()?;
                let gd = g.data();
                let (inv_w, inv_h) = (T::one() / T::of(w as f64), T::one() / T::of(h as f64));
                self.accumulate_with(grads, *x, |dx| {
                    for p in 0..b * c {
                        let plane = &gd[p * h * w..(p + 1) * h * w];
                        let rows: Vec<T> = plane
                            .chunks(w)
                            .map(|r| r.iter().copied().sum::<T>() * inv_w)
                            .collect();
                        let mut cols = vec![T::zero(); w];
                        for r in plane.chunks(w) {
                            for (c, &v) in cols.iter_mut().zip(r) {
                                *c += v;
                            }
                        }
                        let o = &mut dx[p * h * w..(p + 1) * h * w];
                        for (y, orow) in o.chunks_mut(w).enumerate() {
                            for (xi, ov) in orow.iter_mut().enumerate() {
                                *ov += rows[y] + cols[xi] * inv_h;
                            }
                        }
                    }
                });
            }
            Op::PermuteChannels { x, perm } => {
                let (b, c, h, w) = val(*x).dims4()?;
                let hw = h * w;
                let gd = g.data();
                self.accumulate_with(grads, *x, |dx| {
                    for bi in 0..b {
                        for (j, &src) in perm.iter().enumerate() {
                            let d = &mut dx[(bi * c + src) * hw..][..hw];
                            for (o, &v) in d.iter_mut().zip(&gd[(bi * c + j) * hw..][..hw]) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let (b, total, h, w) = g.dims4()?;
                let hw = h * w;
                let mut start = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    if needs(p) {
                        let gd = g.data();
                        self.accumulate_with(grads, p, |dx| {
                            for bi in 0..b {
                                let src =
                                    &gd[(bi * total + start) * hw..(bi * total + start + c) * hw];
                                for (o, &v) in
                                    dx[bi * c * hw..(bi + 1) * c * hw].iter_mut().zip(src)
                                {
                                    *o += v;
                                }
                            }
                        });
                    }
                    start += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let (b, c, h, w) = val(*x).dims4()?;
                let len = g.shape()[1];
                let hw = h * w;
                let gd = g.data();
                self.accumulate_with(grads, *x, |dx| {
                    for bi in 0..b {
                        let dst = &mut dx[(bi * c + start) * hw..(bi * c + start + len) * hw];
                        for (o, &v) in dst.iter_mut().zip(&gd[bi * len * hw..(bi + 1) * len * hw]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Upsample2x(x) => {
                let (b, c, h, w) = val(*x).dims4()?;
                let (h2, w2) = (2 * h, 2 * w);
                let gd = g.data();
                self.accumulate_with(grads, *x, |dx| {
                    for p in 0..b * c {
                        for y in 0..h2 {
                            for xi in 0..w2 {
                                dx[(p * h + y / 2) * w + xi / 2] += gd[(p * h2 + y) * w2 + xi];
                            }
                        }
                    }
                });
            }
            Op::ChannelAttention {
                q,
                k,
                v,
                alpha,
                attn,
            } => {
                let (b, c, h, w) = val(*q).dims4()?;
                let n = h * w;
                let a = val(*alpha).data()[0];
                let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
                let gd = g.data();
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut dalpha = T::zero();
                let mut ds = vec![T::zero(); c * c];
                for bi in 0..b {
                    let off = bi * c * n;
                    let s = &attn[bi * c * c..(bi + 1) * c * c];
                    let go = &gd[off..off + c * n];
                    // dv[i][n] = sum_j s[i][j] go[j][n]
                    gemm(
                        false,
                        false,
                        c,
                        n,
                        c,
                        T::one(),
                        s,
                        go,
                        T::zero(),
                        &mut dv[off..off + c * n],
                    );
                    // ds[i][j] = sum_n v[i][n] go[j][n]
                    gemm(
                        false,
                        true,
                        c,
                        c,
                        n,
                        T::one(),
                        &vv[off..off + c * n],
                        go,
                        T::zero(),
                        &mut ds,
                    );
                    // softmax over i for each column j -> dz, then dm = dz / a
                    for j in 0..c {
                        let dot: T = (0..c).map(|i| s[i * c + j] * ds[i * c + j]).sum();
                        for i in 0..c {
                            ds[i * c + j] = s[i * c + j] * (ds[i * c + j] - dot);
                        }
                    }
                    // z = m / a, dz holds dL/dz; dL/da = -sum dz * z / a
                    let mut zsum = T::zero();
                    let kb = &kv[off..off + c * n];
                    let qb = &qv[off..off + c * n];
                    let mut m = vec![T::zero(); c * c];
                    gemm(false, true, c, c, n, T::one(), kb, qb, T::zero(), &mut m);
                    for (dz, mv) in ds.iter().zip(&m) {
                        zsum += *dz * *mv;
                    }
                    dalpha -= zsum / (a * a);
                    ds.iter_mut().for_each(|d| *d /= a);
                    // dk[i][n] = sum_j dm[i][j] q[j][n]; dq[j][n] = sum_i dm[i][j] k[i][n]
                    gemm(
                        false,
                        false,
                        c,
                        n,
                        c,
                        T::one(),
                        &ds,
                        qb,
                        T::zero(),
                        &mut dk[off..off + c * n],
                    );
                    gemm(
                        true,
                        false,
                        c,
                        n,
                        c,
                        T::one(),
                        &ds,
                        kb,
                        T::zero(),
                        &mut dq[off..off + c * n],
                    );
                }
                let shape = val(*q).shape().to_vec();
                self.accumulate(grads, *q, Tensor::new(&shape, dq)?);
                self.accumulate(grads, *k, Tensor::new(&shape, dk)?);
                self.accumulate(grads, *v, Tensor::new(&shape, dv)?);
                let ashape = val(*alpha).shape().to_vec();
                self.accumulate(grads, *alpha, Tensor::new(&ashape, vec![dalpha])?);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate_with(grads, *x, |dx| dx.iter_mut().for_each(|v| *v += s));
            }
            Op::Dot(x, wts) => {
                let s = g.data()[0];
                self.accumulate_with(grads, *x, |dx| {
                    for (o, &wv) in dx.iter_mut().zip(wts.data()) {
                        *o += s * wv;
                    }
                });
            }
            Op::External(inputs) => {
                let s = g.data()[0];
                for (x, gx) in inputs {
                    self.accumulate_with(grads, *x, |dx| {
                        for (o, &v) in dx.iter_mut().zip(gx.data()) {
                            *o += s * v;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// Column-wise softmax of a row-major `c x c` matrix (each column sums to one).
fn softmax_columns<T: Float>(s: &mut [T], c: usize) {
    for j in 0..c {
        let mut mx = T::neg_infinity();
        for i in 0..c {
            mx = mx.max(s[i * c + j]);
        }
        let mut z = T::zero();
        for i in 0..c {
            let e = (s[i * c + j] - mx).exp();
            s[i * c + j] = e;
            z += e;
        }
        for i in 0..c {
            s[i * c + j] /= z;
        }
    }
}

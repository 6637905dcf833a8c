//! Backbone tail: split-channel bottleneck whose processed half runs through
//! fusion-attention blocks (or feed-forward only, without attention).

use crate::autograd::{Graph, Var};
use crate::cafm::Cafm;
use crate::error::{Error, Result};
use crate::nn::{Act, ConvBnAct};
use crate::params::ParamBuilder;
use crate::tensor::Float;

#[derive(Clone, Debug)]
pub struct PsaBlock {
    pub attn: Option<Cafm>,
    pub ffn_expand: ConvBnAct,
    pub ffn_project: ConvBnAct,
}

impl PsaBlock {
    fn new<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        ch: usize,
        groups: usize,
        attention: bool,
    ) -> Result<Self> {
        let mut s = b.sub(name);
        let attn = if attention {
            Some(Cafm::new(&mut s, "attn", ch, groups)?)
        } else {
            None
        };
        Ok(Self {
            attn,
            ffn_expand: ConvBnAct::new(&mut s, "ffn_expand", ch, 2 * ch, 1, 1, Act::Silu)?,
            ffn_project: ConvBnAct::new(&mut s, "ffn_project", 2 * ch, ch, 1, 1, Act::Identity)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut x = x;
        if let Some(attn) = &self.attn {
            let a = attn.forward(g, x)?;
            x = g.add(x, a)?;
        }
        let f = self.ffn_expand.forward(g, x)?;
        let f = self.ffn_project.forward(g, f)?;
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct C2Psa {
    pub channels: usize,
    pub cv1: ConvBnAct,
    pub blocks: Vec<PsaBlock>,
    pub cv2: ConvBnAct,
}

impl C2Psa {
    /// `attention = false` builds the same structure with the attention step removed.
    pub fn new<T: Float>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        n: usize,
        groups: usize,
        attention: bool,
    ) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::Config(format!(
                "split bottleneck needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        let mut s = b.sub(name);
        let cv1 = ConvBnAct::new(&mut s, "cv1", channels, channels, 1, 1, Act::Silu)?;
        let blocks = (0..n)
            .map(|i| PsaBlock::new(&mut s, &format!("m{i}"), half, groups, attention))
            .collect::<Result<Vec<_>>>()?;
        let cv2 = ConvBnAct::new(&mut s, "cv2", channels, channels, 1, 1, Act::Silu)?;
        Ok(Self {
            channels,
            cv1,
            blocks,
            cv2,
        })
    }

    /// Second half of `cv1(x)` after the inner blocks; exposed for tests.
    pub fn processed_half<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
    ) -> Result<(Var, Var, Var)> {
        let half = self.channels / 2;
        let y = self.cv1.forward(g, x)?;
        let a = g.slice_channels(y, 0, half)?;
        let b_in = g.slice_channels(y, half, half)?;
        let mut b = b_in;
        for blk in &self.blocks {
            b = blk.forward(g, b)?;
        }
        Ok((a, b_in, b))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "block built for {} channels got input {:?}",
                self.channels, shape
            )));
        }
        let (a, _, b) = self.processed_half(g, x)?;
        let cat = g.concat_channels(&[a, b])?;
        self.cv2.forward(g, cat)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check_block, projection, DEFAULT_EPS, DEFAULT_TOL};
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn build(
        channels: usize,
        groups: usize,
        attention: bool,
        seed: u64,
    ) -> (ParamStore<f64>, C2Psa) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let m = C2Psa::new(&mut b, "tail", channels, 1, groups, attention).unwrap();
        (store, m)
    }

    #[test]
    fn shape_is_preserved() {
        let (store, m) = build(32, 4, true, 0);
        let mut g = Graph::new(&store, false);
        let x = g.input(projection(&[1, 32, 10, 10], 1));
        let y = m.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 32, 10, 10]);
    }

    #[test]
    fn odd_channels_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        assert!(matches!(
            C2Psa::new(&mut b, "tail", 7, 1, 1, true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zeroed_branches_leave_processed_half_unchanged() {
        let (mut store, m) = build(16, 4, true, 3);
        for p in [
            "tail.m0.attn.local_dw",
            "tail.m0.attn.out_proj",
            "tail.m0.ffn_project.bn",
        ] {
            assert!(store.zero_prefix(p) > 0);
        }
        let mut g = Graph::new(&store, true);
        let x = g.input(projection(&[2, 16, 6, 6], 4));
        let (_, b_in, b_out) = m.processed_half(&mut g, x).unwrap();
        assert_eq!(g.value(b_in).data(), g.value(b_out).data());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, shape) in [(10, [1, 8, 4, 4]), (11, [2, 8, 3, 5]), (12, [1, 8, 5, 3])] {
            let (store, m) = build(8, 2, true, seed);
            let x: Tensor<f64> = projection(&shape, seed + 100);
            let report =
                check_block(&store, &x, seed, DEFAULT_EPS, |g, v| m.forward(g, v)).unwrap();
            assert!(
                report.passes(DEFAULT_TOL),
                "{:?}",
                report.failures(DEFAULT_TOL)
            );
        }
    }
}

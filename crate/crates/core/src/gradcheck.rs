//! Central finite-difference gradient checking in double precision.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the reverse-mode code it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Gradients whose norm is below this are compared by absolute difference; a
/// bias feeding straight into a batch norm has an exactly-zero gradient and
/// only finite-difference noise on the numeric side.
pub const NEGLIGIBLE_NORM: f64 = 1e-7;

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference norm when both are negligible.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < NEGLIGIBLE_NORM {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + eps;
            let plus = f(&work);
            work[i] = x[i] - eps;
            let minus = f(&work);
            work[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub numel: usize,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<GradCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checks.iter().all(|c| c.rel_err < tol)
    }

    pub fn failures(&self, tol: f64) -> Vec<&GradCheck> {
        self.checks.iter().filter(|c| c.rel_err >= tol).collect()
    }
}

/// Random projection used to turn a tensor output into a scalar loss.
pub fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks gradients of `sum(forward(x) * R)` w.r.t. the input and every
/// trainable parameter, `R` a fixed random projection.
///
/// `forward` runs on a training-mode graph.
pub fn check_block<F>(
    store: &ParamStore<f64>,
    input: &Tensor<f64>,
    seed: u64,
    eps: f64,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let loss_of = |store: &ParamStore<f64>,
                   x: &Tensor<f64>,
                   proj: Option<&Tensor<f64>>|
     -> Result<(f64, Tensor<f64>)> {
        let mut g = Graph::new(store, true);
        let xv = g.input(x.clone());
        let out = forward(&mut g, xv)?;
        let r = match proj {
            Some(r) => r.clone(),
            None => projection(g.shape(out), seed),
        };
        let l = g.dot(out, r.clone())?;
        Ok((g.value(l).data()[0], r))
    };
    let (_, proj) = loss_of(store, input, None)?;

    let mut g = Graph::new(store, true);
    let xv = g.input_with_grad(input.clone());
    let out = forward(&mut g, xv)?;
    let loss = g.dot(out, proj.clone())?;
    let grads = g.backward(loss)?;

    let mut checks = Vec::new();
    let analytic_x = grads
        .wrt(xv)
        .map(|t| t.to_f64_vec())
        .unwrap_or_else(|| vec![0.0; input.numel()]);
    let numeric_x = numeric_gradient(input.data(), eps, |v| {
        let x = Tensor::new(input.shape(), v.to_vec()).expect("shape");
        loss_of(store, &x, Some(&proj))
            .map(|r| r.0)
            .unwrap_or(f64::NAN)
    });
    checks.push(GradCheck {
        name: "input".into(),
        numel: input.numel(),
        rel_err: relative_error(&analytic_x, &numeric_x),
    });

    for id in store.trainable_ids() {
        let analytic = grads
            .param(id)
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        let numeric = numeric_param_gradient(store, id, eps, |s| {
            loss_of(s, input, Some(&proj))
                .map(|r| r.0)
                .unwrap_or(f64::NAN)
        });
        checks.push(GradCheck {
            name: store.name(id).to_string(),
            numel: analytic.len(),
            rel_err: relative_error(&analytic, &numeric),
        });
    }
    Ok(GradCheckReport { checks })
}

/// Central differences of `f` w.r.t. every element of parameter `id`.
pub fn numeric_param_gradient(
    store: &ParamStore<f64>,
    id: ParamId,
    eps: f64,
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
) -> Vec<f64> {
    let mut work = store.clone();
    let base = store.get(id).data().to_vec();
    (0..base.len())
        .map(|i| {
            work.get_mut(id).data_mut()[i] = base[i] + eps;
            let plus = f(&work);
            work.get_mut(id).data_mut()[i] = base[i] - eps;
            let minus = f(&work);
            work.get_mut(id).data_mut()[i] = base[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

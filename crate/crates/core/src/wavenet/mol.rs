//! Discretized mixture of logistics over uniformly spaced bins on [-1, 1].
//!
//! All arithmetic is f64. Interior bins use
//! `log(σ(a) - σ(b)) = -softplus(-a) - softplus(b) + log(1 - e^{-(a-b)})`,
//! which stays accurate when the bin is far out in either tail.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MolError {
    #[error("non-finite mixture parameter at position {0}")]
    NonFinite(usize),
    #[error("expected {expected} mixture values, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("non-finite target sample")]
    NonFiniteTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantization {
    pub levels: u32,
    pub log_scale_min: f64,
}

impl Default for Quantization {
    fn default() -> Self {
        Self {
            levels: 65536,
            log_scale_min: -7.0,
        }
    }
}

impl Quantization {
    pub fn bin_width(&self) -> f64 {
        2.0 / (self.levels - 1) as f64
    }

    pub fn bin_index(&self, x: f64) -> u32 {
        let k = ((x.clamp(-1.0, 1.0) + 1.0) / self.bin_width()).round();
        (k as u32).min(self.levels - 1)
    }

    pub fn bin_center(&self, k: u32) -> f64 {
        -1.0 + k as f64 * self.bin_width()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 - e^{-z})` for `z > 0`.
fn log1mexp(z: f64) -> f64 {
    if z < std::f64::consts::LN_2 {
        (-(-z).exp_m1()).ln()
    } else {
        (-(-z).exp()).ln_1p()
    }
}

/// Log-probability of bin `k` under one logistic component, and its
/// derivatives with respect to the mean and the (already clamped) log-scale.
fn component(k: u32, mean: f64, log_scale: f64, q: &Quantization) -> (f64, f64, f64) {
    let half = 0.5 * q.bin_width();
    let centered = q.bin_center(k) - mean;
    let inv_s = (-log_scale).exp();
    let plus = (centered + half) * inv_s;
    let minus = (centered - half) * inv_s;
    if k == 0 {
        let lp = -softplus(-plus);
        let d = sigmoid(-plus);
        (lp, -inv_s * d, -plus * d)
    } else if k == q.levels - 1 {
        let lp = -softplus(minus);
        let d = sigmoid(minus);
        (lp, inv_s * d, minus * d)
    } else {
        let z = q.bin_width() * inv_s;
        let lp = -softplus(-plus) - softplus(minus) + log1mexp(z);
        let (sp, sm) = (sigmoid(-plus), sigmoid(minus));
        let dz = 1.0 / z.exp_m1();
        let d_mean = -inv_s * (sp - sm);
        let d_ls = -plus * sp + minus * sm - z * dz;
        (lp, d_mean, d_ls)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn check(params: &[f64], m: usize) -> Result<(), MolError> {
    if params.len() != 3 * m || m == 0 {
        return Err(MolError::Arity {
            expected: 3 * m,
            got: params.len(),
        });
    }
    if let Some(i) = params.iter().position(|v| !v.is_finite()) {
        return Err(MolError::NonFinite(i));
    }
    Ok(())
}

/// Result of [`log_prob_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct MolEval {
    pub log_prob: f64,
    /// d log_prob / d params, same layout as the parameters.
    pub grad: Vec<f64>,
    /// Per component: true when the raw log-scale was clamped.
    pub clamped: Vec<bool>,
}

/// Log-probability of the bin containing `x`; `params` is
/// `[logits(M), means(M), raw log-scales(M)]`.
pub fn mol_log_prob(x: f64, params: &[f64], m: usize, q: &Quantization) -> Result<f64, MolError> {
    Ok(log_prob_grad(x, params, m, q)?.log_prob)
}

pub fn log_prob_grad(x: f64, params: &[f64], m: usize, q: &Quantization) -> Result<MolEval, MolError> {
    check(params, m)?;
    if !x.is_finite() {
        return Err(MolError::NonFiniteTarget);
    }
    let k = q.bin_index(x);
    let log_pi = log_softmax(&params[..m]);
    let mut joint = vec![0.0; m];
    let mut d_mean = vec![0.0; m];
    let mut d_ls = vec![0.0; m];
    let mut clamped = vec![false; m];
    for i in 0..m {
        let raw = params[2 * m + i];
        clamped[i] = raw < q.log_scale_min;
        let ls = raw.max(q.log_scale_min);
        let (lp, dm, dl) = component(k, params[m + i], ls, q);
        joint[i] = log_pi[i] + lp;
        d_mean[i] = dm;
        d_ls[i] = if clamped[i] { 0.0 } else { dl };
    }
    let max = joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_prob = max + joint.iter().map(|j| (j - max).exp()).sum::<f64>().ln();
    let mut grad = vec![0.0; 3 * m];
    for i in 0..m {
        let r = (joint[i] - log_prob).exp();
        grad[i] = r - log_pi[i].exp();
        grad[m + i] = r * d_mean[i];
        grad[2 * m + i] = r * d_ls[i];
    }
    Ok(MolEval {
        log_prob,
        grad,
        clamped,
    })
}

/// Mean negative log-likelihood over timesteps; `params` is row-major
/// `[T x 3M]`. Returns the loss, its gradient and the clamp flags.
pub fn mean_nll(
    targets: &[f64],
    params: &[f64],
    m: usize,
    q: &Quantization,
) -> Result<(f64, Vec<f64>, Vec<bool>), MolError> {
    let width = 3 * m;
    if params.len() != targets.len() * width {
        return Err(MolError::Arity {
            expected: targets.len() * width,
            got: params.len(),
        });
    }
    let n = targets.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; params.len()];
    let mut kinks = Vec::with_capacity(targets.len() * m);
    for (t, &x) in targets.iter().enumerate() {
        let row = &params[t * width..(t + 1) * width];
        let eval = log_prob_grad(x, row, m, q).map_err(|e| match e {
            MolError::NonFinite(i) => MolError::NonFinite(t * width + i),
            other => other,
        })?;
        total -= eval.log_prob;
        for (g, d) in grad[t * width..(t + 1) * width].iter_mut().zip(&eval.grad) {
            *g = -d / n;
        }
        kinks.extend(eval.clamped);
    }
    Ok((total / n, grad, kinks))
}

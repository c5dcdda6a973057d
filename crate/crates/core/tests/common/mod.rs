#![allow(dead_code)]

//! Independent oracles and numeric helpers shared by the integration tests
//! and the acceptance harness.

use capc::model::{Module, PredictionHeads};
use capc::seed::{self, Rng};
use ndarray::{Array2, Array3, ArrayD};
use rand::Rng as _;
use rand_distr::StandardNormal;

pub fn rng(tag: u64) -> Rng {
    seed::rng(0x7e57, &[tag])
}

pub fn normal2(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn normal3(rng: &mut Rng, a: usize, b: usize, c: usize) -> Array3<f64> {
    Array3::from_shape_fn((a, b, c), |_| rng.sample(StandardNormal))
}

/// Scalar-loop InfoNCE averaged over offsets: the head for offset `k` is
/// `pred = c W_k + b_k`, scores `s[i][j] = z_k[j] . pred[i]`.
pub fn cpc_oracle(z_future: &Array3<f64>, c: &Array2<f64>, heads: &PredictionHeads<f64>) -> f64 {
    let (t, b, d) = z_future.dim();
    let h = c.ncols();
    let mut total = 0.0;
    for k in 0..t {
        let w = &heads.heads[k].weight.value;
        let bias = &heads.heads[k].bias.value;
        let mut pred = vec![vec![0.0; d]; b];
        for i in 0..b {
            for o in 0..d {
                let mut acc = bias[[o]];
                for m in 0..h {
                    acc += c[[i, m]] * w[[m, o]];
                }
                pred[i][o] = acc;
            }
        }
        let mut loss_k = 0.0;
        for i in 0..b {
            let scores: Vec<f64> = (0..b)
                .map(|j| (0..d).map(|o| z_future[[k, j, o]] * pred[i][o]).sum())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            loss_k += lse - scores[i];
        }
        total += loss_k / b as f64;
    }
    total / t as f64
}

/// Scalar-loop batch-centered cross-correlation.
pub fn corr_oracle(a: &Array2<f64>, b: &Array2<f64>, eps: f64) -> Array2<f64> {
    let (n, h) = a.dim();
    let mean = |x: &Array2<f64>, j: usize| (0..n).map(|r| x[[r, j]]).sum::<f64>() / n as f64;
    let mut out = Array2::zeros((h, h));
    for i in 0..h {
        let mi = mean(a, i);
        let ni = (0..n).map(|r| (a[[r, i]] - mi).powi(2)).sum::<f64>().sqrt();
        for j in 0..h {
            let mj = mean(b, j);
            let nj = (0..n).map(|r| (b[[r, j]] - mj).powi(2)).sum::<f64>().sqrt();
            let s: f64 = (0..n).map(|r| (a[[r, i]] - mi) * (b[[r, j]] - mj)).sum();
            out[[i, j]] = s / (ni * nj + eps);
        }
    }
    out
}

/// `||a - n|| / (||a|| + ||n||)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `loss` w.r.t. every element of `x`.
pub fn numeric_grad<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    h: f64,
    mut loss: impl FnMut(&ndarray::Array<f64, D>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.as_slice_memory_order().expect("contiguous")[i];
        probe.as_slice_memory_order_mut().unwrap()[i] = orig + h;
        let up = loss(&probe);
        probe.as_slice_memory_order_mut().unwrap()[i] = orig - h;
        let down = loss(&probe);
        probe.as_slice_memory_order_mut().unwrap()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Every parameter value (buffers included) by name.
pub fn param_values<F: capc::scalar::Scalar, M: Module<F>>(m: &M) -> Vec<(String, ArrayD<F>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, p| out.push((name.to_string(), p.value.clone())));
    out
}

/// Finite-difference comparison of one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

impl GradCheck {
    /// Relative error below `tol`, or both gradients vanish to roundoff (a
    /// bias feeding a batch-normalization layer has an exactly zero
    /// gradient, where the relative error is meaningless).
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol || (self.analytic_norm < 1e-10 && self.numeric_norm < 1e-10)
    }
}

/// Compares the accumulated gradients of `model` with central differences
/// of `loss` for every trainable parameter tensor.
pub fn module_grad_checks<M: Module<f64> + Clone>(
    model: &M,
    h: f64,
    mut loss: impl FnMut(&mut M) -> f64,
) -> Vec<GradCheck> {
    let mut tensors: Vec<(String, ArrayD<f64>, ArrayD<f64>)> = Vec::new();
    model.visit("", &mut |name, p| {
        if p.kind.is_trainable() {
            tensors.push((name.to_string(), p.value.clone(), p.grad.clone()));
        }
    });
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    tensors
        .into_iter()
        .map(|(name, value, grad)| {
            let numeric = numeric_grad(&value, h, |v| {
                let mut m = model.clone();
                m.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value.assign(v);
                    }
                });
                loss(&mut m)
            });
            let analytic: Vec<f64> = grad.as_standard_layout().iter().copied().collect();
            GradCheck {
                rel_error: rel_error(&analytic, &numeric),
                analytic_norm: norm(&analytic),
                numeric_norm: norm(&numeric),
                name,
            }
        })
        .collect()
}

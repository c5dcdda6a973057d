//! Building blocks with explicit forward caches and analytic backward passes.
//!
//! Convolutional activations use the `[N, H, W, C]` layout so that channel
//! statistics and im2col matrices are plain row-major views.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayView4, ArrayViewMut2, Axis, Ix1, Ix2, IxDyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    /// Normalization scale/shift.
    Norm,
    /// Non-trainable state (running statistics).
    Buffer,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub kind: ParamKind,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: ArrayD<F>, kind: ParamKind) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad, kind }
    }

    pub fn zeros(shape: &[usize], kind: ParamKind) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)), kind)
    }

    pub fn uniform(shape: &[usize], bound: f64, kind: ParamKind, rng: &mut Rng) -> Self {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            F::lit(bound * (2.0 * rng.random::<f64>() - 1.0))
        });
        Self::new(value, kind)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn v1(&self) -> ndarray::ArrayView1<'_, F> {
        self.value.view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
    }

    pub fn v2(&self) -> ArrayView2<'_, F> {
        self.value.view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }

    pub fn g1(&mut self) -> ndarray::ArrayViewMut1<'_, F> {
        self.grad.view_mut().into_dimensionality::<Ix1>().expect("rank-1 parameter")
    }

    pub fn g2(&mut self) -> ArrayViewMut2<'_, F> {
        self.grad.view_mut().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }
}

/// Anything holding named parameters. Visit order is fixed and defines the
/// canonical parameter names used by checkpoints and optimizers.
pub trait Module<F: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Number of trainable scalars.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.kind.is_trainable() {
                n += p.value.len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `dst += a^T b`
fn add_at_b<F: Scalar>(dst: &mut ArrayViewMut2<'_, F>, a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) {
    general_mat_mul(F::one(), &a.t(), b, F::one(), dst);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    /// `[in, out]`
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> Linear<F> {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            weight: Param::uniform(&[input, output], bound, ParamKind::Weight, rng),
            bias: Param::zeros(&[output], ParamKind::Bias),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.v2());
        y += &self.bias.v1();
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: ArrayView2<'_, F>, dy: ArrayView2<'_, F>) -> Array2<F> {
        add_at_b(&mut self.weight.g2(), &x, &dy);
        let db = dy.sum_axis(Axis(0));
        let mut gb = self.bias.g1();
        gb += &db;
        dy.dot(&self.weight.v2().t())
    }
}

impl<F: Scalar> Module<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// 3x3 convolution, stride 1, zero padding 1, over `[N, H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<F> {
    /// `[9 * C_in, C_out]`, rows ordered `(kh, kw, c_in)`.
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> Conv3x3<F> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        let fan_in = 9 * c_in;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::uniform(&[fan_in, c_out], bound, ParamKind::Weight, rng),
            bias: Param::zeros(&[c_out], ParamKind::Bias),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[0] / 9
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn im2col(x: ArrayView4<'_, F>) -> Array2<F> {
        let (n, h, w, c) = x.dim();
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut cols = Array2::zeros((n * h * w, 9 * c));
        let dst = cols.as_slice_mut().expect("standard layout");
        let row_len = 9 * c;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let row = ((b * h + i) * w + j) * row_len;
                    for ki in 0..3 {
                        let ii = i + ki;
                        if ii == 0 || ii > h {
                            continue;
                        }
                        for kj in 0..3 {
                            let jj = j + kj;
                            if jj == 0 || jj > w {
                                continue;
                            }
                            let s = ((b * h + ii - 1) * w + jj - 1) * c;
                            let d = row + (ki * 3 + kj) * c;
                            dst[d..d + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(dcols: &Array2<F>, dims: (usize, usize, usize, usize)) -> Array4<F> {
        let (n, h, w, c) = dims;
        let mut dx = Array4::zeros(dims);
        let dst = dx.as_slice_mut().expect("standard layout");
        let src = dcols.as_slice().expect("standard layout");
        let row_len = 9 * c;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let row = ((b * h + i) * w + j) * row_len;
                    for ki in 0..3 {
                        let ii = i + ki;
                        if ii == 0 || ii > h {
                            continue;
                        }
                        for kj in 0..3 {
                            let jj = j + kj;
                            if jj == 0 || jj > w {
                                continue;
                            }
                            let d = ((b * h + ii - 1) * w + jj - 1) * c;
                            let s = row + (ki * 3 + kj) * c;
                            for k in 0..c {
                                dst[d + k] += src[s + k];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col matrix needed by `backward`.
    pub fn forward(&self, x: ArrayView4<'_, F>) -> (Array4<F>, Array2<F>) {
        let (n, h, w, _) = x.dim();
        let cols = Self::im2col(x);
        let mut y = cols.dot(&self.weight.v2());
        y += &self.bias.v1();
        let y = y
            .into_shape_with_order((n, h, w, self.c_out()))
            .expect("contiguous output");
        (y, cols)
    }

    pub fn backward(&mut self, cols: &Array2<F>, dy: ArrayView4<'_, F>) -> Array4<F> {
        let (n, h, w, c_out) = dy.dim();
        let dy = dy.as_standard_layout();
        let dy2 = dy
            .view()
            .into_shape_with_order((n * h * w, c_out))
            .expect("contiguous gradient");
        add_at_b(&mut self.weight.g2(), &cols.view(), &dy2);
        let mut gb = self.bias.g1();
        gb += &dy2.sum_axis(Axis(0));
        let dcols = dy2.dot(&self.weight.v2().t());
        Self::col2im(&dcols, (n, h, w, self.c_in()))
    }
}

impl<F: Scalar> Module<F> for Conv3x3<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Running statistics; no batch coupling.
    Eval,
}

/// Batch normalization over the last axis of `[M, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
    mode: Mode,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels])), ParamKind::Norm),
            beta: Param::zeros(&[channels], ParamKind::Norm),
            running_mean: Param::zeros(&[channels], ParamKind::Buffer),
            running_var: Param::new(ArrayD::ones(IxDyn(&[channels])), ParamKind::Buffer),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, x: ArrayView2<'_, F>, mode: Mode) -> (Array2<F>, BnCache<F>) {
        let m = x.nrows();
        let eps = F::lit(self.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = &x - &mean;
                let var = (&centered * &centered).mean_axis(Axis(0)).expect("non-empty batch");
                let mom = F::lit(self.momentum);
                let unbias = if m > 1 {
                    F::lit(m as f64 / (m - 1) as f64)
                } else {
                    F::one()
                };
                let mut rm = self.running_mean.value.view_mut().into_dimensionality::<Ix1>().unwrap();
                rm.zip_mut_with(&mean, |r, &b| *r = (F::one() - mom) * *r + mom * b);
                let mut rv = self.running_var.value.view_mut().into_dimensionality::<Ix1>().unwrap();
                rv.zip_mut_with(&var, |r, &b| *r = (F::one() - mom) * *r + mom * b * unbias);
                (mean, var)
            }
            Mode::Eval => (self.running_mean.v1().to_owned(), self.running_var.v1().to_owned()),
        };
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let xhat = (&x - &mean) * &inv_std;
        let y = &xhat * &self.gamma.v1() + &self.beta.v1();
        (y, BnCache { xhat, inv_std, mode })
    }

    /// Batch normalization in eval mode without touching running statistics.
    pub fn infer(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let eps = F::lit(self.eps);
        let inv_std = self.running_var.v1().mapv(|v| F::one() / (v + eps).sqrt());
        let xhat = (&x - &self.running_mean.v1()) * &inv_std;
        &xhat * &self.gamma.v1() + &self.beta.v1()
    }

    pub fn backward(&mut self, cache: &BnCache<F>, dy: ArrayView2<'_, F>) -> Array2<F> {
        let m = F::lit(dy.nrows() as f64);
        let mut gg = self.gamma.g1();
        gg += &(&dy * &cache.xhat).sum_axis(Axis(0));
        let mut gb = self.beta.g1();
        gb += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma.v1();
        match cache.mode {
            Mode::Eval => dxhat * &cache.inv_std,
            Mode::Train => {
                let sum = dxhat.sum_axis(Axis(0));
                let dot = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                let scaled = dxhat * m - &sum - &(&cache.xhat * &dot);
                scaled * &cache.inv_std.mapv(|s| s / m)
            }
        }
    }
}

impl<F: Scalar> Module<F> for BatchNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

pub fn relu<F: Scalar, D: ndarray::Dimension>(mut x: ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
    x
}

/// Masks `dy` where the ReLU output `y` was not positive.
pub fn relu_backward<F: Scalar, D: ndarray::Dimension>(
    y: &ndarray::Array<F, D>,
    mut dy: ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    dy.zip_mut_with(y, |g, &v| {
        if v <= F::zero() {
            *g = F::zero()
        }
    });
    dy
}

/// 2x2 max pooling with stride 2 over `[N, H, W, C]`; odd trailing rows and
/// columns are dropped. Returns the flat argmax index per output element.
pub fn max_pool2<F: Scalar>(x: ArrayView4<'_, F>) -> (Array4<F>, Vec<usize>) {
    let (n, h, w, c) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut y = Array4::zeros((n, ho, wo, c));
    let mut arg = vec![0usize; n * ho * wo * c];
    let dst = y.as_slice_mut().expect("standard layout");
    for b in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                for k in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = F::neg_infinity();
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + k;
                            if src[idx] > best_v || best == usize::MAX {
                                best_v = src[idx];
                                best = idx;
                            }
                        }
                    }
                    let o = ((b * ho + i) * wo + j) * c + k;
                    dst[o] = best_v;
                    arg[o] = best;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward<F: Scalar>(
    arg: &[usize],
    dy: ArrayView4<'_, F>,
    input_dim: (usize, usize, usize, usize),
) -> Array4<F> {
    let mut dx = Array4::zeros(input_dim);
    let dst = dx.as_slice_mut().expect("standard layout");
    let dy = dy.as_standard_layout();
    for (g, &i) in dy.iter().zip(arg) {
        dst[i] += *g;
    }
    dx
}

//! Gated recurrent unit summarizing window embeddings into a context vector.
//!
//! Gate layout follows the common `(reset, update, new)` convention:
//!
//! ```text
//! r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
//! u  = sigmoid(x W_iu + b_iu + h W_hu + b_hu)
//! n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
//! h' = (1 - u) * n + u * h
//! ```

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use super::layers::{join, Module, Param, ParamKind};
use crate::error::{CapcError, Result};
use crate::scalar::Scalar;
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Gru<F> {
    /// `[D, 3H]`
    pub w_ih: Param<F>,
    /// `[H, 3H]`
    pub w_hh: Param<F>,
    pub b_ih: Param<F>,
    pub b_hh: Param<F>,
}

struct Step<F> {
    h_prev: Array2<F>,
    r: Array2<F>,
    u: Array2<F>,
    n: Array2<F>,
    /// `h W_hn + b_hn`
    hn: Array2<F>,
}

pub struct GruCache<F> {
    input: Array3<F>,
    steps: Vec<Step<F>>,
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Scalar> Gru<F> {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        Self {
            w_ih: Param::uniform(&[input, 3 * hidden], bound, ParamKind::Weight, rng),
            w_hh: Param::uniform(&[hidden, 3 * hidden], bound, ParamKind::Weight, rng),
            b_ih: Param::zeros(&[3 * hidden], ParamKind::Bias),
            b_hh: Param::zeros(&[3 * hidden], ParamKind::Bias),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.value.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.value.shape()[0]
    }

    fn step(&self, x: ArrayView2<'_, F>, h: &Array2<F>) -> Step<F> {
        let hd = self.hidden_dim();
        let mut gi = x.dot(&self.w_ih.v2());
        gi += &self.b_ih.v1();
        let mut gh = h.dot(&self.w_hh.v2());
        gh += &self.b_hh.v1();
        let r = (&gi.slice(s![.., ..hd]) + &gh.slice(s![.., ..hd])).mapv(sigmoid);
        let u = (&gi.slice(s![.., hd..2 * hd]) + &gh.slice(s![.., hd..2 * hd])).mapv(sigmoid);
        let hn = gh.slice(s![.., 2 * hd..]).to_owned();
        let n = (&gi.slice(s![.., 2 * hd..]) + &(&r * &hn)).mapv(F::tanh);
        Step {
            h_prev: h.clone(),
            r,
            u,
            n,
            hn,
        }
    }

    fn next_hidden(step: &Step<F>) -> Array2<F> {
        let one_minus = step.u.mapv(|v| F::one() - v);
        &one_minus * &step.n + &step.u * &step.h_prev
    }

    fn check(&self, z_seq: &ArrayView3<'_, F>) -> Result<()> {
        let (_, t, d) = z_seq.dim();
        if t == 0 {
            return Err(CapcError::invalid("context needs at least one window embedding"));
        }
        if d != self.input_dim() {
            return Err(CapcError::invalid(format!(
                "context expects embeddings of width {}, got {d}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Hidden state after consuming `z_seq[:, 0..t]` from a zero state.
    pub fn context(&self, z_seq: ArrayView3<'_, F>) -> Result<Array2<F>> {
        self.check(&z_seq)?;
        let mut h = Array2::zeros((z_seq.len_of(Axis(0)), self.hidden_dim()));
        for x in z_seq.axis_iter(Axis(1)) {
            h = Self::next_hidden(&self.step(x, &h));
        }
        Ok(h)
    }

    pub fn forward(&self, z_seq: ArrayView3<'_, F>) -> Result<(Array2<F>, GruCache<F>)> {
        self.check(&z_seq)?;
        let mut h = Array2::zeros((z_seq.len_of(Axis(0)), self.hidden_dim()));
        let mut steps = Vec::with_capacity(z_seq.len_of(Axis(1)));
        for x in z_seq.axis_iter(Axis(1)) {
            let st = self.step(x, &h);
            h = Self::next_hidden(&st);
            steps.push(st);
        }
        Ok((
            h,
            GruCache {
                input: z_seq.to_owned(),
                steps,
            },
        ))
    }

    /// Backpropagation through time from `dL/dh_t`; returns `dL/dz_seq`.
    pub fn backward(&mut self, cache: &GruCache<F>, dh: ArrayView2<'_, F>) -> Array3<F> {
        let hd = self.hidden_dim();
        let (b, t, d) = cache.input.dim();
        let mut dz = Array3::zeros((b, t, d));
        let mut dh = dh.to_owned();
        for (k, st) in cache.steps.iter().enumerate().rev() {
            let x = cache.input.index_axis(Axis(1), k);
            let dn = &dh * &st.u.mapv(|v| F::one() - v);
            let du = &dh * &(&st.h_prev - &st.n);
            let mut dh_prev = &dh * &st.u;
            let da_n = &dn * &st.n.mapv(|v| F::one() - v * v);
            let dr = &da_n * &st.hn;
            let dhn = &da_n * &st.r;
            let da_r = &dr * &st.r.mapv(|v| v * (F::one() - v));
            let da_u = &du * &st.u.mapv(|v| v * (F::one() - v));

            let mut gi = Array2::zeros((b, 3 * hd));
            gi.slice_mut(s![.., ..hd]).assign(&da_r);
            gi.slice_mut(s![.., hd..2 * hd]).assign(&da_u);
            let mut gh = gi.clone();
            gi.slice_mut(s![.., 2 * hd..]).assign(&da_n);
            gh.slice_mut(s![.., 2 * hd..]).assign(&dhn);

            general_mat_mul(F::one(), &x.t(), &gi, F::one(), &mut self.w_ih.g2());
            general_mat_mul(F::one(), &st.h_prev.t(), &gh, F::one(), &mut self.w_hh.g2());
            let mut gb = self.b_ih.g1();
            gb += &gi.sum_axis(Axis(0));
            let mut gb = self.b_hh.g1();
            gb += &gh.sum_axis(Axis(0));

            dz.index_axis_mut(Axis(1), k).assign(&gi.dot(&self.w_ih.v2().t()));
            dh_prev += &gh.dot(&self.w_hh.v2().t());
            dh = dh_prev;
        }
        dz
    }
}

impl<F: Scalar> Module<F> for Gru<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "w_ih"), &self.w_ih);
        f(&join(prefix, "w_hh"), &self.w_hh);
        f(&join(prefix, "b_ih"), &self.b_ih);
        f(&join(prefix, "b_hh"), &self.b_hh);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "w_ih"), &mut self.w_ih);
        f(&join(prefix, "w_hh"), &mut self.w_hh);
        f(&join(prefix, "b_ih"), &mut self.b_ih);
        f(&join(prefix, "b_hh"), &mut self.b_hh);
    }
}

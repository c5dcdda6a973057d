//! Temporal-prediction (InfoNCE), cross-view redundancy-reduction and hybrid
//! losses, each with an analytic gradient.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CapcError, Result};
use crate::model::PredictionHeads;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BtConfig {
    /// Weight of the off-diagonal (redundancy) term.
    pub lambda: f64,
    /// Floor added to the normalization denominator.
    pub eps: f64,
}

impl Default for BtConfig {
    fn default() -> Self {
        Self {
            lambda: 0.002,
            eps: 1e-9,
        }
    }
}

impl BtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.eps > 0.0) {
            return Err(CapcError::invalid("lambda and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// Weight of the two temporal-prediction terms.
    pub beta: f64,
    /// Number of future windows predicted.
    pub horizon: usize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self { beta: 50.0, horizon: 9 }
    }
}

/// Row-wise log-softmax.
fn log_softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// InfoNCE over a `[B, B]` score matrix whose diagonal holds the positives:
/// `-mean_i log softmax_j(s[i, :])[i]`.
pub fn info_nce<F: Scalar>(scores: &Array2<F>) -> F {
    let ls = log_softmax(scores);
    let b = F::lit(ls.nrows() as f64);
    -ls.diag().sum() / b
}

/// `(loss, dL/dscores)`
fn info_nce_grad<F: Scalar>(scores: &Array2<F>) -> (F, Array2<F>) {
    let ls = log_softmax(scores);
    let b = F::lit(ls.nrows() as f64);
    let loss = -ls.diag().sum() / b;
    let mut g = ls.mapv(F::exp);
    for i in 0..g.nrows() {
        g[[i, i]] -= F::one();
    }
    g.mapv_inplace(|v| v / b);
    (loss, g)
}

fn check_cpc<F: Scalar>(
    z_future: &ArrayView3<'_, F>,
    c: &ArrayView2<'_, F>,
    heads: &PredictionHeads<F>,
) -> Result<()> {
    let (t, b, _) = z_future.dim();
    if b < 2 {
        return Err(CapcError::invalid(
            "temporal prediction needs a batch of at least 2 (no negatives)",
        ));
    }
    if t == 0 || t > heads.horizon() {
        return Err(CapcError::invalid(format!(
            "{t} future windows given for {} prediction heads",
            heads.horizon()
        )));
    }
    if c.nrows() != b {
        return Err(CapcError::invalid("context and future batch sizes differ"));
    }
    Ok(())
}

/// Score matrix `s[i, j] = z_{t+k}^j . (W_k c^i)`.
fn cpc_scores<F: Scalar>(
    z_k: ArrayView2<'_, F>,
    c: ArrayView2<'_, F>,
    heads: &PredictionHeads<F>,
    k: usize,
) -> Result<(Array2<F>, Array2<F>)> {
    let pred = heads.predict_future(c, k)?;
    if pred.ncols() != z_k.ncols() {
        return Err(CapcError::invalid("prediction and embedding widths differ"));
    }
    let scores = pred.dot(&z_k.t());
    Ok((scores, pred))
}

/// Temporal prediction loss averaged over the `T` offsets. `z_future[k-1]`
/// holds the embeddings of window `t + k` for every batch sample; negatives
/// are the other batch samples at the same offset.
pub fn cpc_loss<F: Scalar>(
    z_future: ArrayView3<'_, F>,
    c: ArrayView2<'_, F>,
    heads: &PredictionHeads<F>,
) -> Result<F> {
    check_cpc(&z_future, &c, heads)?;
    let t = z_future.len_of(Axis(0));
    let mut total = F::zero();
    for (k, z_k) in z_future.outer_iter().enumerate() {
        let (scores, _) = cpc_scores(z_k, c, heads, k + 1)?;
        total += info_nce(&scores);
    }
    Ok(total / F::lit(t as f64))
}

#[derive(Debug, Clone)]
pub struct CpcGrad<F> {
    pub loss: F,
    /// `scale * dL/dz_future`
    pub dz_future: Array3<F>,
    /// `scale * dL/dc`
    pub dc: Array2<F>,
}

/// [`cpc_loss`] with gradients. Head gradients are accumulated into `heads`;
/// every gradient is multiplied by `scale` (the upstream weight of this term).
pub fn cpc_loss_grad<F: Scalar>(
    z_future: ArrayView3<'_, F>,
    c: ArrayView2<'_, F>,
    heads: &mut PredictionHeads<F>,
    scale: F,
) -> Result<CpcGrad<F>> {
    check_cpc(&z_future, &c, heads)?;
    let t = z_future.len_of(Axis(0));
    let w = scale / F::lit(t as f64);
    let mut loss = F::zero();
    let mut dz_future = Array3::zeros(z_future.raw_dim());
    let mut dc = Array2::zeros(c.raw_dim());
    for (k, z_k) in z_future.outer_iter().enumerate() {
        let (scores, pred) = cpc_scores(z_k, c, heads, k + 1)?;
        let (l, mut ds) = info_nce_grad(&scores);
        loss += l;
        ds.mapv_inplace(|v| v * w);
        let dpred = ds.dot(&z_k);
        dz_future.index_axis_mut(Axis(0), k).assign(&ds.t().dot(&pred));
        dc += &heads.head_mut(k + 1)?.backward(c, dpred.view());
    }
    Ok(CpcGrad {
        loss: loss / F::lit(t as f64),
        dz_future,
        dc,
    })
}

fn check_pair<F: Scalar>(a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CapcError::invalid(format!(
            "branch outputs differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() < 2 {
        return Err(CapcError::invalid(
            "cross-correlation needs a batch of at least 2",
        ));
    }
    Ok(())
}

fn center<F: Scalar>(x: ArrayView2<'_, F>) -> Array2<F> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    &x - &mean
}

fn column_norms<F: Scalar>(x: &Array2<F>) -> Array1<F> {
    x.map_axis(Axis(0), |col| col.iter().map(|&v| v * v).sum::<F>().sqrt())
}

/// Batch-centered, normalized cross-correlation `[H, H]` between the two
/// branch outputs.
pub fn bt_cross_correlation<F: Scalar>(
    c_a: ArrayView2<'_, F>,
    c_b: ArrayView2<'_, F>,
    eps: f64,
) -> Result<Array2<F>> {
    check_pair(&c_a, &c_b)?;
    let a = center(c_a);
    let b = center(c_b);
    let na = column_norms(&a);
    let nb = column_norms(&b);
    let mut c = a.t().dot(&b);
    let eps = F::lit(eps);
    for ((i, j), v) in c.indexed_iter_mut() {
        *v /= na[i] * nb[j] + eps;
    }
    Ok(c)
}

/// `sum_i (C_ii - 1)^2 + lambda * sum_{i != j} C_ij^2`
pub fn bt_loss<F: Scalar>(c: ArrayView2<'_, F>, lambda: f64) -> F {
    let lambda = F::lit(lambda);
    let mut on = F::zero();
    let mut off = F::zero();
    for ((i, j), &v) in c.indexed_iter() {
        if i == j {
            on += (v - F::one()) * (v - F::one());
        } else {
            off += v * v;
        }
    }
    on + lambda * off
}

#[derive(Debug, Clone)]
pub struct BtGrad<F> {
    pub loss: F,
    pub d_a: Array2<F>,
    pub d_b: Array2<F>,
}

/// `bt_loss(bt_cross_correlation(a, b))` and its gradient w.r.t. both inputs.
pub fn barlow_twins_grad<F: Scalar>(
    c_a: ArrayView2<'_, F>,
    c_b: ArrayView2<'_, F>,
    config: &BtConfig,
) -> Result<BtGrad<F>> {
    check_pair(&c_a, &c_b)?;
    let a = center(c_a);
    let b = center(c_b);
    let na = column_norms(&a);
    let nb = column_norms(&b);
    let s = a.t().dot(&b);
    let h = s.nrows();
    let eps = F::lit(config.eps);
    let lambda = F::lit(config.lambda);
    let two = F::lit(2.0);

    let mut corr = s.clone();
    let mut ds = Array2::zeros((h, h));
    let mut dna = Array1::<F>::zeros(h);
    let mut dnb = Array1::<F>::zeros(h);
    for i in 0..h {
        for j in 0..h {
            let denom = na[i] * nb[j] + eps;
            let cij = s[[i, j]] / denom;
            corr[[i, j]] = cij;
            let g = if i == j {
                two * (cij - F::one())
            } else {
                two * lambda * cij
            };
            ds[[i, j]] = g / denom;
            let dden = -g * s[[i, j]] / (denom * denom);
            dna[i] += dden * nb[j];
            dnb[j] += dden * na[i];
        }
    }
    let loss = bt_loss(corr.view(), config.lambda);

    let safe_inv = |n: F| if n > F::zero() { F::one() / n } else { F::zero() };
    let mut d_a = b.dot(&ds.t());
    let mut d_b = a.dot(&ds);
    // norm terms: dL/da_bi += dna_i * a_bi / na_i
    for ((r, i), v) in d_a.indexed_iter_mut() {
        *v += dna[i] * a[[r, i]] * safe_inv(na[i]);
    }
    for ((r, j), v) in d_b.indexed_iter_mut() {
        *v += dnb[j] * b[[r, j]] * safe_inv(nb[j]);
    }
    // centering: subtract the batch mean of the gradient
    let d_a = center(d_a.view());
    let d_b = center(d_b.view());
    Ok(BtGrad { loss, d_a, d_b })
}

/// `bt + beta * (cpc_a + cpc_b)`
pub fn hybrid_loss<F: Scalar>(bt: F, cpc_a: F, cpc_b: F, beta: f64) -> F {
    bt + F::lit(beta) * (cpc_a + cpc_b)
}

/// Mean categorical cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy_grad<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> (F, Array2<F>) {
    let ls = log_softmax(logits);
    let n = F::lit(labels.len().max(1) as f64);
    let mut loss = F::zero();
    let mut g = ls.mapv(F::exp);
    for (i, &y) in labels.iter().enumerate() {
        loss -= ls[[i, y]];
        g[[i, y]] -= F::one();
    }
    g.mapv_inplace(|v| v / n);
    (loss / n, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layers::{Param, ParamKind};
    use crate::seed::Rng;
    use rand::SeedableRng;

    fn rand2(r: usize, c: usize, seed: u64) -> Array2<f64> {
        Param::<f64>::uniform(&[r, c], 1.0, ParamKind::Weight, &mut Rng::seed_from_u64(seed))
            .value
            .into_dimensionality()
            .unwrap()
    }

    #[test]
    fn uniform_scores_give_log_b() {
        for b in [2usize, 8, 128] {
            let s = Array2::<f64>::zeros((b, b));
            assert!((info_nce(&s) - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_context_cpc_is_log_b() {
        let heads = PredictionHeads::<f64>::new(3, 4, 5, &mut Rng::seed_from_u64(0));
        let z = Array3::from_shape_fn((3, 6, 5), |(a, b, c)| (a + 2 * b + 3 * c) as f64 * 0.1);
        let c = Array2::zeros((6, 4));
        let l = cpc_loss(z.view(), c.view(), &heads).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        let one = Array3::zeros((3, 1, 5));
        assert!(cpc_loss(one.view(), Array2::zeros((1, 4)).view(), &heads).is_err());
    }

    #[test]
    fn bt_identities() {
        let eye = Array2::<f64>::eye(5);
        assert!(bt_loss(eye.view(), 0.002).abs() < 1e-12);
        assert_eq!(bt_loss(Array2::<f64>::zeros((5, 5)).view(), 0.002), 5.0);
    }

    #[test]
    fn anti_correlated_diagonal() {
        let a = rand2(16, 4, 3);
        let c = bt_cross_correlation(a.view(), (-&a).view(), 1e-9).unwrap();
        for i in 0..4 {
            assert!((c[[i, i]] + 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hybrid_is_weighted_sum() {
        assert_eq!(hybrid_loss(1.5, 2.0, 3.0, 0.0), 1.5);
        let lb = 32f64.ln();
        assert!((hybrid_loss(0.0, lb, lb, 50.0) - 100.0 * lb).abs() < 1e-12);
    }

    #[test]
    fn bt_needs_two_samples() {
        let a = rand2(1, 3, 1);
        assert!(bt_cross_correlation(a.view(), a.view(), 1e-9).is_err());
        let b = rand2(2, 4, 1);
        assert!(bt_cross_correlation(rand2(2, 3, 1).view(), b.view(), 1e-9).is_err());
    }

    #[test]
    fn cross_entropy_uniform() {
        let (l, g) = cross_entropy_grad(&Array2::<f64>::zeros((4, 5)), &[0, 1, 2, 3]);
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(g.sum().abs() < 1e-12);
    }
}

mod common;

use capc::loss::{bt_cross_correlation, bt_loss, cpc_loss, info_nce, BtConfig};
use capc::model::{Module, PredictionHeads};
use common::{corr_oracle, cpc_oracle, normal2, normal3, rng};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn zero_heads(horizon: usize, h: usize, d: usize) -> PredictionHeads<f64> {
    let mut heads = PredictionHeads::new(horizon, h, d, &mut rng(1));
    heads.visit_mut("", &mut |_, p| p.value.fill(0.0));
    heads
}

#[test]
fn bt_loss_of_identity_and_zero() {
    for h in [1, 4, 32] {
        let eye = Array2::<f64>::eye(h);
        assert!(bt_loss(eye.view(), 0.002).abs() < 1e-12);
        let zero = Array2::<f64>::zeros((h, h));
        assert_eq!(bt_loss(zero.view(), 0.002), h as f64);
    }
}

#[test]
fn uniform_scores_give_log_batch() {
    for b in [2usize, 8, 128] {
        let heads = zero_heads(3, 5, 6);
        let z = normal3(&mut rng(b as u64), 3, b, 6);
        let c = normal2(&mut rng(b as u64 + 1), b, 5);
        let l = cpc_loss(z.view(), c.view(), &heads).unwrap();
        assert!((l - (b as f64).ln()).abs() < 1e-6, "B={b}: {l}");
    }
}

#[test]
fn cpc_matches_brute_force() {
    let mut r = rng(2);
    for trial in 0..100 {
        let heads = PredictionHeads::<f64>::new(2, 3, 5, &mut rng(100 + trial));
        let z = normal3(&mut r, 2, 4, 5);
        let c = normal2(&mut r, 4, 3);
        let got = cpc_loss(z.view(), c.view(), &heads).unwrap();
        let want = cpc_oracle(&z, &c, &heads);
        assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn cross_correlation_matches_brute_force() {
    let mut r = rng(3);
    for trial in 0..100 {
        let a = normal2(&mut r, 3, 2);
        let b = normal2(&mut r, 3, 2);
        let got = bt_cross_correlation(a.view(), b.view(), 1e-9).unwrap();
        let want = corr_oracle(&a, &b, 1e-9);
        let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10, "trial {trial}: {err}");
    }
}

#[test]
fn correlations_are_bounded() {
    let mut r = rng(4);
    for trial in 0..1000 {
        let b = 2 + trial % 15;
        let h = 1 + trial % 7;
        let shift = (trial % 5) as f64 * 3.0;
        let a = normal2(&mut r, b, h) + shift;
        let c = normal2(&mut r, b, h) * (1.0 + (trial % 3) as f64);
        let corr = bt_cross_correlation(a.view(), c.view(), BtConfig::default().eps).unwrap();
        assert!(corr.iter().all(|v| v.abs() <= 1.0 + 1e-6), "trial {trial}");
    }
}

/// `[B, H]` with zero-mean, orthonormal columns.
fn orthonormal_columns(b: usize, h: usize) -> Array2<f64> {
    let mut x = normal2(&mut rng(5), b, h);
    for j in 0..h {
        let mean = x.column(j).mean().unwrap();
        x.column_mut(j).mapv_inplace(|v| v - mean);
        for k in 0..j {
            let proj = x.column(j).dot(&x.column(k));
            let ck = x.column(k).to_owned();
            x.column_mut(j).scaled_add(-proj, &ck);
        }
        let n = x.column(j).dot(&x.column(j)).sqrt();
        x.column_mut(j).mapv_inplace(|v| v / n);
    }
    x
}

#[test]
fn identical_orthonormal_views_give_identity() {
    let x = orthonormal_columns(16, 6);
    let c = bt_cross_correlation(x.view(), x.view(), 1e-9).unwrap();
    let err = (&c - &Array2::<f64>::eye(6)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn degenerate_inputs_are_rejected() {
    let heads = zero_heads(2, 3, 4);
    let z = Array3::<f64>::zeros((2, 1, 4));
    let c = Array2::<f64>::zeros((1, 3));
    assert!(cpc_loss(z.view(), c.view(), &heads).is_err());
    let z = Array3::<f64>::zeros((3, 4, 4));
    let c = Array2::<f64>::zeros((4, 3));
    assert!(cpc_loss(z.view(), c.view(), &heads).is_err());
    let a = Array2::<f64>::zeros((4, 3));
    let b = Array2::<f64>::zeros((5, 3));
    assert!(bt_cross_correlation(a.view(), b.view(), 1e-9).is_err());
}

#[test]
fn constant_columns_do_not_divide_by_zero() {
    let a = Array2::<f64>::ones((4, 3));
    let c = bt_cross_correlation(a.view(), a.view(), 1e-9).unwrap();
    assert!(c.iter().all(|v| *v == 0.0));
    assert_eq!(bt_loss(c.view(), 0.002), 3.0);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #[test]
    fn bt_loss_is_non_negative(c in matrix(5, 5), lambda in 0.0f64..1.0) {
        prop_assert!(bt_loss(c.view(), lambda) >= 0.0);
    }

    #[test]
    fn info_nce_ignores_row_offsets(s in matrix(4, 4), shift in prop::collection::vec(-50.0f64..50.0, 4)) {
        let mut shifted = s.clone();
        for (mut row, d) in shifted.outer_iter_mut().zip(&shift) {
            row += *d;
        }
        prop_assert!((info_nce(&s) - info_nce(&shifted)).abs() < 1e-9);
        prop_assert!(info_nce(&s) >= 0.0);
    }

    #[test]
    fn self_correlation_is_symmetric(a in matrix(6, 4)) {
        let c = bt_cross_correlation(a.view(), a.view(), 1e-9).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((c[[i, j]] - c[[j, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correlation_is_scale_and_shift_invariant(a in matrix(6, 3), b in matrix(6, 3), k in 0.5f64..4.0, off in -3.0f64..3.0) {
        let c1 = bt_cross_correlation(a.view(), b.view(), 1e-12).unwrap();
        let a2 = a.mapv(|v| v * k + off);
        let c2 = bt_cross_correlation(a2.view(), b.view(), 1e-12).unwrap();
        let norms_ok = a.columns().into_iter().chain(b.columns()).all(|col| {
            let m = col.mean().unwrap();
            col.iter().map(|v| (v - m).powi(2)).sum::<f64>() > 1e-3
        });
        prop_assume!(norms_ok);
        for (x, y) in c1.iter().zip(c2.iter()) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }
}

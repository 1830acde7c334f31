mod common;

use common::*;
use mahaguard::linalg::{frobenius_norm, Cholesky};
use mahaguard::stats::{
    centered_covariance, finalize_stats, fit_batch_mle, fit_gaussian_stats, ledoit_wolf_shrink,
};
use mahaguard::{EmbeddingSet, OnlineStatsState, ShrinkageMode};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

/// Shrinkage intensity from the textbook definition, forming every outer
/// product explicitly.
fn ledoit_wolf_lambda_oracle(x: &Array2<f64>) -> f64 {
    let (n, d) = x.dim();
    let mut s = Array2::<f64>::zeros((d, d));
    for row in x.rows() {
        for i in 0..d {
            for j in 0..d {
                s[[i, j]] += row[i] * row[j] / n as f64;
            }
        }
    }
    let m = (0..d).map(|i| s[[i, i]]).sum::<f64>() / d as f64;
    let mut delta2 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let t = if i == j { m } else { 0.0 };
            delta2 += (s[[i, j]] - t).powi(2);
        }
    }
    let mut b2 = 0.0;
    for row in x.rows() {
        for i in 0..d {
            for j in 0..d {
                b2 += (row[i] * row[j] - s[[i, j]]).powi(2);
            }
        }
    }
    b2 /= (n * n) as f64;
    if delta2 == 0.0 {
        0.0
    } else {
        b2.min(delta2) / delta2
    }
}

fn sample_gaussian(r: &mut rand_chacha::ChaCha8Rng, chol: &Cholesky, n: usize) -> Array2<f64> {
    let g = normal_matrix(r, n, chol.dim());
    g.dot(&chol.lower().t())
}

fn ar1_covariance(d: usize, rho: f64) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |(i, j)| rho.powi((i as i32 - j as i32).abs()))
}

/// Mean Frobenius error of the MLE and of the shrunk estimate over `trials`
/// samples of size `n` from `N(0, truth)`; also the range of λ seen.
fn shrinkage_trials(truth: &Array2<f64>, n: usize, trials: usize, seed: u64) -> (f64, f64, f64, f64) {
    let chol = Cholesky::factor(truth.view()).unwrap();
    let mut r = rng(seed);
    let (mut e_mle, mut e_lw) = (0.0, 0.0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..trials {
        let x = sample_gaussian(&mut r, &chol, n);
        let fit = fit_batch_mle(x.view(), &vec![0; n], 1).unwrap();
        let (shrunk, lambda) =
            ledoit_wolf_shrink(fit.covariance.view(), fit.centered.view(), ShrinkageMode::LedoitWolfAuto).unwrap();
        e_mle += frobenius_norm((&fit.covariance - truth).view());
        e_lw += frobenius_norm((&shrunk - truth).view());
        lo = lo.min(lambda);
        hi = hi.max(lambda);
    }
    (e_mle / trials as f64, e_lw / trials as f64, lo, hi)
}

#[test]
fn shrinkage_beats_mle_when_n_is_small() {
    let (mle, lw, lo, hi) = shrinkage_trials(&ar1_covariance(50, 0.5), 30, 100, 1);
    assert!(lw < mle, "LW {lw} vs MLE {mle}");
    assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
}

// In two dimensions the sampling noise of the target scale m is not
// negligible and the analytic intensity overshoots: LW lands about 1% above
// the MLE error here, with λ agreeing with the oracle below.
#[test]
#[ignore = "does not hold for the analytic Ledoit-Wolf intensity at d = 2"]
fn shrinkage_no_worse_on_diag_1_4() {
    let truth = Array2::from_diag(&Array1::from(vec![1.0, 4.0]));
    let (mle, lw, lo, hi) = shrinkage_trials(&truth, 500, 100, 2);
    assert!(lw <= mle, "LW {lw} vs MLE {mle}");
    assert!(lo >= 0.0 && hi <= 1.0);
}

#[test]
fn lambda_matches_oracle_on_diag_1_4_draws() {
    let chol = Cholesky::factor(Array2::from_diag(&Array1::from(vec![1.0, 4.0])).view()).unwrap();
    let mut r = rng(3);
    for _ in 0..100 {
        let x = sample_gaussian(&mut r, &chol, 500);
        let fit = fit_batch_mle(x.view(), &vec![0; 500], 1).unwrap();
        let (_, lambda) =
            ledoit_wolf_shrink(fit.covariance.view(), fit.centered.view(), ShrinkageMode::LedoitWolfAuto).unwrap();
        let oracle = ledoit_wolf_lambda_oracle(&fit.centered);
        assert!((lambda - oracle).abs() < 1e-10, "{lambda} vs {oracle}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lambda_matches_oracle(seed in any::<u64>(), n in 2usize..40, d in 1usize..10) {
        let mut r = rng(seed);
        let x = normal_matrix(&mut r, n, d) * normal_vec(&mut r, d).mapv(f64::exp);
        let fit = fit_batch_mle(x.view(), &vec![0; n], 1).unwrap();
        let (_, lambda) =
            ledoit_wolf_shrink(fit.covariance.view(), fit.centered.view(), ShrinkageMode::LedoitWolfAuto).unwrap();
        let oracle = ledoit_wolf_lambda_oracle(&fit.centered);
        prop_assert!((0.0..=1.0).contains(&lambda));
        prop_assert!((lambda - oracle).abs() < 1e-9, "{} vs {}", lambda, oracle);
    }

    #[test]
    fn fixed_lambda_endpoints(seed in any::<u64>(), d in 1usize..8) {
        let mut r = rng(seed);
        let x = normal_matrix(&mut r, 20, d);
        let s = centered_covariance(x.view());
        let (same, _) = ledoit_wolf_shrink(s.view(), x.view(), ShrinkageMode::Fixed(0.0)).unwrap();
        prop_assert_eq!(&same, &s);
        let (target, _) = ledoit_wolf_shrink(s.view(), x.view(), ShrinkageMode::Fixed(1.0)).unwrap();
        let m = (0..d).map(|i| s[[i, i]]).sum::<f64>() / d as f64;
        prop_assert_eq!(target, Array2::<f64>::eye(d) * m);
    }

    #[test]
    fn tied_covariance_matches_direct_loop(seed in any::<u64>(), n in 4usize..60, d in 1usize..6, k in 1usize..4) {
        prop_assume!(n >= k);
        let mut r = rng(seed);
        let x = normal_matrix(&mut r, n, d) * 3.0;
        let mut labels = random_labels(&mut r, n, k);
        for c in 0..k {
            labels[c] = c;
        }
        let fit = fit_batch_mle(x.view(), &labels, k).unwrap();

        let mut means = vec![vec![0.0; d]; k];
        let mut counts = vec![0.0; k];
        for i in 0..n {
            counts[labels[i]] += 1.0;
            for j in 0..d {
                means[labels[i]][j] += x[[i, j]];
            }
        }
        for c in 0..k {
            for j in 0..d {
                means[c][j] /= counts[c];
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    cov[a][b] += (x[[i, a]] - means[labels[i]][a]) * (x[[i, b]] - means[labels[i]][b]) / n as f64;
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                prop_assert!((fit.covariance[[a, b]] - cov[a][b]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ema_update_is_deterministic(seed in any::<u64>(), updates in 1usize..6) {
        let mut r = rng(seed);
        let mut a = OnlineStatsState::new(3, 4, 0.9, ShrinkageMode::LedoitWolfAuto).unwrap();
        let mut b = a.clone();
        for _ in 0..updates {
            let labels = random_labels(&mut r, 16, 3);
            let batch = EmbeddingSet::new(normal_matrix(&mut r, 16, 4), Some(labels)).unwrap();
            let ia = a.update(&batch).unwrap();
            let ib = b.update(&batch).unwrap();
            prop_assert_eq!(ia, ib);
        }
        prop_assert_eq!(&a, &b);
    }

    #[test]
    fn single_batch_zero_momentum_equals_offline(seed in any::<u64>(), n in 8usize..80, d in 1usize..7, k in 1usize..4) {
        let mut r = rng(seed);
        let mut labels = random_labels(&mut r, n, k);
        for c in 0..k {
            labels[c] = c;
        }
        let set = EmbeddingSet::new(normal_matrix(&mut r, n, d) * 2.0, Some(labels)).unwrap();
        let mode = ShrinkageMode::LedoitWolfAuto;
        let mut state = OnlineStatsState::new(k, d, 0.0, mode).unwrap();
        state.update(&set).unwrap();
        let online = finalize_stats(&state, None).unwrap();
        let (offline, _) = fit_gaussian_stats(&set, k, mode).unwrap();
        let close = |a: ndarray::ArrayView2<f64>, b: ndarray::ArrayView2<f64>| {
            a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-10)
        };
        prop_assert!(close(online.class_means(), offline.class_means()));
        prop_assert!(close(online.tied_covariance(), offline.tied_covariance()));
        prop_assert!(close(online.background_covariance(), offline.background_covariance()));
        prop_assert!(online
            .background_mean()
            .iter()
            .zip(offline.background_mean().iter())
            .all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn finalized_cholesky_reconstructs(seed in any::<u64>(), d in 1usize..12) {
        let mut r = rng(seed);
        let mut state = OnlineStatsState::new(2, d, 0.9, ShrinkageMode::LedoitWolfAuto).unwrap();
        for _ in 0..5 {
            let labels = random_labels(&mut r, 24, 2);
            let x = normal_matrix(&mut r, 24, d) * normal_vec(&mut r, d).mapv(f64::exp);
            state.update(&EmbeddingSet::new(x, Some(labels)).unwrap()).unwrap();
        }
        prop_assume!(state.all_classes_seen());
        let stats = finalize_stats(&state, None).unwrap();
        for (cov, chol) in [
            (stats.tied_covariance(), stats.tied_cholesky()),
            (stats.background_covariance(), stats.background_cholesky()),
        ] {
            let err = frobenius_norm((&chol.reconstruct() - &cov).view()) / frobenius_norm(cov);
            prop_assert!(err < 1e-8, "{}", err);
        }
    }
}

#[test]
fn ema_means_converge_on_stationary_stream() {
    let true_means = ndarray::array![[2.0, -1.0], [-3.0, 0.5]];
    let mut r = rng(9);
    let mut state = OnlineStatsState::new(2, 2, 0.95, ShrinkageMode::LedoitWolfAuto).unwrap();
    for _ in 0..500 {
        let labels: Vec<usize> = (0..512).map(|i| i % 2).collect();
        let mut x = normal_matrix(&mut r, 512, 2);
        for (mut row, &y) in x.rows_mut().into_iter().zip(&labels) {
            row += &true_means.row(y);
        }
        state.update(&EmbeddingSet::new(x, Some(labels)).unwrap()).unwrap();
    }
    for k in 0..2 {
        let diff = &state.ema_means().row(k) - &true_means.row(k);
        let dist = diff.dot(&diff).sqrt();
        assert!(dist < 0.05, "class {k}: {dist}");
    }
}

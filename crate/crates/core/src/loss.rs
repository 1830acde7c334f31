//! Cross-entropy over Mahalanobis logits, blended with the ordinary
//! cross-entropy of the classifier head.
//!
//! Class posteriors come from Bayes' rule with uniform priors over the
//! class-conditional Gaussians, i.e. a softmax over `ℓ_k = −s·MD_k(z)`. The
//! Gaussian's `½` is folded into the scale `s`. Note the minus sign: the
//! nearest class gets the largest logit, and moving away from a mean can only
//! lower its posterior. Statistics are treated as
//! constants: no gradient flows into `μ_k` or `Σ`.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{check_dim, Error, Result};
use crate::scorers::{class_distances, softmax_rows};
use crate::stats::GaussianStats;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the Mahalanobis branch, in `[0, 1]`.
    pub alpha: f64,
    /// Positive multiplier on `−MD_k` before the softmax.
    pub logit_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            logit_scale: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParams(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return Err(Error::InvalidParams(format!(
                "logit_scale must be positive, got {}",
                self.logit_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub base_ce: f64,
    pub maha_ce: f64,
    /// Gradient of `total` w.r.t. the head logits.
    pub grad_logits: Array2<f64>,
    /// Gradient of `total` w.r.t. the penultimate features, Mahalanobis
    /// branch only.
    pub grad_features: Array2<f64>,
}

fn check_labels(labels: &[usize], n: usize, num_classes: usize) -> Result<()> {
    check_dim("label count vs rows", n, labels.len())?;
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            row,
            label: label as i64,
            num_classes,
        });
    }
    Ok(())
}

/// Softmax over `−scale · MD_k`, one row per feature vector.
pub fn maha_posteriors(
    features: ArrayView2<'_, f64>,
    stats: &GaussianStats,
    scale: f64,
) -> Result<Array2<f64>> {
    let dist = class_distances(features, stats)?;
    Ok(softmax_rows(dist.mapv(|m| -scale * m).view()))
}

/// Mean of `−ln p` at the label, from a matrix of logits.
fn mean_ce(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let lse = crate::scorers::logsumexp(row);
        loss += lse - row[labels[i]];
    }
    (loss / n, probs)
}

/// Cross-entropy of the Mahalanobis posteriors and its gradient w.r.t. the
/// features.
///
/// `∂L/∂z_i = (2s/n) Σ_k (p_ik − 1[k = y_i]) Σ⁻¹(μ_k − z_i)`.
pub fn maha_ce_loss(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    stats: &GaussianStats,
    scale: f64,
) -> Result<(f64, Array2<f64>)> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    check_dim("feature dimension vs stats", stats.dim(), features.ncols())?;
    check_labels(labels, n, stats.num_classes())?;
    let logits = class_distances(features, stats)?.mapv(|m| -scale * m);
    let (loss, probs) = mean_ce(logits.view(), labels);

    let k_total = stats.num_classes();
    let chol = stats.tied_cholesky();
    let coef = 2.0 * scale / n as f64;
    let mut grad = Array2::zeros(features.raw_dim());
    for (i, z) in features.rows().into_iter().enumerate() {
        // Σ_k w_k (μ_k − z) with Σ_k w_k = 0, so the z terms cancel.
        let mut combo = Array1::<f64>::zeros(features.ncols());
        for k in 0..k_total {
            let w = probs[[i, k]] - if k == labels[i] { 1.0 } else { 0.0 };
            combo.scaled_add(w, &(&stats.class_mean(k) - &z));
        }
        let g = chol.solve(combo.view());
        grad.row_mut(i).assign(&(g * coef));
    }
    Ok((loss, grad))
}

/// Mean softmax cross-entropy over the head logits, with `(p − onehot)/n`.
pub fn softmax_ce_loss(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    check_labels(labels, n, logits.ncols())?;
    let (loss, mut grad) = mean_ce(logits, labels);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n as f64);
    Ok((loss, grad))
}

/// `(1 − α)·CE(head) + α·CE(Mahalanobis)`.
pub fn combined_loss(
    features: ArrayView2<'_, f64>,
    base_logits: ArrayView2<'_, f64>,
    labels: &[usize],
    stats: &GaussianStats,
    config: LossConfig,
) -> Result<LossOutput> {
    config.validate()?;
    check_dim("logit rows vs feature rows", features.nrows(), base_logits.nrows())?;
    check_dim("logit columns vs classes", stats.num_classes(), base_logits.ncols())?;
    let (base_ce, grad_base) = softmax_ce_loss(base_logits, labels)?;
    let (maha_ce, grad_maha) = maha_ce_loss(features, labels, stats, config.logit_scale)?;
    let alpha = config.alpha;
    Ok(LossOutput {
        total: (1.0 - alpha) * base_ce + alpha * maha_ce,
        base_ce,
        maha_ce,
        grad_logits: grad_base * (1.0 - alpha),
        grad_features: grad_maha * alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn stats_1d() -> GaussianStats {
        GaussianStats::from_parts(array![[-1.0], [1.0]], array![[1.0]], array![0.0], array![[2.0]])
            .unwrap()
    }

    #[test]
    fn equidistant_is_uniform() {
        let stats = GaussianStats::from_parts(
            array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]],
            Array2::eye(2),
            Array1::zeros(2),
            Array2::eye(2),
        )
        .unwrap();
        let p = maha_posteriors(array![[0.0, 0.0]].view(), &stats, 1.0).unwrap();
        for k in 0..4 {
            assert!((p[[0, k]] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_class() {
        let stats = GaussianStats::from_parts(
            array![[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]],
            Array2::eye(2),
            Array1::zeros(2),
            Array2::eye(2),
        )
        .unwrap();
        let p = maha_posteriors(array![[0.0, 0.0]].view(), &stats, 1.0).unwrap();
        assert!(p[[0, 0]] > 0.999);
    }

    #[test]
    fn one_dim_posterior() {
        // MD_0 = 2.25, MD_1 = 0.25 ⇒ p_1 = σ(s·(2.25 − 0.25)) = σ(2s)
        for scale in [0.5, 1.0, 3.0] {
            let p = maha_posteriors(array![[0.5]].view(), &stats_1d(), scale).unwrap();
            let e0 = (-scale * 2.25f64).exp();
            let e1 = (-scale * 0.25f64).exp();
            let direct = e1 / (e0 + e1);
            let sigmoid = 1.0 / (1.0 + (-2.0 * scale).exp());
            assert!((p[[0, 1]] - direct).abs() < 1e-15);
            assert!((p[[0, 1]] - sigmoid).abs() < 1e-15);
        }
    }

    #[test]
    fn midpoint_loss_is_ln2() {
        let stats = stats_1d();
        let (loss, grad) = maha_ce_loss(array![[0.0]].view(), &[1], &stats, 1.0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        // descent direction −grad points toward μ_1 − μ_0 = +2
        assert!(-grad[[0, 0]] > 0.0);
        // (2/1)·[0.5·(−1 − 0) − 0.5·(1 − 0)] = −2
        assert!((grad[[0, 0]] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn confident_sample_has_no_loss() {
        let stats = GaussianStats::from_parts(
            array![[0.0], [30.0]],
            array![[1.0]],
            array![0.0],
            array![[1.0]],
        )
        .unwrap();
        let (loss, grad) = maha_ce_loss(array![[0.0]].view(), &[0], &stats, 1.0).unwrap();
        assert!(loss < 1e-100);
        assert!(grad[[0, 0]].abs() < 1e-100);
    }

    #[test]
    fn label_errors() {
        let stats = stats_1d();
        assert!(matches!(
            maha_ce_loss(array![[0.0]].view(), &[2], &stats, 1.0),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            maha_ce_loss(array![[0.0], [1.0]].view(), &[0], &stats, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn alpha_boundaries() {
        let stats = stats_1d();
        let feats = array![[0.3], [-0.7], [1.4]];
        let logits = array![[0.2, -0.1], [1.0, 0.5], [-0.3, 0.9]];
        let labels = [1, 0, 1];
        let at = |alpha| {
            combined_loss(
                feats.view(),
                logits.view(),
                &labels,
                &stats,
                LossConfig {
                    alpha,
                    logit_scale: 1.0,
                },
            )
            .unwrap()
        };
        let zero = at(0.0);
        assert_eq!(zero.total, zero.base_ce);
        assert!(zero.grad_features.iter().all(|&g| g == 0.0));
        let one = at(1.0);
        assert_eq!(one.total, one.maha_ce);
        assert!(one.grad_logits.iter().all(|&g| g == 0.0));
        let half = at(0.5);
        assert!((half.total - 0.5 * (half.base_ce + half.maha_ce)).abs() < 1e-15);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(LossConfig { alpha: 1.2, logit_scale: 1.0 }.validate().is_err());
        assert!(LossConfig { alpha: 0.5, logit_scale: 0.0 }.validate().is_err());
    }
}

//! Class-conditional Gaussian estimation with a tied covariance.
//!
//! Three estimators feed the scorers and the training loss:
//!
//! * [`fit_batch_mle`]: per-class means and the pooled, class-centered
//!   covariance with `1/n` normalization.
//! * [`ledoit_wolf_shrink`]: convex blend of a sample covariance with the
//!   scaled identity `m·I`, `m = trace(S)/d`.
//! * [`OnlineStatsState`]: exponential moving averages of the means and of
//!   the *shrunk* per-batch covariance, updated once per training batch.
//!
//! [`GaussianStats`] is the immutable, factorized result consumed at test
//! time. It also carries a class-agnostic background Gaussian used by the
//! relative Mahalanobis score.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::embedding::{write_atomic, EmbeddingSet};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{factor_with_jitter, symmetrize, trace, Cholesky};

pub const STATS_MAGIC: [u8; 4] = *b"MGS1";

/// How the shrinkage intensity is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShrinkageMode {
    /// Analytic Ledoit-Wolf intensity, clamped to `[0, 1]`.
    LedoitWolfAuto,
    /// A fixed intensity in `[0, 1]`.
    Fixed(f64),
}

impl Default for ShrinkageMode {
    fn default() -> Self {
        ShrinkageMode::LedoitWolfAuto
    }
}

impl ShrinkageMode {
    pub fn validate(self) -> Result<Self> {
        match self {
            ShrinkageMode::Fixed(l) if !(0.0..=1.0).contains(&l) => Err(Error::InvalidParams(
                format!("fixed shrinkage must lie in [0, 1], got {l}"),
            )),
            m => Ok(m),
        }
    }
}

impl FromStr for ShrinkageMode {
    type Err = Error;

    /// Accepts `auto` or `fixed:<lambda>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(ShrinkageMode::LedoitWolfAuto);
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let l: f64 = v
                .parse()
                .map_err(|_| Error::InvalidParams(format!("bad shrinkage value {v:?}")))?;
            return ShrinkageMode::Fixed(l).validate();
        }
        Err(Error::InvalidParams(format!(
            "shrinkage must be 'auto' or 'fixed:<lambda>', got {s:?}"
        )))
    }
}

impl fmt::Display for ShrinkageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShrinkageMode::LedoitWolfAuto => write!(f, "auto"),
            ShrinkageMode::Fixed(l) => write!(f, "fixed:{l}"),
        }
    }
}

/// Output of [`fit_batch_mle`].
#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    /// `K × d`, row `k` is the mean of class `k`.
    pub class_means: Array2<f64>,
    /// Pooled covariance of the class-centered rows, `1/n` normalized.
    pub covariance: Array2<f64>,
    /// `z_i − μ_{y_i}` for every row.
    pub centered: Array2<f64>,
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            row,
            label: label as i64,
            num_classes,
        });
    }
    Ok(())
}

/// Per-class sums and counts. Absent classes keep a zero sum and count.
fn class_sums(
    data: ArrayView2<'_, f64>,
    labels: &[usize],
    num_classes: usize,
) -> (Array2<f64>, Vec<usize>) {
    let mut sums = Array2::<f64>::zeros((num_classes, data.ncols()));
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in data.rows().into_iter().zip(labels) {
        let mut acc = sums.row_mut(y);
        acc += &row;
        counts[y] += 1;
    }
    (sums, counts)
}

/// `(1/n) Xᵀ X` for already-centered rows.
pub fn centered_covariance(centered: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = centered.nrows() as f64;
    let mut cov = centered.t().dot(&centered) / n;
    symmetrize(&mut cov);
    cov
}

/// Maximum-likelihood class means and tied covariance.
pub fn fit_batch_mle(
    data: ArrayView2<'_, f64>,
    labels: &[usize],
    num_classes: usize,
) -> Result<MleFit> {
    check_dim("label count vs rows", data.nrows(), labels.len())?;
    if data.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    check_labels(labels, num_classes)?;
    let (mut means, counts) = class_sums(data, labels, num_classes);
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::EmptyClass(k));
        }
        means.row_mut(k).mapv_inplace(|v| v / c as f64);
    }
    let centered = center_rows(data, labels, means.view());
    let covariance = centered_covariance(centered.view());
    Ok(MleFit {
        class_means: means,
        covariance,
        centered,
    })
}

fn center_rows(
    data: ArrayView2<'_, f64>,
    labels: &[usize],
    means: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let mut centered = data.to_owned();
    for (mut row, &y) in centered.rows_mut().into_iter().zip(labels) {
        row -= &means.row(y);
    }
    centered
}

/// Shrinks `sample_covariance` toward `m·I`, `m = trace(S)/d`.
///
/// In auto mode the intensity is the Ledoit-Wolf estimate
/// `λ = min(b², δ²) / δ²` with `δ² = ‖S − m·I‖²_F` and
/// `b² = (1/n²) Σ_i ‖x_i x_iᵀ − S‖²_F`, where `x_i` are the centered rows.
/// When `δ² = 0` the matrix already equals its target and `λ = 0`.
pub fn ledoit_wolf_shrink(
    sample_covariance: ArrayView2<'_, f64>,
    centered_data: ArrayView2<'_, f64>,
    mode: ShrinkageMode,
) -> Result<(Array2<f64>, f64)> {
    let d = sample_covariance.nrows();
    check_dim("covariance must be square", d, sample_covariance.ncols())?;
    check_dim("centered data width vs covariance", d, centered_data.ncols())?;
    let n = centered_data.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mode = mode.validate()?;
    let target_scale = trace(sample_covariance) / d as f64;

    let lambda = match mode {
        ShrinkageMode::Fixed(l) => l,
        ShrinkageMode::LedoitWolfAuto => {
            let mut delta_sq = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let t = if i == j { target_scale } else { 0.0 };
                    let diff = sample_covariance[[i, j]] - t;
                    delta_sq += diff * diff;
                }
            }
            // Σ_i ‖x xᵀ − S‖² = Σ_i ‖x‖⁴ − 2 Σ_i xᵀ S x + n ‖S‖²
            let s_norm_sq: f64 = sample_covariance.iter().map(|v| v * v).sum();
            let mut fourth = 0.0;
            let mut cross = 0.0;
            for x in centered_data.rows() {
                let sq = x.dot(&x);
                fourth += sq * sq;
                cross += x.dot(&sample_covariance.dot(&x));
            }
            let b_sq_sum = (fourth - 2.0 * cross + n as f64 * s_norm_sq).max(0.0);
            let b_sq = b_sq_sum / (n as f64 * n as f64);
            if delta_sq > 0.0 {
                (b_sq.min(delta_sq) / delta_sq).clamp(0.0, 1.0)
            } else {
                0.0
            }
        }
    };

    let mut shrunk = sample_covariance.mapv(|v| (1.0 - lambda) * v);
    for i in 0..d {
        shrunk[[i, i]] += lambda * target_scale;
    }
    symmetrize(&mut shrunk);
    Ok((shrunk, lambda))
}

/// Factorized class-conditional Gaussians plus a background Gaussian.
///
/// Immutable after construction; share freely across scoring threads.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    class_means: Array2<f64>,
    tied_covariance: Array2<f64>,
    tied_chol: Cholesky,
    background_mean: Array1<f64>,
    background_covariance: Array2<f64>,
    background_chol: Cholesky,
}

fn checked_symmetric(mut a: Array2<f64>, what: &'static str) -> Result<Array2<f64>> {
    let d = a.nrows();
    check_dim(what, d, a.ncols())?;
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..d {
        for j in (i + 1)..d {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-9 * scale {
                return Err(Error::InvalidParams(format!(
                    "{what}: not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    symmetrize(&mut a);
    Ok(a)
}

impl GaussianStats {
    /// Builds stats from raw parameters, requiring both covariances to be SPD.
    pub fn from_parts(
        class_means: Array2<f64>,
        tied_covariance: Array2<f64>,
        background_mean: Array1<f64>,
        background_covariance: Array2<f64>,
    ) -> Result<Self> {
        let d = class_means.ncols();
        if class_means.nrows() == 0 || d == 0 {
            return Err(Error::InvalidParams("stats need K >= 1 and d >= 1".into()));
        }
        check_dim("tied covariance size", d, tied_covariance.nrows())?;
        check_dim("background mean size", d, background_mean.len())?;
        check_dim("background covariance size", d, background_covariance.nrows())?;
        let tied_covariance = checked_symmetric(tied_covariance, "tied covariance")?;
        let background_covariance =
            checked_symmetric(background_covariance, "background covariance")?;
        let tied_chol = Cholesky::factor(tied_covariance.view())?;
        let background_chol = Cholesky::factor(background_covariance.view())?;
        Ok(Self {
            class_means,
            tied_covariance,
            tied_chol,
            background_mean,
            background_covariance,
            background_chol,
        })
    }

    /// Like [`from_parts`](Self::from_parts) but repairs near-singular
    /// covariances with diagonal jitter.
    pub fn from_parts_with_jitter(
        class_means: Array2<f64>,
        tied_covariance: Array2<f64>,
        background_mean: Array1<f64>,
        background_covariance: Array2<f64>,
    ) -> Result<Self> {
        let tied = checked_symmetric(tied_covariance, "tied covariance")?;
        let background = checked_symmetric(background_covariance, "background covariance")?;
        let (_, tied) = factor_with_jitter(&tied)?;
        let (_, background) = factor_with_jitter(&background)?;
        Self::from_parts(class_means, tied, background_mean, background)
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.class_means.ncols()
    }

    pub fn class_means(&self) -> ArrayView2<'_, f64> {
        self.class_means.view()
    }

    pub fn class_mean(&self, k: usize) -> ArrayView1<'_, f64> {
        self.class_means.row(k)
    }

    pub fn tied_covariance(&self) -> ArrayView2<'_, f64> {
        self.tied_covariance.view()
    }

    pub fn tied_cholesky(&self) -> &Cholesky {
        &self.tied_chol
    }

    pub fn background_mean(&self) -> ArrayView1<'_, f64> {
        self.background_mean.view()
    }

    pub fn background_covariance(&self) -> ArrayView2<'_, f64> {
        self.background_covariance.view()
    }

    pub fn background_cholesky(&self) -> &Cholesky {
        &self.background_chol
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.num_classes();
        let d = self.dim();
        let mut out = Vec::with_capacity(12 + 8 * (k * d + 2 * d * d + d));
        out.extend_from_slice(&STATS_MAGIC);
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        let blocks = self
            .class_means
            .iter()
            .chain(self.tied_covariance.iter())
            .chain(self.background_mean.iter())
            .chain(self.background_covariance.iter());
        for v in blocks {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses an "MGS1" buffer; Cholesky factors are recomputed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::TruncatedFile {
                expected: 12,
                actual: bytes.len(),
            });
        }
        if bytes[..4] != STATS_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(Error::BadMagic {
                expected: STATS_MAGIC,
                found,
            });
        }
        let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = 12 + 8 * (k * d + 2 * d * d + d);
        if bytes.len() != expected {
            return Err(Error::TruncatedFile {
                expected,
                actual: bytes.len(),
            });
        }
        let values: Vec<f64> = bytes[12..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(idx));
        }
        let mut rest = values.as_slice();
        let mut take = |len: usize| {
            let (head, tail) = rest.split_at(len);
            rest = tail;
            head.to_vec()
        };
        let shape_err = |e: ndarray::ShapeError| Error::InvalidParams(e.to_string());
        let means = Array2::from_shape_vec((k, d), take(k * d)).map_err(shape_err)?;
        let tied = Array2::from_shape_vec((d, d), take(d * d)).map_err(shape_err)?;
        let bg_mean = Array1::from_vec(take(d));
        let bg_cov = Array2::from_shape_vec((d, d), take(d * d)).map_err(shape_err)?;
        Self::from_parts(means, tied, bg_mean, bg_cov)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Shrinkage intensities used while building a [`GaussianStats`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageReport {
    pub tied_lambda: f64,
    pub background_lambda: f64,
}

/// Background (label-free) mean and `1/n` covariance.
fn background_moments(data: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
    let mean = data.mean_axis(Axis(0)).expect("non-empty data");
    let centered = &data - &mean;
    (mean, centered_covariance(centered.view()))
}

/// The offline path: fits everything directly on a labeled dataset.
pub fn fit_gaussian_stats(
    set: &EmbeddingSet,
    num_classes: usize,
    mode: ShrinkageMode,
) -> Result<(GaussianStats, ShrinkageReport)> {
    let labels = set.require_labels()?;
    let fit = fit_batch_mle(set.data(), labels, num_classes)?;
    let (tied, tied_lambda) = ledoit_wolf_shrink(fit.covariance.view(), fit.centered.view(), mode)?;
    let (bg_mean, bg_cov) = background_moments(set.data());
    let bg_centered = &set.data() - &bg_mean;
    let (bg_cov, background_lambda) = ledoit_wolf_shrink(bg_cov.view(), bg_centered.view(), mode)?;
    let stats = GaussianStats::from_parts_with_jitter(fit.class_means, tied, bg_mean, bg_cov)?;
    Ok((
        stats,
        ShrinkageReport {
            tied_lambda,
            background_lambda,
        },
    ))
}

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.95;

/// Running EMA estimates of the class means, the shrunk tied covariance and
/// the background Gaussian.
///
/// Single writer: updates are order dependent.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineStatsState {
    ema_means: Array2<f64>,
    ema_covariance: Array2<f64>,
    background_mean: Array1<f64>,
    background_covariance: Array2<f64>,
    momentum: f64,
    updates_seen: u64,
    per_class_seen: Vec<u64>,
    shrinkage: ShrinkageMode,
}

/// Per-update diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateInfo {
    pub tied_lambda: f64,
    pub background_lambda: f64,
}

impl OnlineStatsState {
    pub fn new(
        num_classes: usize,
        dim: usize,
        momentum: f64,
        shrinkage: ShrinkageMode,
    ) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::InvalidParams("need K >= 1 and d >= 1".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidParams(format!(
                "EMA momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            ema_means: Array2::zeros((num_classes, dim)),
            ema_covariance: Array2::zeros((dim, dim)),
            background_mean: Array1::zeros(dim),
            background_covariance: Array2::zeros((dim, dim)),
            momentum,
            updates_seen: 0,
            per_class_seen: vec![0; num_classes],
            shrinkage: shrinkage.validate()?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.ema_means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.ema_means.ncols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn shrinkage(&self) -> ShrinkageMode {
        self.shrinkage
    }

    pub fn updates_seen(&self) -> u64 {
        self.updates_seen
    }

    pub fn per_class_seen(&self) -> &[u64] {
        &self.per_class_seen
    }

    pub fn all_classes_seen(&self) -> bool {
        self.per_class_seen.iter().all(|&c| c > 0)
    }

    pub fn ema_means(&self) -> ArrayView2<'_, f64> {
        self.ema_means.view()
    }

    pub fn ema_covariance(&self) -> ArrayView2<'_, f64> {
        self.ema_covariance.view()
    }

    pub fn background_mean(&self) -> ArrayView1<'_, f64> {
        self.background_mean.view()
    }

    pub fn background_covariance(&self) -> ArrayView2<'_, f64> {
        self.background_covariance.view()
    }

    /// Folds one labeled batch into the running estimates.
    ///
    /// Means of classes present in the batch are blended; absent classes are
    /// left alone. The batch covariance is taken around the post-update means,
    /// shrunk, and then blended. A class seen for the first time, and every
    /// accumulator on the very first update, is set to the batch estimate.
    pub fn update(&mut self, batch: &EmbeddingSet) -> Result<UpdateInfo> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        check_dim("batch dimension vs state", self.dim(), batch.dim())?;
        let labels = batch.require_labels()?;
        let k_total = self.num_classes();
        check_labels(labels, k_total)?;

        let data = batch.data();
        let m = self.momentum;
        let first = self.updates_seen == 0;

        let (sums, counts) = class_sums(data, labels, k_total);
        for k in 0..k_total {
            if counts[k] == 0 {
                continue;
            }
            let batch_mean = sums.row(k).mapv(|v| v / counts[k] as f64);
            let mut ema = self.ema_means.row_mut(k);
            if self.per_class_seen[k] == 0 {
                ema.assign(&batch_mean);
            } else {
                ema.zip_mut_with(&batch_mean, |e, &b| *e = m * *e + (1.0 - m) * b);
            }
            self.per_class_seen[k] += counts[k] as u64;
        }

        let centered = center_rows(data, labels, self.ema_means.view());
        let cov = centered_covariance(centered.view());
        let (shrunk, tied_lambda) = ledoit_wolf_shrink(cov.view(), centered.view(), self.shrinkage)?;
        blend(&mut self.ema_covariance, &shrunk, m, first);

        let batch_bg_mean = data.mean_axis(Axis(0)).expect("non-empty batch");
        if first {
            self.background_mean.assign(&batch_bg_mean);
        } else {
            self.background_mean
                .zip_mut_with(&batch_bg_mean, |e, &b| *e = m * *e + (1.0 - m) * b);
        }
        let bg_centered = &data - &self.background_mean;
        let bg_cov = centered_covariance(bg_centered.view());
        let (bg_shrunk, background_lambda) =
            ledoit_wolf_shrink(bg_cov.view(), bg_centered.view(), self.shrinkage)?;
        blend(&mut self.background_covariance, &bg_shrunk, m, first);

        self.updates_seen += 1;
        Ok(UpdateInfo {
            tied_lambda,
            background_lambda,
        })
    }
}

fn blend(acc: &mut Array2<f64>, batch: &Array2<f64>, momentum: f64, first: bool) {
    if first {
        acc.assign(batch);
    } else {
        acc.zip_mut_with(batch, |a, &b| *a = momentum * *a + (1.0 - momentum) * b);
    }
    symmetrize(acc);
}

/// Freezes the online estimates into factorized [`GaussianStats`].
///
/// With `full_data`, everything is refit offline on that labeled set using
/// the state's shrinkage mode instead of reading the EMA accumulators.
pub fn finalize_stats(
    state: &OnlineStatsState,
    full_data: Option<&EmbeddingSet>,
) -> Result<GaussianStats> {
    if let Some(set) = full_data {
        check_dim("full data dimension vs state", state.dim(), set.dim())?;
        return fit_gaussian_stats(set, state.num_classes(), state.shrinkage).map(|(s, _)| s);
    }
    if state.updates_seen == 0 {
        return Err(Error::UnseenClass(0));
    }
    if let Some(k) = state.per_class_seen.iter().position(|&c| c == 0) {
        return Err(Error::UnseenClass(k));
    }
    GaussianStats::from_parts_with_jitter(
        state.ema_means.clone(),
        state.ema_covariance.clone(),
        state.background_mean.clone(),
        state.background_covariance.clone(),
    )
}

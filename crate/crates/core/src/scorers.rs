//! Test-time OOD scores. Higher always means "more in-distribution".

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{check_dim, Error, Result};
use crate::stats::GaussianStats;

pub const DEFAULT_KNN_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerId {
    Md,
    Rmd,
    Msp,
    Energy,
    Knn,
}

impl ScorerId {
    pub const ALL: [ScorerId; 5] = [
        ScorerId::Md,
        ScorerId::Rmd,
        ScorerId::Msp,
        ScorerId::Energy,
        ScorerId::Knn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScorerId::Md => "md",
            ScorerId::Rmd => "rmd",
            ScorerId::Msp => "msp",
            ScorerId::Energy => "energy",
            ScorerId::Knn => "knn",
        }
    }

    /// Scorers that read logits rather than features.
    pub fn uses_logits(self) -> bool {
        matches!(self, ScorerId::Msp | ScorerId::Energy)
    }
}

impl fmt::Display for ScorerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScorerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScorerId::ALL
            .into_iter()
            .find(|id| id.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidParams(format!(
                    "unknown scorer {s:?}; valid scorers: md, rmd, msp, energy, knn"
                ))
            })
    }
}

/// One score per row, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    scores: Vec<f64>,
    pub scorer: ScorerId,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>, scorer: ScorerId) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteScore(i));
        }
        Ok(Self { scores, scorer })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.scores
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Id,
    Ood,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Id => "ID",
            Decision::Ood => "OOD",
        }
    }
}

/// Accept as ID iff `score >= tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRule {
    tau: f64,
}

impl ThresholdRule {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(Error::InvalidParams(format!("threshold must be finite, got {tau}")));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn classify(&self, score: f64) -> Decision {
        if score >= self.tau {
            Decision::Id
        } else {
            Decision::Ood
        }
    }
}

fn check_class(stats: &GaussianStats, k: usize) -> Result<()> {
    if k >= stats.num_classes() {
        return Err(Error::ClassOutOfRange {
            index: k,
            num_classes: stats.num_classes(),
        });
    }
    Ok(())
}

/// `(z − μ_k)ᵀ Σ⁻¹ (z − μ_k)` through the tied Cholesky factor.
pub fn mahalanobis_distance(z: ArrayView1<'_, f64>, stats: &GaussianStats, k: usize) -> Result<f64> {
    check_class(stats, k)?;
    check_dim("feature dimension vs stats", stats.dim(), z.len())?;
    Ok(class_distance(z, stats, k))
}

/// Distance under the background Gaussian.
pub fn background_distance(z: ArrayView1<'_, f64>, stats: &GaussianStats) -> Result<f64> {
    check_dim("feature dimension vs stats", stats.dim(), z.len())?;
    let diff = &z - &stats.background_mean();
    Ok(stats.background_cholesky().quad_form(diff.view()))
}

pub(crate) fn class_distance(z: ArrayView1<'_, f64>, stats: &GaussianStats, k: usize) -> f64 {
    let diff = &z - &stats.class_mean(k);
    stats.tied_cholesky().quad_form(diff.view())
}

/// All `K` class distances for every row, `n × K`.
pub fn class_distances(features: ArrayView2<'_, f64>, stats: &GaussianStats) -> Result<Array2<f64>> {
    check_dim("feature dimension vs stats", stats.dim(), features.ncols())?;
    let k = stats.num_classes();
    let mut out = Array2::zeros((features.nrows(), k));
    for (z, mut row) in features.rows().into_iter().zip(out.rows_mut()) {
        for c in 0..k {
            row[c] = class_distance(z, stats, c);
        }
    }
    Ok(out)
}

fn min_of(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(f64::INFINITY, f64::min)
}

/// `−min_k MD_k(z)`.
pub fn score_md(batch: &EmbeddingSet, stats: &GaussianStats) -> Result<ScoreVector> {
    check_dim("feature dimension vs stats", stats.dim(), batch.dim())?;
    let scores = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let z = batch.row(i);
            -min_of((0..stats.num_classes()).map(|k| class_distance(z, stats, k)))
        })
        .collect();
    ScoreVector::new(scores, ScorerId::Md)
}

/// `−min_k [MD_k(z) − MD_0(z)]` with `MD_0` under the background Gaussian.
pub fn score_rmd(batch: &EmbeddingSet, stats: &GaussianStats) -> Result<ScoreVector> {
    check_dim("feature dimension vs stats", stats.dim(), batch.dim())?;
    let scores = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let z = batch.row(i);
            let diff = &z - &stats.background_mean();
            let md0 = stats.background_cholesky().quad_form(diff.view());
            -min_of((0..stats.num_classes()).map(|k| class_distance(z, stats, k) - md0))
        })
        .collect();
    ScoreVector::new(scores, ScorerId::Rmd)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `ln Σ exp(v)` with max subtraction.
pub fn logsumexp(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Maximum softmax probability per row.
pub fn score_msp(logits: ArrayView2<'_, f64>) -> Result<ScoreVector> {
    if logits.ncols() < 2 {
        return Err(Error::DimensionMismatch {
            context: "MSP needs at least two logit columns",
            expected: 2,
            actual: logits.ncols(),
        });
    }
    let probs = softmax_rows(logits);
    let scores = probs
        .axis_iter(Axis(0))
        .map(|row| row.fold(0.0f64, |m, &v| m.max(v)))
        .collect();
    ScoreVector::new(scores, ScorerId::Msp)
}

/// `T · logsumexp(logits / T)`.
pub fn score_energy(logits: ArrayView2<'_, f64>, temperature: f64) -> Result<ScoreVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if logits.ncols() == 0 {
        return Err(Error::DimensionMismatch {
            context: "energy needs at least one logit column",
            expected: 1,
            actual: 0,
        });
    }
    let scores = logits
        .axis_iter(Axis(0))
        .map(|row| {
            let scaled = row.mapv(|v| v / temperature);
            temperature * logsumexp(scaled.view())
        })
        .collect();
    ScoreVector::new(scores, ScorerId::Energy)
}

/// Bank of unit-normalized reference features.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    bank: Array2<f64>,
    k: usize,
}

fn normalized(row: ArrayView1<'_, f64>) -> Option<ndarray::Array1<f64>> {
    let norm = row.dot(&row).sqrt();
    (norm > 0.0).then(|| row.mapv(|v| v / norm))
}

impl KnnIndex {
    pub fn new(bank: ArrayView2<'_, f64>, k: usize) -> Result<Self> {
        let n = bank.nrows();
        if n == 0 {
            return Err(Error::EmptyBank);
        }
        if k == 0 || k > n {
            return Err(Error::InvalidParams(format!(
                "KNN k must lie in [1, {n}], got {k}"
            )));
        }
        let mut out = Array2::zeros(bank.raw_dim());
        for (i, row) in bank.rows().into_iter().enumerate() {
            let unit = normalized(row).ok_or_else(|| {
                Error::InvalidParams(format!("bank row {i} has zero norm"))
            })?;
            out.row_mut(i).assign(&unit);
        }
        Ok(Self { bank: out, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bank(&self) -> ArrayView2<'_, f64> {
        self.bank.view()
    }

    pub fn dim(&self) -> usize {
        self.bank.ncols()
    }

    /// Distance from a unit query to its k-th nearest bank row.
    fn kth_distance(&self, query: ArrayView1<'_, f64>, k: usize) -> f64 {
        let mut dists: Vec<f64> = self
            .bank
            .rows()
            .into_iter()
            .map(|b| {
                b.iter()
                    .zip(query.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .collect();
        let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        kth.sqrt()
    }
}

/// `−‖q/‖q‖ − b_(k)‖`, the negated distance to the k-th nearest bank row.
/// A zero query is kept at the origin.
pub fn score_knn(batch: &EmbeddingSet, index: &KnnIndex) -> Result<ScoreVector> {
    score_knn_with_k(batch, index, index.k)
}

pub fn score_knn_with_k(batch: &EmbeddingSet, index: &KnnIndex, k: usize) -> Result<ScoreVector> {
    check_dim("query dimension vs KNN bank", index.dim(), batch.dim())?;
    if k == 0 || k > index.bank.nrows() {
        return Err(Error::InvalidParams(format!("KNN k out of range: {k}")));
    }
    let scores = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let row = batch.row(i);
            let q = normalized(row).unwrap_or_else(|| row.to_owned());
            -index.kth_distance(q.view(), k)
        })
        .collect();
    ScoreVector::new(scores, ScorerId::Knn)
}

pub fn decide(scores: &ScoreVector, rule: ThresholdRule) -> Vec<Decision> {
    scores.scores.iter().map(|&s| rule.classify(s)).collect()
}

/// Largest `tau` keeping at least `target_tpr` of the ID scores at or above
/// it: the `(n − ⌈target·n⌉)`-th smallest score (0-based).
pub fn calibrate_threshold(id_scores: &[f64], target_tpr: f64) -> Result<ThresholdRule> {
    if id_scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::InvalidParams(format!(
            "target TPR must lie in (0, 1], got {target_tpr}"
        )));
    }
    if let Some(i) = id_scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore(i));
    }
    let n = id_scores.len();
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Guard against t·n landing a hair above an integer, e.g. 0.95·20.
    let required = ((target_tpr * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    ThresholdRule::new(sorted[n - required])
}

/// Writes `row_index,score[,decision]` CSV.
pub fn write_scores_csv<W: Write>(
    mut out: W,
    scores: &ScoreVector,
    rule: Option<ThresholdRule>,
) -> std::io::Result<()> {
    match rule {
        Some(rule) => {
            writeln!(out, "row_index,score,decision")?;
            for (i, &s) in scores.scores.iter().enumerate() {
                writeln!(out, "{i},{s},{}", rule.classify(s).as_str())?;
            }
        }
        None => {
            writeln!(out, "row_index,score")?;
            for (i, &s) in scores.scores.iter().enumerate() {
                writeln!(out, "{i},{s}")?;
            }
        }
    }
    Ok(())
}

/// Reads the `score` column of a file produced by [`write_scores_csv`].
pub fn read_scores_csv<R: std::io::Read>(reader: R) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::ParseError {
            line: 1,
            column: 0,
            message: e.to_string(),
        })?
        .clone();
    let col = headers.iter().position(|h| h == "score").ok_or(Error::ParseError {
        line: 1,
        column: 0,
        message: "missing 'score' column".into(),
    })?;
    let mut scores = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::ParseError {
            line,
            column: 0,
            message: e.to_string(),
        })?;
        let field = rec.get(col).ok_or(Error::RaggedRows {
            line,
            expected: headers.len(),
            found: rec.len(),
        })?;
        scores.push(field.parse().map_err(|_| Error::ParseError {
            line,
            column: col + 1,
            message: format!("not a number: {field:?}"),
        })?);
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn identity_stats(means: Array2<f64>) -> GaussianStats {
        let d = means.ncols();
        GaussianStats::from_parts(means, Array2::eye(d), Array1::zeros(d), Array2::eye(d)).unwrap()
    }

    #[test]
    fn md_identity_examples() {
        let stats = identity_stats(array![[0.0, 0.0]]);
        assert_eq!(mahalanobis_distance(array![3.0, 4.0].view(), &stats, 0).unwrap(), 25.0);
        assert_eq!(mahalanobis_distance(array![0.0, 0.0].view(), &stats, 0).unwrap(), 0.0);
    }

    #[test]
    fn md_diagonal_example() {
        let stats = GaussianStats::from_parts(
            array![[0.0, 0.0]],
            array![[2.0, 0.0], [0.0, 1.0]],
            Array1::zeros(2),
            Array2::eye(2),
        )
        .unwrap();
        let md = mahalanobis_distance(array![2.0, 1.0].view(), &stats, 0).unwrap();
        assert!((md - 3.0).abs() < 1e-14);
    }

    #[test]
    fn md_errors() {
        let stats = identity_stats(array![[0.0, 0.0]]);
        assert!(matches!(
            mahalanobis_distance(array![0.0, 0.0].view(), &stats, 1),
            Err(Error::ClassOutOfRange { .. })
        ));
        assert!(matches!(
            mahalanobis_distance(array![0.0].view(), &stats, 0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn md_score_picks_closest_class() {
        let stats = identity_stats(array![[0.0, 0.0], [10.0, 0.0]]);
        let batch =
            EmbeddingSet::new(array![[1.0, 0.0], [0.0, 0.0], [5.0, 1.0]], None).unwrap();
        let s = score_md(&batch, &stats).unwrap();
        assert_eq!(s.scores(), &[-1.0, 0.0, -26.0]);
    }

    #[test]
    fn rmd_with_background_equal_to_class_is_zero() {
        let stats = GaussianStats::from_parts(
            array![[1.0, -1.0]],
            array![[2.0, 0.3], [0.3, 1.0]],
            array![1.0, -1.0],
            array![[2.0, 0.3], [0.3, 1.0]],
        )
        .unwrap();
        let batch = EmbeddingSet::new(array![[0.0, 0.0], [5.0, -3.0]], None).unwrap();
        assert!(score_rmd(&batch, &stats).unwrap().scores().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rmd_at_class_mean_is_background_distance() {
        let stats = GaussianStats::from_parts(
            array![[0.0, 0.0]],
            Array2::eye(2),
            array![3.0, 0.0],
            Array2::eye(2) * 2.0,
        )
        .unwrap();
        let batch = EmbeddingSet::new(array![[0.0, 0.0]], None).unwrap();
        let s = score_rmd(&batch, &stats).unwrap();
        assert!((s.scores()[0] - 4.5).abs() < 1e-14);
    }

    #[test]
    fn msp_examples() {
        let s = score_msp(array![[1.0, 1.0, 1.0, 1.0]].view()).unwrap();
        assert!((s.scores()[0] - 0.25).abs() < 1e-15);
        let s = score_msp(array![[10.0, 0.0]].view()).unwrap();
        assert!((s.scores()[0] - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-15);
        assert!((s.scores()[0] - 0.9999546).abs() < 1e-7);
        assert!(score_msp(array![[1.0]].view()).is_err());
    }

    #[test]
    fn energy_examples() {
        let s = score_energy(array![[5.0]].view(), 1.0).unwrap();
        assert_eq!(s.scores()[0], 5.0);
        let s = score_energy(array![[0.0, 0.0]].view(), 1.0).unwrap();
        assert!((s.scores()[0] - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            score_energy(array![[0.0]].view(), 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn knn_examples() {
        let bank = array![[1.0, 0.0], [0.0, 1.0]];
        let idx1 = KnnIndex::new(bank.view(), 1).unwrap();
        let idx2 = KnnIndex::new(bank.view(), 2).unwrap();
        let q = EmbeddingSet::new(array![[1.0, 0.0], [3.0, 0.0]], None).unwrap();
        assert_eq!(score_knn(&q, &idx1).unwrap().scores(), &[0.0, 0.0]);
        let s = score_knn(&q, &idx2).unwrap();
        assert!((s.scores()[0] + 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.scores()[0], s.scores()[1]);
        assert!(matches!(KnnIndex::new(Array2::zeros((0, 2)).view(), 1), Err(Error::EmptyBank)));
        assert!(KnnIndex::new(bank.view(), 3).is_err());
    }

    #[test]
    fn decide_boundary_is_inclusive() {
        let s = ScoreVector::new(vec![1.0, 2.0, 3.0], ScorerId::Md).unwrap();
        let rule = ThresholdRule::new(2.0).unwrap();
        assert_eq!(decide(&s, rule), vec![Decision::Ood, Decision::Id, Decision::Id]);
        let all_id = ThresholdRule::new(f64::MIN).unwrap();
        assert!(decide(&s, all_id).iter().all(|&d| d == Decision::Id));
        let all_ood = ThresholdRule::new(4.0).unwrap();
        assert!(decide(&s, all_ood).iter().all(|&d| d == Decision::Ood));
    }

    #[test]
    fn calibrate_examples() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&scores, 0.95).unwrap().tau(), 6.0);
        assert_eq!(calibrate_threshold(&scores, 1.0).unwrap().tau(), 1.0);
        let flat = vec![0.7; 13];
        assert_eq!(calibrate_threshold(&flat, 0.95).unwrap().tau(), 0.7);
        assert!(matches!(calibrate_threshold(&[], 0.95), Err(Error::EmptyScores)));
    }

    #[test]
    fn scorer_names() {
        assert_eq!("RMD".parse::<ScorerId>().unwrap(), ScorerId::Rmd);
        let err = "vim".parse::<ScorerId>().unwrap_err().to_string();
        assert!(err.contains("md, rmd, msp, energy, knn"));
    }

    #[test]
    fn scores_csv_roundtrip() {
        let s = ScoreVector::new(vec![0.1, -2.5e-300, 1.0 / 3.0], ScorerId::Rmd).unwrap();
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &s, Some(ThresholdRule::new(0.0).unwrap())).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("row_index,score,decision\n0,0.1,ID\n1,"));
        assert_eq!(read_scores_csv(buf.as_slice()).unwrap(), s.scores());
    }
}

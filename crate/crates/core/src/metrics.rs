//! AUROC and FPR at a fixed TPR, with ID as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorers::calibrate_threshold;

pub const DEFAULT_TARGET_TPR: f64 = 0.95;

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore(i));
    }
    Ok(())
}

/// Mann-Whitney estimate of `P(id > ood) + ½ P(id = ood)`.
///
/// One joint sort; tied runs get their midrank.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores(id_scores)?;
    check_scores(ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Ranks are doubled so every midrank stays an integer.
    let mut id_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j, midrank·2 = i + 1 + j
        let midrank2 = (i + 1 + j) as u128;
        let ids_in_run = all[i..j].iter().filter(|e| e.1).count() as u128;
        id_rank_sum2 += midrank2 * ids_in_run;
        i = j;
    }
    let n_id = id_scores.len() as u128;
    let n_ood = ood_scores.len() as u128;
    // 2U = 2R − n(n+1)
    let u2 = id_rank_sum2 - n_id * (n_id + 1);
    Ok(u2 as f64 / (2 * n_id * n_ood) as f64)
}

/// FPR at the threshold that keeps `target_tpr` of the ID scores.
/// Returns `(fpr, threshold)`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], target_tpr: f64) -> Result<(f64, f64)> {
    check_scores(ood_scores)?;
    let rule = calibrate_threshold(id_scores, target_tpr)?;
    let accepted = ood_scores.iter().filter(|&&s| s >= rule.tau()).count();
    Ok((accepted as f64 / ood_scores.len() as f64, rule.tau()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
}

impl ScoreSummary {
    pub fn of(scores: &[f64]) -> Result<Self> {
        check_scores(scores)?;
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Ok(Self {
            min: sorted[0],
            max: sorted[n - 1],
            mean: sorted.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

/// One scorer's result on one ID/OOD pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub scorer: String,
    pub auroc: f64,
    pub fpr95: f64,
    pub threshold: f64,
    pub n_id: usize,
    pub n_ood: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_score_summary: Option<ScoreSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_score_summary: Option<ScoreSummary>,
}

/// Scores of one scorer on matching ID and OOD sets.
#[derive(Debug, Clone)]
pub struct ScorerOutput {
    pub scorer: String,
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
}

pub fn evaluate_one(output: &ScorerOutput, target_tpr: f64) -> Result<EvalEntry> {
    let auroc = auroc(&output.id_scores, &output.ood_scores)?;
    let (fpr, threshold) = fpr_at_tpr(&output.id_scores, &output.ood_scores, target_tpr)?;
    Ok(EvalEntry {
        scorer: output.scorer.clone(),
        auroc,
        fpr95: fpr,
        threshold,
        n_id: output.id_scores.len(),
        n_ood: output.ood_scores.len(),
        id_score_summary: Some(ScoreSummary::of(&output.id_scores)?),
        ood_score_summary: Some(ScoreSummary::of(&output.ood_scores)?),
    })
}

/// One report entry per scorer output, in input order.
pub fn evaluate(outputs: &[ScorerOutput], target_tpr: f64) -> Result<EvalReport> {
    let entries = outputs
        .iter()
        .map(|o| evaluate_one(o, target_tpr))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { entries })
}

impl EvalReport {
    pub fn get(&self, scorer: &str) -> Option<&EvalEntry> {
        self.entries.iter().find(|e| e.scorer == scorer)
    }

    /// Unweighted mean of AUROC and FPR over the given entries, e.g. one
    /// scorer across several OOD sets.
    pub fn macro_average(name: impl Into<String>, entries: &[EvalEntry]) -> Option<EvalEntry> {
        if entries.is_empty() {
            return None;
        }
        let m = entries.len() as f64;
        Some(EvalEntry {
            scorer: name.into(),
            auroc: entries.iter().map(|e| e.auroc).sum::<f64>() / m,
            fpr95: entries.iter().map(|e| e.fpr95).sum::<f64>() / m,
            threshold: entries[0].threshold,
            n_id: entries[0].n_id,
            n_ood: entries.iter().map(|e| e.n_ood).sum(),
            id_score_summary: None,
            ood_score_summary: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::ParseError {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

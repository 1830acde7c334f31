//! Train-then-evaluate runs and alpha sweeps on a synthetic task.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{evaluate_one, EvalEntry, ScorerOutput, DEFAULT_TARGET_TPR};
use crate::scorers::score_rmd;
use crate::trainer::{
    accuracy, extract_features, gaussian_log_likelihood, train, SyntheticTask, TrainConfig,
    TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodSplit {
    Near,
    Far,
}

impl FromStr for OodSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "near" => Ok(OodSplit::Near),
            "far" => Ok(OodSplit::Far),
            _ => Err(Error::InvalidParams(format!(
                "OOD split must be 'near' or 'far', got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for OodSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OodSplit::Near => "near",
            OodSplit::Far => "far",
        })
    }
}

/// Headline numbers of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub alpha: f64,
    /// RMD on ID test vs far-OOD.
    pub far: EvalEntry,
    /// RMD on ID test vs near-OOD.
    pub near: EvalEntry,
    /// Mean train-set log-likelihood under the final statistics.
    pub gauss_ll: f64,
    /// Test-set accuracy of the classifier head.
    pub id_acc: f64,
}

impl RunSummary {
    pub fn split(&self, split: OodSplit) -> &EvalEntry {
        match split {
            OodSplit::Near => &self.near,
            OodSplit::Far => &self.far,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub outcome: TrainOutcome,
    pub summary: RunSummary,
}

/// Trains a fresh model from `config` and scores it with RMD.
pub fn run_experiment(task: &SyntheticTask, config: &TrainConfig) -> Result<ExperimentRun> {
    let model = config.init_model(task.id_train.dim(), task.num_classes())?;
    let outcome = train(model, task, config)?;
    let summary = summarize(task, &outcome, config.alpha)?;
    Ok(ExperimentRun { outcome, summary })
}

pub fn summarize(task: &SyntheticTask, outcome: &TrainOutcome, alpha: f64) -> Result<RunSummary> {
    let model = &outcome.model;
    let stats = &outcome.stats;
    let train_feats = extract_features(model, &task.id_train)?;
    let gauss_ll =
        gaussian_log_likelihood(train_feats.data(), train_feats.require_labels()?, stats)?;
    let test_fwd = model.forward(task.id_test.data())?;
    let id_acc = accuracy(test_fwd.logits.view(), task.id_test.require_labels()?);

    let id_scores = score_rmd(&extract_features(model, &task.id_test)?, stats)?.into_vec();
    let entry = |ood: &crate::EmbeddingSet| -> Result<EvalEntry> {
        let ood_scores = score_rmd(&extract_features(model, ood)?, stats)?.into_vec();
        evaluate_one(
            &ScorerOutput {
                scorer: "rmd".into(),
                id_scores: id_scores.clone(),
                ood_scores,
            },
            DEFAULT_TARGET_TPR,
        )
    };
    Ok(RunSummary {
        alpha,
        far: entry(&task.ood_far)?,
        near: entry(&task.ood_near)?,
        gauss_ll,
        id_acc,
    })
}

/// One training run per alpha, in parallel; results keep the input order.
pub fn sweep(
    task: &SyntheticTask,
    base: &TrainConfig,
    alphas: &[f64],
) -> Vec<(f64, Result<RunSummary>)> {
    alphas
        .par_iter()
        .map(|&alpha| {
            let config = TrainConfig {
                alpha,
                ..base.clone()
            };
            (alpha, run_experiment(task, &config).map(|r| r.summary))
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "alpha,auroc,fpr95,gauss_ll,id_acc";

/// Writes the sweep as CSV. Failed runs get `error` in every metric column.
pub fn write_sweep_csv<W: Write>(
    mut out: W,
    rows: &[(f64, Result<RunSummary>)],
    split: OodSplit,
) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for (alpha, row) in rows {
        match row {
            Ok(s) => {
                let e = s.split(split);
                writeln!(out, "{alpha},{},{},{},{}", e.auroc, e.fpr95, s.gauss_ll, s.id_acc)?
            }
            Err(_) => writeln!(out, "{alpha},error,error,error,error")?,
        }
    }
    Ok(())
}

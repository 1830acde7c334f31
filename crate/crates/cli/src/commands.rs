use std::path::Path;

use serde::Serialize;

use mahaguard::experiment::{run_experiment, sweep as run_sweep, write_sweep_csv};
use mahaguard::metrics::{evaluate_one, EvalEntry, EvalReport, ScorerOutput};
use mahaguard::scorers::{
    calibrate_threshold, read_scores_csv, score_energy, score_knn, score_md, score_msp, score_rmd,
    write_scores_csv, KnnIndex, ScoreVector, ScorerId, ThresholdRule,
};
use mahaguard::stats::fit_gaussian_stats;
use mahaguard::trainer::{
    extract_features, extract_logits, make_synthetic_task, write_history_jsonl, GeneratorParams,
    SyntheticTask,
};
use mahaguard::{write_emb, EmbeddingSet, Error, GaussianStats, Result};

use crate::args::{EvalArgs, FitArgs, GenTaskArgs, ScoreArgs, ScorerArgs, SweepArgs, TrainArgs};
use crate::inputs::{ensure_dir, load_embeddings, load_logits, set_name, write_output};

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

#[derive(Serialize)]
struct FitSummary {
    #[serde(rename = "K")]
    num_classes: usize,
    d: usize,
    lambda: f64,
    background_lambda: f64,
    logdet: f64,
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let set = load_embeddings(&a.input, a.csv.labels_included)?;
    let labels = set.require_labels()?;
    let inferred = labels.iter().max().map_or(0, |&m| m + 1);
    let k = a.num_classes.unwrap_or(inferred);
    let (stats, report) = fit_gaussian_stats(&set, k, a.shrinkage)?;
    stats.save(&a.out)?;
    println!(
        "{}",
        to_json(&FitSummary {
            num_classes: k,
            d: stats.dim(),
            lambda: report.tied_lambda,
            background_lambda: report.background_lambda,
            logdet: stats.tied_cholesky().log_det(),
        })
    );
    Ok(())
}

/// Everything the requested scorers need, loaded once.
struct Scoring {
    stats: Option<GaussianStats>,
    knn: Option<KnnIndex>,
    temperature: f64,
    labels_included: bool,
}

impl Scoring {
    fn prepare(scorers: &[ScorerId], a: &ScorerArgs, labels_included: bool) -> Result<Self> {
        let needs_stats = scorers.iter().any(|s| matches!(s, ScorerId::Md | ScorerId::Rmd));
        let stats = match (&a.stats, needs_stats) {
            (Some(p), true) => Some(GaussianStats::load(p)?),
            (None, true) => return Err(Error::InvalidParams("md and rmd need --stats".into())),
            _ => None,
        };
        let knn = if scorers.contains(&ScorerId::Knn) {
            let bank = a
                .bank
                .as_ref()
                .ok_or_else(|| Error::InvalidParams("knn needs --bank".into()))?;
            let bank = load_embeddings(bank, labels_included)?;
            Some(KnnIndex::new(bank.data(), a.k)?)
        } else {
            None
        };
        if scorers.contains(&ScorerId::Energy) && !(a.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(a.temperature));
        }
        Ok(Self {
            stats,
            knn,
            temperature: a.temperature,
            labels_included,
        })
    }

    fn features(&self, path: &Path) -> Result<EmbeddingSet> {
        load_embeddings(path, self.labels_included)
    }

    fn score(&self, scorer: ScorerId, path: &Path) -> Result<ScoreVector> {
        let stats = || self.stats.as_ref().expect("prepared");
        match scorer {
            ScorerId::Md => score_md(&self.features(path)?, stats()),
            ScorerId::Rmd => score_rmd(&self.features(path)?, stats()),
            ScorerId::Msp => score_msp(load_logits(path)?.data()),
            ScorerId::Energy => score_energy(load_logits(path)?.data(), self.temperature),
            ScorerId::Knn => score_knn(&self.features(path)?, self.knn.as_ref().expect("prepared")),
        }
    }
}

pub fn score(a: &ScoreArgs) -> Result<()> {
    let [scorer] = a.scorers[..] else {
        return Err(Error::InvalidParams("score takes exactly one scorer".into()));
    };
    let ctx = Scoring::prepare(&[scorer], &a.scorer, a.csv.labels_included)?;
    let scores = ctx.score(scorer, &a.input)?;
    let rule = match (a.threshold, &a.id) {
        (Some(tau), _) => Some(ThresholdRule::new(tau)?),
        (None, Some(id)) => Some(calibrate_threshold(ctx.score(scorer, id)?.scores(), a.target_tpr)?),
        (None, None) => None,
    };
    let mut buf = Vec::new();
    write_scores_csv(&mut buf, &scores, rule).expect("writing to memory");
    write_output(a.out.as_deref(), &String::from_utf8(buf).expect("ascii"))
}

fn read_score_file(path: &Path) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_scores_csv(file)
}

/// Entries for one scorer across every OOD set: plain when there is a single
/// set, `name@set` plus `name@macro` otherwise.
fn entries_for(
    name: &str,
    id_scores: Vec<f64>,
    ood: Vec<(String, Vec<f64>)>,
    target_tpr: f64,
) -> Result<Vec<EvalEntry>> {
    if ood.len() == 1 {
        let (_, ood_scores) = ood.into_iter().next().expect("one set");
        let out = ScorerOutput {
            scorer: name.to_string(),
            id_scores,
            ood_scores,
        };
        return Ok(vec![evaluate_one(&out, target_tpr)?]);
    }
    let mut entries = Vec::with_capacity(ood.len() + 1);
    for (set, ood_scores) in ood {
        let out = ScorerOutput {
            scorer: format!("{name}@{set}"),
            id_scores: id_scores.clone(),
            ood_scores,
        };
        entries.push(evaluate_one(&out, target_tpr)?);
    }
    let avg = EvalReport::macro_average(format!("{name}@macro"), &entries).expect("non-empty");
    entries.push(avg);
    Ok(entries)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut entries = Vec::new();
    if a.score_files {
        let name = match a.scorers.as_deref() {
            None => "external".to_string(),
            Some([one]) => one.name().to_string(),
            Some(_) => {
                return Err(Error::InvalidParams(
                    "with --score-files give at most one scorer name".into(),
                ))
            }
        };
        let ood = a
            .ood
            .iter()
            .map(|p| Ok((set_name(p), read_score_file(p)?)))
            .collect::<Result<Vec<_>>>()?;
        entries.extend(entries_for(&name, read_score_file(&a.id)?, ood, a.target_tpr)?);
    } else {
        let scorers = a.scorers.clone().unwrap_or_else(|| vec![ScorerId::Md, ScorerId::Rmd]);
        let ctx = Scoring::prepare(&scorers, &a.scorer, a.csv.labels_included)?;
        for scorer in scorers {
            let id_scores = ctx.score(scorer, &a.id)?.into_vec();
            let ood = a
                .ood
                .iter()
                .map(|p| Ok((set_name(p), ctx.score(scorer, p)?.into_vec())))
                .collect::<Result<Vec<_>>>()?;
            entries.extend(entries_for(scorer.name(), id_scores, ood, a.target_tpr)?);
        }
    }
    let mut json = EvalReport { entries }.to_json();
    json.push('\n');
    write_output(a.out.as_deref(), &json)
}

fn task_for(seed: u64) -> Result<SyntheticTask> {
    make_synthetic_task(&GeneratorParams::default(), seed)
}

fn task_splits(task: &SyntheticTask) -> [(&'static str, &EmbeddingSet); 4] {
    [
        ("id_train", &task.id_train),
        ("id_test", &task.id_test),
        ("ood_near", &task.ood_near),
        ("ood_far", &task.ood_far),
    ]
}

#[derive(Serialize)]
struct TrainSummary {
    alpha: f64,
    seed: u64,
    epochs: usize,
    gauss_ll: f64,
    id_acc: f64,
    far_auroc: f64,
    far_fpr95: f64,
    near_auroc: f64,
    near_fpr95: f64,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let config = a.training.config(a.alpha);
    config.validate()?;
    let task = task_for(config.seed)?;
    let run = run_experiment(&task, &config)?;
    let out = &a.out;
    ensure_dir(out)?;
    let outcome = &run.outcome;
    outcome.model.save(out.join("model.mgm"))?;
    outcome.stats.save(out.join("stats.mgs"))?;
    let mut history = Vec::new();
    write_history_jsonl(&mut history, &outcome.history).expect("writing to memory");
    mahaguard::embedding::write_atomic(&out.join("history.jsonl"), &history)?;
    for (name, set) in task_splits(&task) {
        write_emb(&extract_features(&outcome.model, set)?, out.join(format!("{name}.emb")))?;
        write_emb(&extract_logits(&outcome.model, set)?, out.join(format!("{name}.logits.emb")))?;
    }
    let s = &run.summary;
    println!(
        "{}",
        to_json(&TrainSummary {
            alpha: config.alpha,
            seed: config.seed,
            epochs: config.epochs,
            gauss_ll: s.gauss_ll,
            id_acc: s.id_acc,
            far_auroc: s.far.auroc,
            far_fpr95: s.far.fpr95,
            near_auroc: s.near.auroc,
            near_fpr95: s.near.fpr95,
        })
    );
    Ok(())
}

fn parse_alphas(raw: &str) -> Result<Vec<f64>> {
    let alphas = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|a| (0.0..=1.0).contains(a))
                .ok_or_else(|| Error::InvalidParams(format!("alpha must be a number in [0, 1], got {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if alphas.is_empty() {
        return Err(Error::InvalidParams("--alphas is empty".into()));
    }
    Ok(alphas)
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let alphas = parse_alphas(&a.alphas)?;
    let base = a.training.config(alphas[0]);
    base.validate()?;
    let task = task_for(base.seed)?;
    let rows = run_sweep(&task, &base, &alphas);
    for (alpha, row) in &rows {
        if let Err(e) = row {
            eprintln!("alpha {alpha}: {e}");
        }
    }
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &rows, a.ood_split).expect("writing to memory");
    write_output(a.out.as_deref(), &String::from_utf8(buf).expect("ascii"))
}

pub fn gen_task(a: &GenTaskArgs) -> Result<()> {
    let task = task_for(a.seed)?;
    ensure_dir(&a.out)?;
    for (name, set) in task_splits(&task) {
        write_emb(set, a.out.join(format!("{name}.emb")))?;
    }
    Ok(())
}

//! Training loop for the regularized objective.
//!
//! Per batch: forward, fold the batch features into the EMA statistics,
//! evaluate the blended loss against the current statistics, backward, SGD
//! step. Everything is sequential and seeded, so two runs with the same
//! config produce identical bits.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, MlpModel, Sgd};
use super::task::SyntheticTask;
use crate::embedding::EmbeddingSet;
use crate::error::{check_dim, Error, Result};
use crate::loss::{combined_loss, LossConfig};
use crate::scorers::class_distances;
use crate::stats::{finalize_stats, GaussianStats, OnlineStatsState, ShrinkageMode};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Optimizer momentum.
    pub momentum: f64,
    /// L2 penalty folded into the SGD update.
    pub weight_decay: f64,
    pub seed: u64,
    pub alpha: f64,
    pub logit_scale: f64,
    pub ema_momentum: f64,
    pub shrinkage: ShrinkageMode,
    /// Evaluate accuracy and log-likelihood every this many epochs (and on
    /// the last one).
    pub eval_every: usize,
    /// Ramp alpha linearly from 0 during the first epoch.
    pub warmup: bool,
    /// Update the EMA statistics with a batch before computing that batch's
    /// Mahalanobis loss. When false, the loss uses the statistics from the
    /// previous batches and the first batch skips the Mahalanobis branch.
    pub stats_before_loss: bool,
    /// Refit the returned statistics on the final training features instead
    /// of copying the EMA accumulators.
    pub offline_final_stats: bool,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            alpha: 0.5,
            logit_scale: 1.0,
            ema_momentum: crate::stats::DEFAULT_EMA_MOMENTUM,
            shrinkage: ShrinkageMode::LedoitWolfAuto,
            eval_every: 1,
            warmup: true,
            stats_before_loss: true,
            offline_final_stats: true,
            hidden_dims: vec![64],
            feature_dim: 16,
            activation: Activation::Relu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidParams("batch_size must be >= 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParams("learning_rate must be >= 0".into()));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::InvalidParams("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParams("optimizer momentum must lie in [0, 1)".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidParams("eval_every must be >= 1".into()));
        }
        if self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidParams("layer widths must be positive".into()));
        }
        LossConfig {
            alpha: self.alpha,
            logit_scale: self.logit_scale,
        }
        .validate()?;
        self.shrinkage.validate()?;
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::InvalidParams("EMA momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Layer widths from input to classes.
    pub fn layer_sizes(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden_dims);
        sizes.push(self.feature_dim);
        sizes.push(num_classes);
        sizes
    }

    /// Freshly initialized network for this config, seeded from `seed`.
    pub fn init_model(&self, input_dim: usize, num_classes: usize) -> Result<MlpModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        MlpModel::random(
            &self.layer_sizes(input_dim, num_classes),
            self.activation,
            &mut rng,
        )
    }
}

/// Per-epoch training summary; one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub base_ce: f64,
    /// `None` when no batch of the epoch had statistics for every class.
    pub maha_ce: Option<f64>,
    pub acc: Option<f64>,
    pub gauss_ll: Option<f64>,
}

pub fn write_history_jsonl<W: Write>(mut out: W, history: &[EpochRecord]) -> std::io::Result<()> {
    for rec in history {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub stats: GaussianStats,
    pub history: Vec<EpochRecord>,
    pub online_state: OnlineStatsState,
}

/// Mean over rows of `ln N(z_i; μ_{y_i}, Σ)`.
pub fn gaussian_log_likelihood(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    stats: &GaussianStats,
) -> Result<f64> {
    check_dim("label count vs rows", features.nrows(), labels.len())?;
    if features.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let dist = class_distances(features, stats)?;
    let d = stats.dim() as f64;
    let log_norm = d * (2.0 * std::f64::consts::PI).ln() + stats.tied_cholesky().log_det();
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= stats.num_classes() {
            return Err(Error::LabelOutOfRange {
                row: i,
                label: y as i64,
                num_classes: stats.num_classes(),
            });
        }
        sum += -0.5 * (dist[[i, y]] + log_norm);
    }
    Ok(sum / labels.len() as f64)
}

pub fn accuracy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let correct = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Penultimate features of `set`, keeping its labels.
pub fn extract_features(model: &MlpModel, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let fwd = model.forward(set.data())?;
    Ok(EmbeddingSet::new(fwd.features, set.labels().map(<[usize]>::to_vec))?
        .with_tag(set.source_tag.clone()))
}

/// Head logits of `set`.
pub fn extract_logits(model: &MlpModel, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let fwd = model.forward(set.data())?;
    Ok(EmbeddingSet::new(fwd.logits, set.labels().map(<[usize]>::to_vec))?
        .with_tag(set.source_tag.clone()))
}

pub fn train(mut model: MlpModel, task: &SyntheticTask, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = &task.id_train;
    let labels = train_set.require_labels()?;
    let k = model.num_classes();
    check_dim("model input vs task", model.input_dim(), train_set.dim())?;
    if let Some((row, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(Error::LabelOutOfRange {
            row,
            label: y as i64,
            num_classes: k,
        });
    }

    let mut state =
        OnlineStatsState::new(k, model.feature_dim(), config.ema_momentum, config.shrinkage)?;
    let mut opt = Sgd::new(config.learning_rate, config.momentum).with_weight_decay(config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let n_batches = n.div_ceil(config.batch_size);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_base, mut sum_maha) = (0.0, 0.0, 0.0);
        let mut maha_batches = 0usize;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = train_set.select(idx)?;
            let batch_labels = batch.require_labels()?;
            let fwd = model.forward(batch.data())?;
            let feat_set = EmbeddingSet::new(fwd.features.clone(), Some(batch_labels.to_vec()))?;

            let alpha = if config.warmup && epoch == 0 {
                config.alpha * b as f64 / n_batches as f64
            } else {
                config.alpha
            };

            if config.stats_before_loss {
                state.update(&feat_set)?;
            }
            let stats = if state.all_classes_seen() {
                Some(finalize_stats(&state, None)?)
            } else {
                None
            };
            let (total, base, maha, grad_logits, grad_features) = match &stats {
                Some(stats) => {
                    let out = combined_loss(
                        fwd.features.view(),
                        fwd.logits.view(),
                        batch_labels,
                        stats,
                        LossConfig {
                            alpha,
                            logit_scale: config.logit_scale,
                        },
                    )?;
                    (out.total, out.base_ce, Some(out.maha_ce), out.grad_logits, out.grad_features)
                }
                None => {
                    let (base, g) = crate::loss::softmax_ce_loss(fwd.logits.view(), batch_labels)?;
                    let zeros = Array2::zeros(fwd.features.raw_dim());
                    // No statistics yet: the Mahalanobis branch contributes nothing.
                    ((1.0 - alpha) * base, base, None, g * (1.0 - alpha), zeros)
                }
            };
            if !config.stats_before_loss {
                state.update(&feat_set)?;
            }
            if !total.is_finite() || maha.is_some_and(|m| !m.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            sum_total += total;
            sum_base += base;
            if let Some(m) = maha {
                sum_maha += m;
                maha_batches += 1;
            }

            let grads = model.backward(&fwd.cache, grad_logits.view(), Some(grad_features.view()))?;
            opt.step(&mut model, grads);
        }

        let nb = n_batches as f64;
        let evaluate = (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs;
        let (acc, gauss_ll) = if evaluate {
            let fwd = model.forward(train_set.data())?;
            let acc = accuracy(fwd.logits.view(), labels);
            let ll = if state.all_classes_seen() {
                let stats = finalize_stats(&state, None)?;
                Some(gaussian_log_likelihood(fwd.features.view(), labels, &stats)?)
            } else {
                None
            };
            (Some(acc), ll)
        } else {
            (None, None)
        };
        history.push(EpochRecord {
            epoch,
            total: sum_total / nb,
            base_ce: sum_base / nb,
            maha_ce: (maha_batches > 0).then(|| sum_maha / maha_batches as f64),
            acc,
            gauss_ll,
        });
    }

    let stats = if config.offline_final_stats {
        let features = extract_features(&model, train_set)?;
        finalize_stats(&state, Some(&features))?
    } else {
        finalize_stats(&state, None)?
    };
    Ok(TrainOutcome {
        model,
        stats,
        history,
        online_state: state,
    })
}

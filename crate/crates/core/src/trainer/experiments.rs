//! Scripted experiments: the alternation-ratio sweep and the caption ablation.

use serde::{Deserialize, Serialize};

use super::{EpochLog, FitReport, TrainConfig, Trainer};
use crate::error::Result;
use crate::objectives::MetricsReport;
use crate::scenegen::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub best_epoch: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_caption: MetricsReport,
    pub empty_caption: MetricsReport,
    /// Nonzero text features seen by the ablated model; 0 when captions never reach it.
    pub ablated_nonzero_features: u64,
}

/// Fits on `train`, selects by `val`, and scores the best checkpoint on `eval`.
pub fn train_and_evaluate(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    eval: &Dataset,
    log: impl FnMut(&EpochLog),
) -> Result<(FitReport, MetricsReport, u64)> {
    let mut trainer = Trainer::<f32>::new(cfg.clone(), train.header.vocabulary.len())?;
    let fit = trainer.fit(train, val, log)?;
    let mut best = Trainer::<f32>::from_checkpoint(&fit.best)?;
    let metrics = best.evaluate(eval)?;
    let seen = trainer.nonzero_feature_count() + best.nonzero_feature_count();
    Ok((fit, metrics, seen))
}

/// One fit per `p`, rows in the order given.
pub fn run_ratio_sweep(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    eval: &Dataset,
    p_list: &[f64],
    mut log: impl FnMut(f64, &EpochLog),
) -> Result<Vec<SweepRow>> {
    p_list
        .iter()
        .map(|&p| {
            let run = TrainConfig { p, ..cfg.clone() };
            let (fit, metrics, _) = train_and_evaluate(&run, train, val, eval, |e| log(p, e))?;
            Ok(SweepRow {
                p,
                best_epoch: fit.best_epoch,
                metrics,
            })
        })
        .collect()
}

/// Trains twice with identical seeds, once with every caption replaced by the
/// empty caption, and scores both.
pub fn run_caption_ablation(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    eval: &Dataset,
    mut log: impl FnMut(bool, &EpochLog),
) -> Result<AblationReport> {
    let normal = TrainConfig {
        drop_captions: false,
        ..cfg.clone()
    };
    let ablated = TrainConfig {
        drop_captions: true,
        ..cfg.clone()
    };
    let (_, with_caption, _) = train_and_evaluate(&normal, train, val, eval, |e| log(false, e))?;
    let (_, empty_caption, seen) = train_and_evaluate(&ablated, train, val, eval, |e| log(true, e))?;
    Ok(AblationReport {
        with_caption,
        empty_caption,
        ablated_nonzero_features: seen,
    })
}

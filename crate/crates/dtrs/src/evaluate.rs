//! Forecast metrics and the replication harness.
//!
//! RMSE and MAE are computed over every evaluated observation, including
//! cold-start subjects, matching how the benchmark study aggregates errors.
//! Interval coverage is reported twice: `picp` counts only warm points
//! (every mode index seen during training), because interval variance does
//! not account for the individual-term signal a cold prediction must omit;
//! `picp_all` includes cold points for completeness. The harness replays
//! simulate -> fit -> evaluate across seeds and aggregates mean and
//! standard deviation per metric.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{prediction_interval, IntervalEstimate};
use crate::pipeline::{fit_with_tuning, FitPipelineConfig, FittedModel};
use crate::simulate::{simulate, SimConfig};
use crate::solver::FitReport;
use crate::tensor::TemporalTensor;

/// Root-mean-square error of `(observed, predicted)` pairs.
pub fn rmse(pairs: &[(f64, f64)]) -> Result<f64> {
    nonempty(pairs.len(), "rmse")?;
    let ss: f64 = pairs.iter().map(|(y, yhat)| (y - yhat) * (y - yhat)).sum();
    Ok((ss / pairs.len() as f64).sqrt())
}

/// Mean absolute error of `(observed, predicted)` pairs.
pub fn mae(pairs: &[(f64, f64)]) -> Result<f64> {
    nonempty(pairs.len(), "mae")?;
    let sa: f64 = pairs.iter().map(|(y, yhat)| (y - yhat).abs()).sum();
    Ok(sa / pairs.len() as f64)
}

/// Fraction of observations falling inside their prediction interval.
pub fn picp(intervals: &[IntervalEstimate], truths: &[f64]) -> Result<f64> {
    nonempty(intervals.len(), "picp")?;
    if intervals.len() != truths.len() {
        return Err(Error::Shape {
            msg: format!(
                "{} intervals but {} observations",
                intervals.len(),
                truths.len()
            ),
        });
    }
    let hits = intervals
        .iter()
        .zip(truths)
        .filter(|(iv, &y)| iv.lower <= y && y <= iv.upper)
        .count();
    Ok(hits as f64 / intervals.len() as f64)
}

fn nonempty(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptySplit {
            msg: format!("{what} needs at least one evaluation pair"),
        });
    }
    Ok(())
}

/// Which subjects per mode were seen during training. Cells touching any
/// unseen subject are cold-start predictions.
#[derive(Debug, Clone)]
pub struct WarmIndex {
    observed: Vec<HashSet<u32>>,
}

impl WarmIndex {
    pub fn from_training(train: &TemporalTensor) -> Self {
        let mut observed: Vec<HashSet<u32>> = vec![HashSet::new(); train.dims().len()];
        for (cell, _) in train.cells() {
            for (k, &i) in cell.iter().enumerate() {
                observed[k].insert(i);
            }
        }
        WarmIndex { observed }
    }

    pub fn is_warm(&self, cell: &[u32]) -> bool {
        cell.len() == self.observed.len()
            && cell
                .iter()
                .zip(&self.observed)
                .all(|(i, seen)| seen.contains(i))
    }
}

/// Metrics over one tranche of a test period (time points share a rank).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeriodMetric {
    /// 1-based rank of the time point among distinct evaluated times.
    pub period: usize,
    pub rmse: f64,
    pub mae: f64,
}

/// Aggregate forecast quality of one model on one test split.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    /// Interval coverage over warm points, when intervals were requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub picp: Option<f64>,
    /// Interval coverage over all points including cold-start subjects.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub picp_all: Option<f64>,
    pub per_period: Vec<PeriodMetric>,
    pub n_evaluated: usize,
}

/// Scores a fitted model on a test tensor whose times are already on the
/// model's unit interval. Pass `warm` to separate cold-start coverage and
/// `miscoverage` (e.g. 0.05) to compute interval coverage at that level.
pub fn evaluate_model(
    model: &FittedModel,
    test: &TemporalTensor,
    warm: Option<&WarmIndex>,
    miscoverage: Option<f64>,
) -> Result<MetricReport> {
    if test.num_observations() == 0 {
        return Err(Error::EmptySplit {
            msg: "cannot evaluate on an empty test tensor".into(),
        });
    }
    let times = test.distinct_times();
    let rank_of = |t: f64| times.partition_point(|&u| u < t);

    let mut pairs = Vec::with_capacity(test.num_observations());
    let mut by_period: Vec<Vec<(f64, f64)>> = vec![Vec::new(); times.len()];
    let mut covered_all = 0usize;
    let mut covered_warm = 0usize;
    let mut n_warm = 0usize;
    for (cell, series) in test.cells() {
        let cell_warm = warm.map(|w| w.is_warm(cell)).unwrap_or(true);
        for (&t, &y) in series.times().iter().zip(series.values()) {
            let (yhat, inside) = match miscoverage {
                None => (
                    crate::model::predict_cell(&model.params, &model.scheme, &model.basis, cell, t)?,
                    false,
                ),
                Some(mis) => {
                    let iv = prediction_interval(
                        &model.params,
                        &model.scheme,
                        &model.basis,
                        &model.sandwich,
                        cell,
                        t,
                        mis,
                    )?;
                    (iv.yhat, iv.lower <= y && y <= iv.upper)
                }
            };
            pairs.push((y, yhat));
            by_period[rank_of(t)].push((y, yhat));
            if miscoverage.is_some() {
                covered_all += usize::from(inside);
                if cell_warm {
                    covered_warm += usize::from(inside);
                    n_warm += 1;
                }
            }
        }
    }

    let overall_rmse = rmse(&pairs)?;
    let overall_mae = mae(&pairs)?;
    debug_assert!(overall_rmse >= overall_mae - 1e-12);
    let per_period = by_period
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.is_empty())
        .map(|(i, p)| {
            Ok(PeriodMetric {
                period: i + 1,
                rmse: rmse(p)?,
                mae: mae(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len();
    let (picp, picp_all) = if miscoverage.is_some() {
        let all = covered_all as f64 / n as f64;
        let warm_cov = if n_warm > 0 {
            covered_warm as f64 / n_warm as f64
        } else {
            all
        };
        (Some(warm_cov), Some(all))
    } else {
        (None, None)
    };
    Ok(MetricReport {
        rmse: overall_rmse,
        mae: overall_mae,
        picp,
        picp_all,
        per_period,
        n_evaluated: n,
    })
}

/// One seed's worth of a replication study.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicationOutcome {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Mean and standard deviation per metric across completed replications.
#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub requested: usize,
    pub completed: usize,
    pub mean_rmse: f64,
    pub sd_rmse: f64,
    pub mean_mae: f64,
    pub sd_mae: f64,
    pub mean_picp: f64,
    pub sd_picp: f64,
    pub outcomes: Vec<ReplicationOutcome>,
}

impl BenchSummary {
    /// `mean(sd)` cell formatting used by the benchmark table.
    pub fn formatted(mean: f64, sd: f64) -> String {
        format!("{mean:.3}({sd:.3})")
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Runs `reps` independent simulate -> fit -> evaluate replications in
/// parallel. Replication `i` uses simulation seed `sim.seed + i` and fit
/// seed `fit_config.seed + i` (1-based), so the study is reproducible from
/// the two base seeds. Failed replications are recorded and excluded from
/// the aggregates with a warning.
pub fn run_replications(
    sim: &SimConfig,
    fit_config: &FitPipelineConfig,
    reps: usize,
    miscoverage: f64,
) -> Result<BenchSummary> {
    if reps == 0 {
        return Err(Error::Config {
            msg: "replication count must be at least 1".into(),
        });
    }
    sim.validate()?;
    fit_config.validate()?;

    let outcomes: Vec<ReplicationOutcome> = (1..=reps as u64)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|i| {
            let seed = sim.seed + i;
            let run = || -> Result<(MetricReport, FitReport, f64)> {
                let mut sim_i = *sim;
                sim_i.seed = seed;
                let mut fc = fit_config.clone();
                fc.seed = fit_config.seed + i;
                let data = simulate(&sim_i)?;
                let model = fit_with_tuning(&data.train, &data.scheme, &fc, (0.0, 1.0))?;
                let warm = WarmIndex::from_training(&data.train);
                let metrics =
                    evaluate_model(&model, &data.test, Some(&warm), Some(miscoverage))?;
                Ok((metrics, model.report, model.lambda))
            };
            match run() {
                Ok((metrics, fit, lambda)) => ReplicationOutcome {
                    seed,
                    metrics: Some(metrics),
                    fit: Some(fit),
                    lambda: Some(lambda),
                    error: None,
                },
                Err(e) => {
                    log::warn!("replication with seed {seed} failed: {e}");
                    ReplicationOutcome {
                        seed,
                        metrics: None,
                        fit: None,
                        lambda: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();

    let done: Vec<&MetricReport> = outcomes.iter().filter_map(|o| o.metrics.as_ref()).collect();
    if done.is_empty() {
        let first = outcomes
            .iter()
            .find_map(|o| o.error.clone())
            .unwrap_or_default();
        return Err(Error::InsufficientData {
            msg: format!("all {reps} replications failed; first error: {first}"),
        });
    }
    let (mean_rmse, sd_rmse) = mean_sd(&done.iter().map(|m| m.rmse).collect::<Vec<_>>());
    let (mean_mae, sd_mae) = mean_sd(&done.iter().map(|m| m.mae).collect::<Vec<_>>());
    let coverages: Vec<f64> = done.iter().filter_map(|m| m.picp).collect();
    let (mean_picp, sd_picp) = if coverages.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        mean_sd(&coverages)
    };
    Ok(BenchSummary {
        requested: reps,
        completed: done.len(),
        mean_rmse,
        sd_rmse,
        mean_mae,
        sd_mae,
        mean_picp,
        sd_picp,
        outcomes,
    })
}

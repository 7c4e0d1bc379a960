//! End-to-end fit orchestration.
//!
//! Wires the pieces in the order the CLI needs them: build the spline basis
//! from the training sample size, optionally estimate working-correlation
//! nuisance parameters from an independence-weighted pilot fit, optionally
//! tune the ridge penalty on a trailing-time validation split, run the
//! final fit on the full training data, and compute the sandwich covariance
//! for interval queries. The result bundles everything a downstream
//! prediction or evaluation call needs.

use serde::{Deserialize, Serialize};

use crate::correlation::{estimate_nuisance, CorrelationSpec, CorrelationStructure};
use crate::error::{Error, Result};
use crate::inference::{
    prediction_interval, sandwich_covariance, IntervalEstimate, SandwichCovariance,
};
use crate::model::{predict_cell, ModelParams};
use crate::solver::{fit, tune_lambda, FitOptions, FitReport, TuneReport};
use crate::spline::{build_basis, knot_count, KnotPlacement, SplineBasis};
use crate::tensor::{SubgroupScheme, TemporalTensor};

fn default_rank() -> usize {
    3
}
fn default_lambda() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-4
}
fn default_max_iter() -> usize {
    500
}
fn default_correlation() -> CorrelationStructure {
    CorrelationStructure::Independence
}
fn default_degree() -> usize {
    2
}
fn default_validation_times() -> usize {
    4
}
fn default_nuisance_rounds() -> usize {
    1
}

/// Knot placement choice exposed in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotRule {
    /// Knots at `i / (a + 1)`.
    #[default]
    Equispaced,
    /// Knots at empirical quantiles of the training times.
    Quantile,
}

/// Everything the end-to-end fit needs beyond the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitPipelineConfig {
    /// Number of individual trend components.
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Ridge penalty; used directly when `lambda_grid` is absent.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// When present, the penalty is picked from this grid by validation
    /// error on the last `validation_times` training time points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub seed: u64,
    /// Accept every improving block per step instead of only the best one.
    #[serde(default)]
    pub accept_all: bool,
    #[serde(default = "default_correlation")]
    pub correlation: CorrelationStructure,
    /// Fixed correlation parameter; when absent (and the structure needs
    /// one) it is estimated from pilot-fit residuals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Pilot fit / re-estimation rounds for nuisance parameters. Ignored
    /// for independence and for fixed `rho`.
    #[serde(default = "default_nuisance_rounds")]
    pub nuisance_rounds: usize,
    /// Spline degree (kappa).
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Interior knot count override; default grows with the sample size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<usize>,
    #[serde(default)]
    pub knot_rule: KnotRule,
    /// Trailing distinct time points held out during tuning.
    #[serde(default = "default_validation_times")]
    pub validation_times: usize,
}

impl Default for FitPipelineConfig {
    fn default() -> Self {
        FitPipelineConfig {
            rank: default_rank(),
            lambda: default_lambda(),
            lambda_grid: None,
            epsilon: default_epsilon(),
            max_iter: default_max_iter(),
            seed: 0,
            accept_all: false,
            correlation: default_correlation(),
            rho: None,
            nuisance_rounds: default_nuisance_rounds(),
            degree: default_degree(),
            knots: None,
            knot_rule: KnotRule::Equispaced,
            validation_times: default_validation_times(),
        }
    }
}

impl FitPipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() {
                return Err(Error::Config {
                    msg: "lambda_grid must not be empty".into(),
                });
            }
            if self.validation_times == 0 {
                return Err(Error::Config {
                    msg: "tuning needs at least one trailing validation time point".into(),
                });
            }
        }
        if let Some(rho) = self.rho {
            if !rho.is_finite() || rho.abs() >= 1.0 {
                return Err(Error::Bounds {
                    what: "fixed correlation rho".into(),
                    value: rho,
                    lo: -1.0,
                    hi: 1.0,
                });
            }
        }
        if self.degree == 0 {
            return Err(Error::Config {
                msg: "spline degree must be at least 1".into(),
            });
        }
        // rank / lambda / epsilon / max_iter share the solver's checks
        self.options(self.lambda).validate()
    }

    fn options(&self, lambda: f64) -> FitOptions {
        FitOptions {
            rank: self.rank,
            lambda,
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            seed: self.seed,
            accept_all: self.accept_all,
        }
    }
}

/// A fitted model with everything needed for prediction and intervals.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: ModelParams,
    pub scheme: SubgroupScheme,
    pub basis: SplineBasis,
    pub corr: CorrelationSpec,
    pub lambda: f64,
    /// Raw time span mapped onto the unit interval.
    pub time_range: (f64, f64),
    pub sandwich: SandwichCovariance,
    pub report: FitReport,
    pub tuning: Option<TuneReport>,
}

impl FittedModel {
    /// Maps a raw time into the model's unit interval.
    pub fn normalize_time(&self, raw: f64) -> Result<f64> {
        let (lo, hi) = self.time_range;
        let t = (raw - lo) / (hi - lo);
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Bounds {
                what: "query time".into(),
                value: raw,
                lo,
                hi,
            });
        }
        Ok(t)
    }

    /// Prediction at a cell and raw (unnormalized) time.
    pub fn predict(&self, cell: &[u32], raw_time: f64) -> Result<f64> {
        let t = self.normalize_time(raw_time)?;
        predict_cell(&self.params, &self.scheme, &self.basis, cell, t)
    }

    /// Pointwise prediction interval at a cell, raw time, and miscoverage
    /// level (e.g. 0.05 for a 95% interval).
    pub fn interval(
        &self,
        cell: &[u32],
        raw_time: f64,
        miscoverage: f64,
    ) -> Result<IntervalEstimate> {
        let t = self.normalize_time(raw_time)?;
        prediction_interval(
            &self.params,
            &self.scheme,
            &self.basis,
            &self.sandwich,
            cell,
            t,
            miscoverage,
        )
    }
}

/// Residuals of `params` on `tensor`, grouped per cell in iteration order.
fn residuals_by_cell(
    params: &ModelParams,
    tensor: &TemporalTensor,
    scheme: &SubgroupScheme,
    basis: &SplineBasis,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(tensor.num_cells());
    for (cell, series) in tensor.cells() {
        let r: Result<Vec<f64>> = series
            .times()
            .iter()
            .zip(series.values())
            .map(|(&t, &y)| Ok(y - predict_cell(params, scheme, basis, cell, t)?))
            .collect();
        out.push(r?);
    }
    Ok(out)
}

/// Fits the model end to end on normalized-time training data.
///
/// `time_range` is carried through to the result so callers can query with
/// raw times; pass `(0.0, 1.0)` when the data is already on the unit
/// interval.
pub fn fit_with_tuning(
    train: &TemporalTensor,
    scheme: &SubgroupScheme,
    config: &FitPipelineConfig,
    time_range: (f64, f64),
) -> Result<FittedModel> {
    config.validate()?;
    if train.num_observations() == 0 {
        return Err(Error::EmptySplit {
            msg: "cannot fit an empty training tensor".into(),
        });
    }

    // basis size grows with the training sample size unless overridden
    let num_knots = config
        .knots
        .unwrap_or_else(|| knot_count(train.num_observations(), config.degree));
    let times = train.distinct_times();
    let placement = match config.knot_rule {
        KnotRule::Equispaced => KnotPlacement::Equispaced,
        KnotRule::Quantile => KnotPlacement::Quantile(&times),
    };
    let basis = build_basis(config.degree, num_knots, placement)?;

    // working correlation: fixed, estimated from a pilot fit, or identity
    let needs_rho = config.correlation != CorrelationStructure::Independence;
    let mut corr = match config.rho {
        Some(rho) if needs_rho => CorrelationSpec::new(config.correlation, rho, 1.0)?,
        _ => CorrelationSpec::independence(),
    };
    if needs_rho && config.rho.is_none() {
        if config.nuisance_rounds == 0 {
            return Err(Error::Config {
                msg: format!(
                    "correlation {} needs a fixed rho or at least one nuisance round",
                    config.correlation
                ),
            });
        }
        for _ in 0..config.nuisance_rounds {
            let (pilot, _) = fit(train, scheme, &basis, &corr, &config.options(config.lambda))?;
            let resid = residuals_by_cell(&pilot, train, scheme, &basis)?;
            corr = estimate_nuisance(resid.iter().map(Vec::as_slice), config.correlation)?;
            log::info!(
                "estimated {} nuisance: rho={:.4}, variance={:.4}",
                config.correlation,
                corr.rho,
                corr.variance
            );
        }
    }

    // ridge selection on a trailing-time validation split
    let (lambda, tuning) = match &config.lambda_grid {
        None => (config.lambda, None),
        Some(grid) => {
            let (head, tail) = train.split_trailing_times(config.validation_times)?;
            let report = tune_lambda(
                &head,
                &tail,
                scheme,
                &basis,
                &corr,
                &config.options(config.lambda),
                grid,
            )?;
            (report.best_lambda, Some(report))
        }
    };

    let (params, report) = fit(train, scheme, &basis, &corr, &config.options(lambda))?;
    let sandwich = sandwich_covariance(&params, train, scheme, &basis, &corr, lambda)?;
    Ok(FittedModel {
        params,
        scheme: scheme.clone(),
        basis,
        corr,
        lambda,
        time_range,
        sandwich,
        report,
        tuning,
    })
}

//! Stable on-disk JSON formats.
//!
//! Output files must be byte-identical across platforms and runs given the
//! same inputs, so golden-file tests stay meaningful: object keys are
//! sorted (values are routed through a tree whose maps sort keys) and every
//! float is written in scientific notation with 12 significant digits.
//! Model files carry a format tag and are fully validated on load.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correlation::CorrelationSpec;
use crate::error::{Error, Result};
use crate::inference::SandwichCovariance;
use crate::model::ModelParams;
use crate::pipeline::FittedModel;
use crate::simulate::SimTruth;
use crate::solver::FitReport;
use crate::spline::SplineBasis;
use crate::tensor::{SubgroupScheme, TimeGroups};

/// Compact JSON with every float at 12 significant digits.
struct FixedFloats;

impl serde_json::ser::Formatter for FixedFloats {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.11e}")
    }
}

/// Serializes any value to deterministic JSON: sorted object keys, fixed
/// float precision, trailing newline.
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String> {
    // route through a Value so map keys come out sorted
    let tree = serde_json::to_value(value).map_err(|e| Error::Json {
        path: "<memory>".into(),
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedFloats);
    tree.serialize(&mut ser).map_err(|e| Error::Json {
        path: "<memory>".into(),
        msg: e.to_string(),
    })?;
    out.push(b'\n');
    String::from_utf8(out).map_err(|e| Error::Json {
        path: "<memory>".into(),
        msg: e.to_string(),
    })
}

/// Writes a value as stable JSON to a file.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = to_stable_json(value)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Reads and deserializes a JSON file.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Version tag of the model file layout.
pub const MODEL_FORMAT: &str = "dtrs-model/1";
/// Version tag of the simulation truth layout.
pub const TRUTH_FORMAT: &str = "dtrs-truth/1";

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape {
            msg: format!("{what} rows have inconsistent lengths"),
        });
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// On-disk layout of a fitted model: parameters, subgroup scheme, basis,
/// working correlation, coefficient covariance, and fit diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub dims: Vec<u32>,
    pub factors: Vec<Vec<Vec<f64>>>,
    pub group_factors: Vec<Vec<f64>>,
    pub trend_coefs: Vec<Vec<f64>>,
    pub group_trend_coefs: Vec<Vec<f64>>,
    /// 0-based subgroup label per subject per mode.
    pub mode_groups: Vec<Vec<u32>>,
    pub time_groups: TimeGroups,
    pub degree: usize,
    pub knots: Vec<f64>,
    pub correlation: CorrelationSpec,
    pub lambda: f64,
    pub time_range: (f64, f64),
    pub psi_hat: Vec<Vec<f64>>,
    pub phi_hat: Vec<Vec<f64>>,
    pub cov_gamma: Vec<Vec<f64>>,
    pub sigma2_train: f64,
    pub asymmetry: f64,
    pub report: FitReport,
}

impl ModelFile {
    pub fn from_model(model: &FittedModel) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            dims: model
                .params
                .factors
                .iter()
                .map(|f| f.nrows() as u32)
                .collect(),
            factors: model.params.factors.iter().map(matrix_rows).collect(),
            group_factors: model
                .params
                .group_factors
                .iter()
                .map(|q| q.iter().copied().collect())
                .collect(),
            trend_coefs: matrix_rows(&model.params.trend_coefs),
            group_trend_coefs: matrix_rows(&model.params.group_trend_coefs),
            mode_groups: (0..model.scheme.order())
                .map(|k| model.scheme.mode_group_labels(k).to_vec())
                .collect(),
            time_groups: model.scheme.time_groups().clone(),
            degree: model.basis.degree(),
            knots: model.basis.knots().to_vec(),
            correlation: model.corr,
            lambda: model.lambda,
            time_range: model.time_range,
            psi_hat: matrix_rows(&model.sandwich.psi_hat),
            phi_hat: matrix_rows(&model.sandwich.phi_hat),
            cov_gamma: matrix_rows(&model.sandwich.cov_gamma),
            sigma2_train: model.sandwich.sigma2_train,
            asymmetry: model.sandwich.asymmetry,
            report: model.report.clone(),
        }
    }

    /// Reconstructs the working model, validating shapes and ranges.
    pub fn into_model(self) -> Result<FittedModel> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Config {
                msg: format!(
                    "unsupported model format {:?}, expected {MODEL_FORMAT:?}",
                    self.format
                ),
            });
        }
        let basis = SplineBasis::new(self.degree, self.knots)?;
        let scheme = SubgroupScheme::new(self.mode_groups, self.time_groups)?;
        let factors = self
            .factors
            .iter()
            .map(|f| matrix_from_rows(f, "factor"))
            .collect::<Result<Vec<_>>>()?;
        let group_factors = self
            .group_factors
            .into_iter()
            .map(DVector::from_vec)
            .collect();
        let params = ModelParams {
            factors,
            group_factors,
            trend_coefs: matrix_from_rows(&self.trend_coefs, "trend coefficient")?,
            group_trend_coefs: matrix_from_rows(&self.group_trend_coefs, "subgroup trend")?,
        };
        params.validate(&self.dims, &scheme, &basis)?;
        let corr = CorrelationSpec::new(
            self.correlation.structure,
            self.correlation.rho,
            self.correlation.variance,
        )?;
        if !(self.lambda >= 0.0) {
            return Err(Error::Bounds {
                what: "ridge penalty".into(),
                value: self.lambda,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        let (lo, hi) = self.time_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config {
                msg: format!("time_range ({lo}, {hi}) must be finite with lo < hi"),
            });
        }
        let dim = (params.rank() + scheme.num_time_groups()) * basis.size();
        let cov_gamma = matrix_from_rows(&self.cov_gamma, "coefficient covariance")?;
        let psi_hat = matrix_from_rows(&self.psi_hat, "normal matrix")?;
        let phi_hat = matrix_from_rows(&self.phi_hat, "score outer product")?;
        for (name, m) in [
            ("cov_gamma", &cov_gamma),
            ("psi_hat", &psi_hat),
            ("phi_hat", &phi_hat),
        ] {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::Shape {
                    msg: format!(
                        "{name} is {}x{}, model needs {dim}x{dim}",
                        m.nrows(),
                        m.ncols()
                    ),
                });
            }
        }
        if !(self.sigma2_train >= 0.0) {
            return Err(Error::Bounds {
                what: "training noise variance".into(),
                value: self.sigma2_train,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        Ok(FittedModel {
            params,
            scheme,
            basis,
            corr,
            lambda: self.lambda,
            time_range: self.time_range,
            sandwich: SandwichCovariance {
                cov_gamma,
                psi_hat,
                phi_hat,
                sigma2_train: self.sigma2_train,
                asymmetry: self.asymmetry,
            },
            report: self.report,
            // the tuning table lives in the tune subcommand's report file,
            // not the model, so tuned and directly fitted models match
            tuning: None,
        })
    }
}

/// Saves a fitted model as stable JSON.
pub fn save_model(path: &Path, model: &FittedModel) -> Result<()> {
    write_json(path, &ModelFile::from_model(model))
}

/// Loads and validates a fitted model.
pub fn load_model(path: &Path) -> Result<FittedModel> {
    read_json::<ModelFile>(path)?.into_model()
}

/// On-disk layout of a simulation's generating truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub format: String,
    pub factors: Vec<Vec<Vec<f64>>>,
    pub group_factors: Vec<Vec<f64>>,
}

impl TruthFile {
    pub fn from_truth(truth: &SimTruth) -> Self {
        TruthFile {
            format: TRUTH_FORMAT.into(),
            factors: truth.factors.iter().map(matrix_rows).collect(),
            group_factors: truth
                .group_factors
                .iter()
                .map(|q| q.iter().copied().collect())
                .collect(),
        }
    }
}

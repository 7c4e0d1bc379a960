//! Sandwich covariance of the spline coefficients and pointwise prediction
//! intervals.
//!
//! The spline coefficient vector stacks the trend rows and the
//! subgroup-trend rows; each observation's design row holds the basis
//! evaluation scaled by the fitted loading products. The covariance is the
//! ridge-adjusted sandwich `(Psi + lambda I)^-1 Phi (Psi + lambda I)^-1`
//! with `Psi` the whitened normal matrix and `Phi` the outer product of
//! per-cell score vectors, which is robust to misspecified working
//! correlation. Prediction variance adds the training noise estimate, and
//! interval endpoints use a rational approximation of the standard normal
//! quantile, so no statistics library is required.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::correlation::CorrelationSpec;
use crate::error::{Error, Result};
use crate::model::{predict_cell, ModelParams};
use crate::spline::SplineBasis;
use crate::tensor::{SubgroupScheme, TemporalTensor};

/// Sandwich covariance of the stacked spline coefficients.
#[derive(Debug, Clone)]
pub struct SandwichCovariance {
    /// `(rank + time groups) * basis size` square covariance matrix.
    pub cov_gamma: DMatrix<f64>,
    /// Whitened normal matrix (bread).
    pub psi_hat: DMatrix<f64>,
    /// Summed outer products of per-cell scores (meat).
    pub phi_hat: DMatrix<f64>,
    /// Training mean squared error (uncorrected).
    pub sigma2_train: f64,
    /// Largest relative asymmetry of the sandwich before symmetrization.
    pub asymmetry: f64,
}

/// A symmetric pointwise prediction interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalEstimate {
    pub yhat: f64,
    pub lower: f64,
    pub upper: f64,
    pub se_prediction: f64,
    /// Nominal coverage, `1 - miscoverage`.
    pub level: f64,
    /// True when numerical noise produced a negative coefficient variance
    /// that was clamped at zero.
    pub clamped: bool,
}

/// Stacked coefficient dimension: trend rows then subgroup-trend rows.
fn gamma_dim(params: &ModelParams, scheme: &SubgroupScheme, basis: &SplineBasis) -> usize {
    (params.rank() + scheme.num_time_groups()) * basis.size()
}

/// Writes the design row of one observation into `row`: basis values scaled
/// by the individual loading product per component block, then by the
/// subgroup loading product in the block of the observation's time group.
fn fill_design_row(
    params: &ModelParams,
    scheme: &SubgroupScheme,
    cell: &[u32],
    basis_row: &[f64],
    time_group: usize,
    row: &mut [f64],
) -> Result<()> {
    let m = basis_row.len();
    row.fill(0.0);
    for j in 0..params.rank() {
        let u = params.factor_product(cell, j);
        if u != 0.0 {
            for (i, &b) in basis_row.iter().enumerate() {
                row[j * m + i] = u * b;
            }
        }
    }
    let uq = params.group_product(scheme, cell)?;
    if uq != 0.0 {
        let off = (params.rank() + time_group) * m;
        for (i, &b) in basis_row.iter().enumerate() {
            row[off + i] = uq * b;
        }
    }
    Ok(())
}

/// Computes the sandwich covariance of the spline coefficients at the given
/// parameters, treating the loading products as fixed.
pub fn sandwich_covariance(
    params: &ModelParams,
    tensor: &TemporalTensor,
    scheme: &SubgroupScheme,
    basis: &SplineBasis,
    corr: &CorrelationSpec,
    lambda: f64,
) -> Result<SandwichCovariance> {
    if lambda < 0.0 {
        return Err(Error::Bounds {
            what: "ridge penalty".into(),
            value: lambda,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    params.validate(tensor.dims(), scheme, basis)?;
    if tensor.num_observations() == 0 {
        return Err(Error::EmptySplit {
            msg: "cannot form a sandwich covariance from an empty tensor".into(),
        });
    }

    let m = basis.size();
    let dim = gamma_dim(params, scheme, basis);
    let mut psi = DMatrix::<f64>::zeros(dim, dim);
    let mut phi = DMatrix::<f64>::zeros(dim, dim);
    let mut sq_resid = 0.0;
    let mut basis_row = vec![0.0; m];

    for (cell, series) in tensor.cells() {
        let n = series.len();
        corr.check_cell(n)?;
        let mut design = vec![0.0; n * dim];
        let mut resid = Vec::with_capacity(n);
        for (t_idx, (&t, &y)) in series.times().iter().zip(series.values()).enumerate() {
            basis.eval_into(t, &mut basis_row)?;
            fill_design_row(
                params,
                scheme,
                cell,
                &basis_row,
                scheme.time_group(t),
                &mut design[t_idx * dim..(t_idx + 1) * dim],
            )?;
            let pred = predict_cell(params, scheme, basis, cell, t)?;
            resid.push(y - pred);
            sq_resid += (y - pred) * (y - pred);
        }
        corr.whiten_rows(n, dim, &mut design)?;
        corr.whiten_vector(&mut resid)?;
        let white = DMatrix::from_row_slice(n, dim, &design);
        let rvec = DVector::from_vec(resid);
        psi.gemm_tr(1.0, &white, &white, 1.0);
        let score = white.transpose() * &rvec;
        phi.ger(1.0, &score, &score, 1.0);
    }

    // bread: (psi + lambda I)^-1 via symmetric factorization
    let mut bread = psi.clone();
    for i in 0..dim {
        bread[(i, i)] += lambda;
    }
    let ch = bread.cholesky().ok_or_else(|| Error::RidgeDegenerate {
        block: "spline coefficient covariance".into(),
    })?;
    let half = ch.solve(&phi);
    let raw = ch.solve(&half.transpose());
    let mut asymmetry: f64 = 0.0;
    let scale = raw.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..dim {
        for jj in (i + 1)..dim {
            asymmetry = asymmetry.max((raw[(i, jj)] - raw[(jj, i)]).abs() / scale);
        }
    }
    let cov = (&raw + raw.transpose()) * 0.5;
    Ok(SandwichCovariance {
        cov_gamma: cov,
        psi_hat: psi,
        phi_hat: phi,
        sigma2_train: sq_resid / tensor.num_observations() as f64,
        asymmetry,
    })
}

/// Pointwise prediction interval at one cell and time. `miscoverage` is the
/// complement of the nominal level: 0.05 gives a 95% interval.
pub fn prediction_interval(
    params: &ModelParams,
    scheme: &SubgroupScheme,
    basis: &SplineBasis,
    sandwich: &SandwichCovariance,
    cell: &[u32],
    t: f64,
    miscoverage: f64,
) -> Result<IntervalEstimate> {
    if !(miscoverage > 0.0 && miscoverage < 1.0) {
        return Err(Error::Bounds {
            what: "interval miscoverage".into(),
            value: miscoverage,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let dim = gamma_dim(params, scheme, basis);
    if sandwich.cov_gamma.nrows() != dim || sandwich.cov_gamma.ncols() != dim {
        return Err(Error::Shape {
            msg: format!(
                "covariance is {}x{}, model needs {dim}x{dim}",
                sandwich.cov_gamma.nrows(),
                sandwich.cov_gamma.ncols()
            ),
        });
    }
    let yhat = predict_cell(params, scheme, basis, cell, t)?;
    let basis_row = basis.eval(t)?;
    let mut row = vec![0.0; dim];
    fill_design_row(
        params,
        scheme,
        cell,
        &basis_row,
        scheme.time_group(t),
        &mut row,
    )?;
    let w = DVector::from_vec(row);
    let coef_var = (w.transpose() * &sandwich.cov_gamma * &w)[(0, 0)];
    let clamped = coef_var < 0.0;
    let var = coef_var.max(0.0) + sandwich.sigma2_train;
    let se = var.sqrt();
    let z = normal_quantile(1.0 - miscoverage / 2.0)?;
    Ok(IntervalEstimate {
        yhat,
        lower: yhat - z * se,
        upper: yhat + z * se,
        se_prediction: se,
        level: 1.0 - miscoverage,
        clamped,
    })
}

/// Standard normal quantile by the rational approximation of Wichura's
/// algorithm, accurate to well below 1e-9 over (0, 1).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Bounds {
            what: "quantile probability".into(),
            value: p,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
            + 6.726_577_092_700_870_1e4)
            * r
            + 4.592_195_393_154_987_2e4)
            * r
            + 1.373_169_376_550_946_1e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_608)
            * q;
        let den = ((((((5.226_495_278_852_545_5e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return Ok(num / den);
    }
    let tail_p = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail_p.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_8)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_3e-2)
            * r
            + 2.965_605_718_285_048_9e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_445_9e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_132e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    Ok(if q < 0.0 { -value } else { value })
}

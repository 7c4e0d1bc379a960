//! Working correlation structures for within-cell residual dependence.
//!
//! Observations of one tensor cell form a short time series; the estimator
//! weights each cell by the inverse of a working covariance `sigma^2 * R`,
//! where `R` is independence, exchangeable, or AR-1 over the cell's
//! observations in time order. Weighting happens through whitening: the
//! transform `x -> L^-1 x` with `L L^T = sigma^2 R` turns generalized least
//! squares into ordinary least squares on whitened rows. Both AR-1 and
//! exchangeable admit closed-form whitening, so no per-cell factorization
//! is ever needed.
//!
//! Nuisance parameters (`rho`, `sigma^2`) are estimated from residuals by
//! moment estimators and then held fixed; see [`estimate_nuisance`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bound used when clamping moment estimates of `rho`.
pub const RHO_CLAMP: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationStructure {
    Independence,
    Exchangeable,
    Ar1,
}

impl std::fmt::Display for CorrelationStructure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            CorrelationStructure::Independence => "independence",
            CorrelationStructure::Exchangeable => "exchangeable",
            CorrelationStructure::Ar1 => "ar1",
        };
        f.write_str(name)
    }
}

/// A fully specified working covariance `sigma^2 * R(rho)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationSpec {
    pub structure: CorrelationStructure,
    pub rho: f64,
    pub variance: f64,
}

impl CorrelationSpec {
    /// Unit-variance independence weights (ordinary least squares).
    pub fn independence() -> Self {
        CorrelationSpec {
            structure: CorrelationStructure::Independence,
            rho: 0.0,
            variance: 1.0,
        }
    }

    /// Validates `|rho| < 1` and `variance > 0`; independence pins `rho` to 0.
    pub fn new(structure: CorrelationStructure, rho: f64, variance: f64) -> Result<Self> {
        if !rho.is_finite() || rho.abs() >= 1.0 {
            return Err(Error::Bounds {
                what: "correlation rho".into(),
                value: rho,
                lo: -1.0,
                hi: 1.0,
            });
        }
        if !variance.is_finite() || variance <= 0.0 {
            return Err(Error::Bounds {
                what: "working variance".into(),
                value: variance,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        let rho = match structure {
            CorrelationStructure::Independence => 0.0,
            _ => rho,
        };
        Ok(CorrelationSpec {
            structure,
            rho,
            variance,
        })
    }

    /// The `n x n` correlation matrix `R` (without the variance factor).
    pub fn correlation_matrix(&self, n: usize) -> Result<DMatrix<f64>> {
        self.check_cell(n)?;
        let r = self.rho;
        Ok(match self.structure {
            CorrelationStructure::Independence => DMatrix::identity(n, n),
            CorrelationStructure::Exchangeable => {
                DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { r })
            }
            CorrelationStructure::Ar1 => {
                DMatrix::from_fn(n, n, |i, j| r.powi((i as i32 - j as i32).abs()))
            }
        })
    }

    /// Positive definiteness of `R` for a cell of `n` observations.
    /// Exchangeable requires `rho > -1/(n-1)`; the others hold for `|rho| < 1`.
    pub fn check_cell(&self, n: usize) -> Result<()> {
        if self.structure == CorrelationStructure::Exchangeable && n >= 2 {
            let lo = -1.0 / (n as f64 - 1.0);
            if self.rho <= lo {
                return Err(Error::NotPositiveDefinite {
                    msg: format!(
                        "exchangeable rho {} requires rho > {lo:.6} for cells of {n} observations",
                        self.rho
                    ),
                });
            }
        }
        Ok(())
    }

    /// Whitens a length-`n` vector in place: `x -> L^-1 x` with
    /// `L L^T = sigma^2 R`. After whitening, `|x|^2` equals the generalized
    /// quadratic form `x^T (sigma^2 R)^-1 x` of the original vector.
    pub fn whiten_vector(&self, x: &mut [f64]) -> Result<()> {
        let n = x.len();
        self.check_cell(n)?;
        let sd = self.variance.sqrt();
        match self.structure {
            CorrelationStructure::Independence => {
                for v in x.iter_mut() {
                    *v /= sd;
                }
            }
            CorrelationStructure::Ar1 => {
                let scale = (1.0 - self.rho * self.rho).sqrt();
                for i in (1..n).rev() {
                    x[i] = (x[i] - self.rho * x[i - 1]) / scale / sd;
                }
                if n > 0 {
                    x[0] /= sd;
                }
            }
            CorrelationStructure::Exchangeable => {
                if n == 0 {
                    return Ok(());
                }
                let mean = x.iter().sum::<f64>() / n as f64;
                let within = (1.0 - self.rho).sqrt();
                let between = (1.0 + (n as f64 - 1.0) * self.rho).sqrt();
                for v in x.iter_mut() {
                    *v = ((*v - mean) / within + mean / between) / sd;
                }
            }
        }
        Ok(())
    }

    /// Whitens every column of a row-major `n_rows x n_cols` matrix in place.
    pub fn whiten_rows(&self, n_rows: usize, n_cols: usize, data: &mut [f64]) -> Result<()> {
        debug_assert_eq!(data.len(), n_rows * n_cols);
        self.check_cell(n_rows)?;
        let sd = self.variance.sqrt();
        match self.structure {
            CorrelationStructure::Independence => {
                for v in data.iter_mut() {
                    *v /= sd;
                }
            }
            CorrelationStructure::Ar1 => {
                let scale = (1.0 - self.rho * self.rho).sqrt();
                for i in (1..n_rows).rev() {
                    for c in 0..n_cols {
                        let prev = data[(i - 1) * n_cols + c];
                        let cur = &mut data[i * n_cols + c];
                        *cur = (*cur - self.rho * prev) / scale / sd;
                    }
                }
                for v in data.iter_mut().take(n_cols) {
                    *v /= sd;
                }
            }
            CorrelationStructure::Exchangeable => {
                if n_rows == 0 {
                    return Ok(());
                }
                let within = (1.0 - self.rho).sqrt();
                let between = (1.0 + (n_rows as f64 - 1.0) * self.rho).sqrt();
                for c in 0..n_cols {
                    let mut mean = 0.0;
                    for i in 0..n_rows {
                        mean += data[i * n_cols + c];
                    }
                    mean /= n_rows as f64;
                    for i in 0..n_rows {
                        let v = &mut data[i * n_cols + c];
                        *v = ((*v - mean) / within + mean / between) / sd;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Moment estimation of the nuisance parameters from per-cell residual
/// series (each slice in within-cell time order).
///
/// The variance is the mean squared residual over all observations. For
/// AR-1, `rho` is the lag-1 moment ratio `sum r_t r_(t+1) / sum_(t<n) r_t^2`
/// pooled over cells; for exchangeable it is the mean pairwise product
/// normalized by the variance. Estimates of `rho` are clamped to
/// `[-0.99, 0.99]`. Structures with a `rho` require at least one cell with
/// two or more observations.
pub fn estimate_nuisance<'a, I>(cells: I, structure: CorrelationStructure) -> Result<CorrelationSpec>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut total_sq = 0.0;
    let mut total_n = 0usize;
    // ar1 accumulators
    let mut lag_num = 0.0;
    let mut lag_den = 0.0;
    // exchangeable accumulators
    let mut pair_sum = 0.0;
    let mut pair_count = 0u64;

    for cell in cells {
        let n = cell.len();
        total_n += n;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for &r in cell {
            sum += r;
            sumsq += r * r;
        }
        total_sq += sumsq;
        if n >= 2 {
            for t in 0..n - 1 {
                lag_num += cell[t] * cell[t + 1];
                lag_den += cell[t] * cell[t];
            }
            pair_sum += (sum * sum - sumsq) / 2.0;
            pair_count += (n * (n - 1) / 2) as u64;
        }
    }

    if total_n == 0 {
        return Err(Error::InsufficientData {
            msg: "no residuals supplied for nuisance estimation".into(),
        });
    }
    let variance = total_sq / total_n as f64;
    if variance <= 0.0 {
        return Err(Error::InsufficientData {
            msg: "all residuals are zero; working variance is unidentified".into(),
        });
    }

    let rho = match structure {
        CorrelationStructure::Independence => 0.0,
        CorrelationStructure::Ar1 => {
            if lag_den == 0.0 && lag_num == 0.0 && pair_count == 0 {
                return Err(Error::InsufficientData {
                    msg: "ar1 rho needs at least one cell with two observations".into(),
                });
            }
            let raw = if lag_den > 0.0 { lag_num / lag_den } else { 0.0 };
            raw.clamp(-RHO_CLAMP, RHO_CLAMP)
        }
        CorrelationStructure::Exchangeable => {
            if pair_count == 0 {
                return Err(Error::InsufficientData {
                    msg: "exchangeable rho needs at least one cell with two observations".into(),
                });
            }
            let raw = pair_sum / pair_count as f64 / variance;
            raw.clamp(-RHO_CLAMP, RHO_CLAMP)
        }
    };

    CorrelationSpec::new(structure, rho, variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn quad_form(spec: &CorrelationSpec, x: &[f64]) -> f64 {
        let n = x.len();
        let sigma = spec.correlation_matrix(n).unwrap() * spec.variance;
        let inv = sigma.try_inverse().unwrap();
        let xv = DVector::from_column_slice(x);
        (xv.transpose() * inv * xv)[(0, 0)]
    }

    #[test]
    fn correlation_matrices_match_definitions() {
        let spec = CorrelationSpec::new(CorrelationStructure::Ar1, 0.5, 1.0).unwrap();
        let r = spec.correlation_matrix(3).unwrap();
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0],
        );
        assert_abs_diff_eq!(r, expected, epsilon = 1e-15);

        let spec = CorrelationSpec::new(CorrelationStructure::Exchangeable, 0.5, 1.0).unwrap();
        let r = spec.correlation_matrix(3).unwrap();
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0]);
        assert_abs_diff_eq!(r, expected, epsilon = 1e-15);

        let spec = CorrelationSpec::independence();
        assert_eq!(spec.correlation_matrix(4).unwrap(), DMatrix::identity(4, 4));
    }

    #[test]
    fn matrices_are_positive_definite() {
        // exchangeable with negative rho is only valid for rho > -1/(n-1)
        for (structure, rho) in [
            (CorrelationStructure::Exchangeable, -0.05),
            (CorrelationStructure::Exchangeable, 0.0),
            (CorrelationStructure::Exchangeable, 0.3),
            (CorrelationStructure::Exchangeable, 0.99),
            (CorrelationStructure::Ar1, -0.6),
            (CorrelationStructure::Ar1, 0.0),
            (CorrelationStructure::Ar1, 0.85),
            (CorrelationStructure::Ar1, 0.99),
        ] {
            let spec = CorrelationSpec::new(structure, rho, 1.0).unwrap();
            for n in [1usize, 2, 5, 12] {
                let r = spec.correlation_matrix(n).unwrap();
                let eig = r.symmetric_eigenvalues();
                assert!(
                    eig.iter().all(|&e| e > 0.0),
                    "{structure} rho={rho} n={n} eigenvalues {eig:?}"
                );
            }
        }
    }

    #[test]
    fn exchangeable_rejects_rho_below_cell_bound() {
        let spec = CorrelationSpec::new(CorrelationStructure::Exchangeable, -0.4, 1.0).unwrap();
        assert!(spec.check_cell(2).is_ok());
        let err = spec.correlation_matrix(5).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn spec_validation_rejects_bad_parameters() {
        assert!(CorrelationSpec::new(CorrelationStructure::Ar1, 1.0, 1.0).is_err());
        assert!(CorrelationSpec::new(CorrelationStructure::Ar1, f64::NAN, 1.0).is_err());
        assert!(CorrelationSpec::new(CorrelationStructure::Ar1, 0.5, 0.0).is_err());
        assert!(CorrelationSpec::new(CorrelationStructure::Ar1, 0.5, -1.0).is_err());
    }

    #[test]
    fn whitening_reproduces_generalized_quadratic_form() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for (structure, rho, variance) in [
            (CorrelationStructure::Independence, 0.0, 2.5),
            (CorrelationStructure::Exchangeable, 0.4, 0.7),
            (CorrelationStructure::Exchangeable, -0.05, 1.3),
            (CorrelationStructure::Ar1, 0.85, 2.0),
            (CorrelationStructure::Ar1, -0.6, 0.5),
        ] {
            let spec = CorrelationSpec::new(structure, rho, variance).unwrap();
            for n in [1usize, 2, 7, 15] {
                let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let expected = quad_form(&spec, &x);
                let mut w = x.clone();
                spec.whiten_vector(&mut w).unwrap();
                let got: f64 = w.iter().map(|v| v * v).sum();
                assert_abs_diff_eq!(got, expected, epsilon = 1e-10 * expected.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matrix_whitening_matches_columnwise_vector_whitening() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let spec = CorrelationSpec::new(CorrelationStructure::Ar1, 0.6, 1.7).unwrap();
        let (n, c) = (6usize, 3usize);
        let data: Vec<f64> = (0..n * c).map(|_| rng.sample(StandardNormal)).collect();
        let mut whole = data.clone();
        spec.whiten_rows(n, c, &mut whole).unwrap();
        for col in 0..c {
            let mut column: Vec<f64> = (0..n).map(|i| data[i * c + col]).collect();
            spec.whiten_vector(&mut column).unwrap();
            for i in 0..n {
                assert_abs_diff_eq!(whole[i * c + col], column[i], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn nuisance_estimates_for_tiny_cases() {
        // lag-1 ratio of (1,1,1) is 1, clamped to 0.99
        let cells: Vec<&[f64]> = vec![&[1.0, 1.0, 1.0]];
        let spec = estimate_nuisance(cells, CorrelationStructure::Ar1).unwrap();
        assert_abs_diff_eq!(spec.rho, 0.99, epsilon = 1e-15);
        assert_abs_diff_eq!(spec.variance, 1.0, epsilon = 1e-15);

        let cells: Vec<&[f64]> = vec![&[1.0, -1.0]];
        let spec = estimate_nuisance(cells, CorrelationStructure::Independence).unwrap();
        assert_eq!(spec.rho, 0.0);
        assert_abs_diff_eq!(spec.variance, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn nuisance_estimation_requires_pairs() {
        let singletons: Vec<&[f64]> = vec![&[1.0], &[2.0], &[-1.0]];
        for structure in [
            CorrelationStructure::Exchangeable,
            CorrelationStructure::Ar1,
        ] {
            let err = estimate_nuisance(singletons.clone(), structure).unwrap_err();
            assert!(matches!(err, Error::InsufficientData { .. }));
        }
        // independence is fine with singletons
        assert!(estimate_nuisance(singletons, CorrelationStructure::Independence).is_ok());

        let empty: Vec<&[f64]> = vec![];
        assert!(estimate_nuisance(empty, CorrelationStructure::Independence).is_err());
    }

    #[test]
    fn ar1_moment_estimator_recovers_rho() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let rho = 0.85;
        let scale = (1.0f64 - rho * rho).sqrt();
        let mut cells: Vec<Vec<f64>> = Vec::new();
        for _ in 0..400 {
            let mut x = vec![0.0; 26];
            x[0] = rng.sample(StandardNormal);
            for t in 1..26 {
                let z: f64 = rng.sample(StandardNormal);
                x[t] = rho * x[t - 1] + scale * z;
            }
            cells.push(x);
        }
        let spec = estimate_nuisance(
            cells.iter().map(|c| c.as_slice()),
            CorrelationStructure::Ar1,
        )
        .unwrap();
        assert!((spec.rho - rho).abs() < 0.05, "rho estimate {}", spec.rho);
        assert!((spec.variance - 1.0).abs() < 0.1);
    }

    #[test]
    fn exchangeable_moment_estimator_recovers_rho() {
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let rho: f64 = 0.5;
        let mut cells: Vec<Vec<f64>> = Vec::new();
        for _ in 0..300 {
            let shared: f64 = rng.sample(StandardNormal);
            let cell: Vec<f64> = (0..12)
                .map(|_| {
                    let e: f64 = rng.sample(StandardNormal);
                    rho.sqrt() * shared + (1.0 - rho).sqrt() * e
                })
                .collect();
            cells.push(cell);
        }
        let spec = estimate_nuisance(
            cells.iter().map(|c| c.as_slice()),
            CorrelationStructure::Exchangeable,
        )
        .unwrap();
        assert!((spec.rho - rho).abs() < 0.08, "rho estimate {}", spec.rho);
    }
}

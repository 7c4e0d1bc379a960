//! Model parameters, pointwise prediction, and the penalized objective.
//!
//! A fitted model predicts entry `(i_1, .., i_d)` at time `t` as
//!
//! ```text
//! yhat = sum_j h_j(t) * prod_k p_k[i_k, j]  +  g_e(t) * prod_k q_k[e_k]
//! ```
//!
//! where `h_j` are rank trends (spline coefficient rows of `trend_coefs`),
//! `g_e` is the subgroup trend of the time group `e` containing `t`, and
//! `e_k` is the subgroup of subject `i_k`. The first term needs the
//! subject's individual loading row and is identically zero for cold-start
//! subjects (their rows stay zero); the second only needs subgroup labels,
//! which is what makes cold-start forecasts nontrivial.
//!
//! The training criterion is the whitened residual sum of squares plus a
//! ridge penalty on every parameter block; see [`objective`].

use nalgebra::{DMatrix, DVector};

use crate::correlation::CorrelationSpec;
use crate::error::{Error, Result};
use crate::spline::SplineBasis;
use crate::tensor::{SubgroupScheme, TemporalTensor};

/// All parameter blocks of the factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Per mode: `n_k x r` individual loading matrix (row per subject).
    pub factors: Vec<DMatrix<f64>>,
    /// Per mode: `m_k` subgroup loadings shared by all subjects of a group.
    pub group_factors: Vec<DVector<f64>>,
    /// `r x M` spline coefficients; row `j` defines the trend `h_j`.
    pub trend_coefs: DMatrix<f64>,
    /// `m x M` spline coefficients; row `e` defines the subgroup trend on
    /// time group `e`.
    pub group_trend_coefs: DMatrix<f64>,
}

impl ModelParams {
    /// An all-zero parameter set with shapes implied by the inputs.
    pub fn zeros(dims: &[u32], rank: usize, scheme: &SubgroupScheme, basis: &SplineBasis) -> Self {
        let m = basis.size();
        ModelParams {
            factors: dims
                .iter()
                .map(|&n| DMatrix::zeros(n as usize, rank))
                .collect(),
            group_factors: (0..dims.len())
                .map(|k| DVector::zeros(scheme.num_mode_groups(k)))
                .collect(),
            trend_coefs: DMatrix::zeros(rank, m),
            group_trend_coefs: DMatrix::zeros(scheme.num_time_groups(), m),
        }
    }

    pub fn rank(&self) -> usize {
        self.trend_coefs.nrows()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    /// Shape and finiteness consistency against the companion structures.
    pub fn validate(
        &self,
        dims: &[u32],
        scheme: &SubgroupScheme,
        basis: &SplineBasis,
    ) -> Result<()> {
        let r = self.rank();
        let m = basis.size();
        let fail = |msg: String| Err(Error::Shape { msg });
        if self.factors.len() != dims.len() || self.group_factors.len() != dims.len() {
            return fail(format!(
                "parameters cover {} modes, tensor has {}",
                self.factors.len(),
                dims.len()
            ));
        }
        if scheme.order() != dims.len() {
            return fail("subgroup scheme order differs from tensor order".into());
        }
        for (k, &n) in dims.iter().enumerate() {
            if self.factors[k].nrows() != n as usize || self.factors[k].ncols() != r {
                return fail(format!("factors[{k}] is not {n} x {r}"));
            }
            if scheme.num_subjects(k) != n as usize {
                return fail(format!("scheme labels {} subjects in mode {k}, tensor has {n}",
                    scheme.num_subjects(k)));
            }
            if self.group_factors[k].len() != scheme.num_mode_groups(k) {
                return fail(format!(
                    "group_factors[{k}] has {} entries for {} subgroups",
                    self.group_factors[k].len(),
                    scheme.num_mode_groups(k)
                ));
            }
        }
        if self.trend_coefs.ncols() != m || self.group_trend_coefs.ncols() != m {
            return fail(format!("spline coefficient width differs from basis size {m}"));
        }
        if self.group_trend_coefs.nrows() != scheme.num_time_groups() {
            return fail(format!(
                "{} subgroup trend rows for {} time groups",
                self.group_trend_coefs.nrows(),
                scheme.num_time_groups()
            ));
        }
        let finite = self.factors.iter().all(|f| f.iter().all(|v| v.is_finite()))
            && self.group_factors.iter().all(|q| q.iter().all(|v| v.is_finite()))
            && self.trend_coefs.iter().all(|v| v.is_finite())
            && self.group_trend_coefs.iter().all(|v| v.is_finite());
        if !finite {
            return fail("parameters contain non-finite values".into());
        }
        Ok(())
    }

    /// Sum of squared entries of every block (the ridge penalty at weight 1).
    pub fn penalty(&self) -> f64 {
        let mut p = 0.0;
        for f in &self.factors {
            p += f.iter().map(|v| v * v).sum::<f64>();
        }
        for q in &self.group_factors {
            p += q.iter().map(|v| v * v).sum::<f64>();
        }
        p += self.trend_coefs.iter().map(|v| v * v).sum::<f64>();
        p += self.group_trend_coefs.iter().map(|v| v * v).sum::<f64>();
        p
    }

    /// Product of subgroup loadings over all modes for one cell.
    pub fn group_product(&self, scheme: &SubgroupScheme, cell: &[u32]) -> Result<f64> {
        let mut prod = 1.0;
        for (k, &i) in cell.iter().enumerate() {
            prod *= self.group_factors[k][scheme.mode_group(k, i)?];
        }
        Ok(prod)
    }

    /// Product of individual loadings over all modes for component `j`.
    pub(crate) fn factor_product(&self, cell: &[u32], j: usize) -> f64 {
        cell.iter()
            .enumerate()
            .map(|(k, &i)| self.factors[k][(i as usize, j)])
            .product()
    }
}

/// Predicts one entry at one time. `cell` is 0-based; subjects must have
/// subgroup assignments and `t` must lie in the unit interval.
pub fn predict_cell(
    params: &ModelParams,
    scheme: &SubgroupScheme,
    basis: &SplineBasis,
    cell: &[u32],
    t: f64,
) -> Result<f64> {
    if cell.len() != params.order() {
        return Err(Error::Shape {
            msg: format!(
                "cell {cell:?} has {} indices, model order is {}",
                cell.len(),
                params.order()
            ),
        });
    }
    let b = basis.eval(t)?;
    let bv = DVector::from_vec(b);
    for (k, &i) in cell.iter().enumerate() {
        if (i as usize) >= params.factors[k].nrows() {
            // subjects beyond the training dimension have no subgroup label
            return Err(Error::ColdStartUnresolvable {
                msg: format!(
                    "subject {} of mode {} exceeds the fitted dimension {}",
                    i + 1,
                    k + 1,
                    params.factors[k].nrows()
                ),
            });
        }
    }
    let mut yhat = 0.0;
    for j in 0..params.rank() {
        let h = params.trend_coefs.row(j).transpose().dot(&bv);
        yhat += h * params.factor_product(cell, j);
    }
    let e = scheme.time_group(t);
    let g = params.group_trend_coefs.row(e).transpose().dot(&bv);
    yhat += g * params.group_product(scheme, cell)?;
    Ok(yhat)
}

/// The penalized weighted training criterion: whitened residual sum of
/// squares over all nonempty cells plus `lambda` times [`ModelParams::penalty`].
pub fn objective(
    params: &ModelParams,
    tensor: &TemporalTensor,
    scheme: &SubgroupScheme,
    basis: &SplineBasis,
    corr: &CorrelationSpec,
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Bounds {
            what: "ridge penalty".into(),
            value: lambda,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    params.validate(tensor.dims(), scheme, basis)?;
    let mut loss = 0.0;
    let mut resid: Vec<f64> = Vec::new();
    for (cell, series) in tensor.cells() {
        resid.clear();
        for (&t, &y) in series.times().iter().zip(series.values()) {
            resid.push(y - predict_cell(params, scheme, basis, cell, t)?);
        }
        corr.whiten_vector(&mut resid)?;
        loss += resid.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(loss + lambda * params.penalty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{CorrelationSpec, CorrelationStructure};
    use crate::tensor::TimeGroups;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// d=2 toy model: r=1, basis (1, t), h(t) = t, g(t) = 1 on one group.
    fn toy() -> (ModelParams, SubgroupScheme, SplineBasis) {
        let basis = SplineBasis::new(1, vec![]).unwrap();
        let scheme = SubgroupScheme::new(
            vec![vec![0, 0], vec![0, 1]],
            TimeGroups::Single,
        )
        .unwrap();
        let mut params = ModelParams::zeros(&[2, 2], 1, &scheme, &basis);
        params.factors[0] = DMatrix::from_row_slice(2, 1, &[2.0, 0.0]);
        params.factors[1] = DMatrix::from_row_slice(2, 1, &[3.0, 1.0]);
        params.group_factors[0] = DVector::from_vec(vec![0.5]);
        params.group_factors[1] = DVector::from_vec(vec![2.0, -1.0]);
        params.trend_coefs = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        params.group_trend_coefs = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        (params, scheme, basis)
    }

    #[test]
    fn prediction_combines_both_terms() {
        let (params, scheme, basis) = toy();
        // individual: t * 2 * 3 = 6t; subgroup: 1 * 0.5 * 2 = 1
        let y = predict_cell(&params, &scheme, &basis, &[0, 0], 0.5).unwrap();
        assert_abs_diff_eq!(y, 4.0, epsilon = 1e-14);
        // individual: t * 2 * 1; subgroup: 1 * 0.5 * -1 (group 2 of mode 2)
        let y = predict_cell(&params, &scheme, &basis, &[0, 1], 0.5).unwrap();
        assert_abs_diff_eq!(y, 1.0 - 0.5, epsilon = 1e-14);
    }

    #[test]
    fn cold_subjects_fall_back_to_the_subgroup_term() {
        let (params, scheme, basis) = toy();
        // subject 2 of mode 1 has a zero loading row: pure subgroup forecast
        let y = predict_cell(&params, &scheme, &basis, &[1, 0], 0.75).unwrap();
        assert_eq!(y, 1.0);
    }

    #[test]
    fn prediction_errors_are_classified() {
        let (params, scheme, basis) = toy();
        assert!(matches!(
            predict_cell(&params, &scheme, &basis, &[0, 2], 0.5),
            Err(Error::ColdStartUnresolvable { .. })
        ));
        assert!(matches!(
            predict_cell(&params, &scheme, &basis, &[0, 0], 1.5),
            Err(Error::Bounds { .. })
        ));
        assert!(matches!(
            predict_cell(&params, &scheme, &basis, &[0], 0.5),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn objective_matches_hand_computation() {
        let (params, scheme, basis) = toy();
        let mut tensor = TemporalTensor::new(vec![2, 2]).unwrap();
        tensor.insert(&[0, 0], 0.5, 5.0).unwrap(); // residual 1
        tensor.insert(&[1, 0], 0.75, 3.0).unwrap(); // residual 2
        let corr = CorrelationSpec::new(CorrelationStructure::Independence, 0.0, 2.0).unwrap();
        let loss = objective(&params, &tensor, &scheme, &basis, &corr, 0.0).unwrap();
        assert_abs_diff_eq!(loss, (1.0 + 4.0) / 2.0, epsilon = 1e-12);

        let pen = params.penalty();
        assert_abs_diff_eq!(
            pen,
            (4.0 + 9.0 + 1.0) + (0.25 + 4.0 + 1.0) + 1.0 + 1.0,
            epsilon = 1e-12
        );
        let loss = objective(&params, &tensor, &scheme, &basis, &corr, 0.5).unwrap();
        assert_abs_diff_eq!(loss, 2.5 + 0.5 * pen, epsilon = 1e-12);
    }

    #[test]
    fn objective_validates_inputs() {
        let (params, scheme, basis) = toy();
        let tensor = TemporalTensor::new(vec![3, 2]).unwrap();
        let corr = CorrelationSpec::independence();
        assert!(matches!(
            objective(&params, &tensor, &scheme, &basis, &corr, 1.0),
            Err(Error::Shape { .. })
        ));
        let tensor = TemporalTensor::new(vec![2, 2]).unwrap();
        assert!(matches!(
            objective(&params, &tensor, &scheme, &basis, &corr, -1.0),
            Err(Error::Bounds { .. })
        ));
    }

    proptest! {
        /// The prediction is linear in each parameter block separately.
        #[test]
        fn prediction_is_linear_in_the_factor_block(
            a in -2.0f64..2.0, b in -2.0f64..2.0, t in 0.0f64..1.0
        ) {
            let (mut params, scheme, basis) = toy();
            let cell = [0u32, 0u32];
            params.factors[0][(0, 0)] = 0.0;
            let f0 = predict_cell(&params, &scheme, &basis, &cell, t).unwrap();
            params.factors[0][(0, 0)] = a;
            let fa = predict_cell(&params, &scheme, &basis, &cell, t).unwrap();
            params.factors[0][(0, 0)] = b;
            let fb = predict_cell(&params, &scheme, &basis, &cell, t).unwrap();
            params.factors[0][(0, 0)] = a + b;
            let fab = predict_cell(&params, &scheme, &basis, &cell, t).unwrap();
            prop_assert!((fab - (fa + fb - f0)).abs() < 1e-10);
        }
    }
}

//! Truncated-polynomial spline bases on the unit interval.
//!
//! A basis of degree `k` with interior knots `v_1 < .. < v_a` consists of
//! the functions
//!
//! ```text
//! 1, t, .., t^k, (t - v_1)_+^k, .., (t - v_a)_+^k
//! ```
//!
//! for `t` in `[0, 1]`, giving `a + k + 1` basis functions in total. Members
//! of the spanned space are piecewise degree-`k` polynomials with `k-1`
//! continuous derivatives at the knots. The number of knots is tied to the
//! number of nonempty tensor cells by [`knot_count`], which keeps the basis
//! dimension growing slowly enough for consistent estimation.

use serde::Serialize;

use crate::error::{Error, Result};

/// Data-driven interior knot count: `floor(N^(1/(2k+3)))` for `N` nonempty
/// cells and spline degree `k`, computed with exact integer boundaries (no
/// floating-point drop at perfect powers).
pub fn knot_count(num_cells: usize, degree: usize) -> usize {
    let exp = (2 * degree + 3) as u32;
    if num_cells == 0 {
        return 0;
    }
    let n = num_cells as u128;
    let pow = |b: usize| (b as u128).checked_pow(exp);
    let mut a = (num_cells as f64).powf(1.0 / f64::from(exp)).floor() as usize;
    while pow(a + 1).is_some_and(|p| p <= n) {
        a += 1;
    }
    while a > 0 && pow(a).is_none_or(|p| p > n) {
        a -= 1;
    }
    a
}

/// Where to place interior knots when building a basis from data.
#[derive(Debug, Clone, Copy)]
pub enum KnotPlacement<'a> {
    /// Knots at `i / (a + 1)` for `i = 1..=a`.
    Equispaced,
    /// Knots at the `i / (a + 1)` empirical quantiles of the given times.
    Quantile(&'a [f64]),
}

/// A truncated-polynomial basis: degree plus strictly increasing interior
/// knots in the open unit interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplineBasis {
    degree: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    /// Validates degree >= 1 and `0 < v_1 < .. < v_a < 1`.
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self> {
        if degree == 0 {
            return Err(Error::Config {
                msg: "spline degree must be at least 1".into(),
            });
        }
        let mut prev = 0.0;
        for &v in &knots {
            if !v.is_finite() || v <= prev || v >= 1.0 {
                return Err(Error::Config {
                    msg: format!("knots must be strictly increasing inside (0, 1), got {knots:?}"),
                });
            }
            prev = v;
        }
        Ok(SplineBasis { degree, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions `M = a + k + 1`.
    pub fn size(&self) -> usize {
        self.knots.len() + self.degree + 1
    }

    /// Evaluates all basis functions at `t`, which must lie in `[0, 1]`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.size()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    /// As [`SplineBasis::eval`], writing into a caller-provided slice of
    /// length [`SplineBasis::size`].
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Bounds {
                what: "basis evaluation time".into(),
                value: t,
                lo: 0.0,
                hi: 1.0,
            });
        }
        debug_assert_eq!(out.len(), self.size());
        out[0] = 1.0;
        for i in 1..=self.degree {
            out[i] = out[i - 1] * t;
        }
        let k = self.degree as i32;
        for (l, &v) in self.knots.iter().enumerate() {
            let d = t - v;
            out[self.degree + 1 + l] = if d > 0.0 { d.powi(k) } else { 0.0 };
        }
        Ok(())
    }

    /// Max-to-min gap ratio of the partition induced by the knots together
    /// with the interval endpoints; 1 means perfectly uniform.
    pub fn quasi_uniform_ratio(&self) -> f64 {
        let mut prev = 0.0;
        let mut min_gap = f64::INFINITY;
        let mut max_gap = 0.0f64;
        for &v in self.knots.iter().chain(std::iter::once(&1.0)) {
            let gap = v - prev;
            min_gap = min_gap.min(gap);
            max_gap = max_gap.max(gap);
            prev = v;
        }
        max_gap / min_gap
    }
}

/// Builds a basis with `num_knots` interior knots placed by the given rule.
///
/// Quantile placement requires enough distinct interior time points to keep
/// the knot sequence strictly increasing; otherwise a degenerate-knots error
/// is returned. The quasi-uniformity of the resulting partition is logged.
pub fn build_basis(degree: usize, num_knots: usize, placement: KnotPlacement) -> Result<SplineBasis> {
    let knots = match placement {
        KnotPlacement::Equispaced => (1..=num_knots)
            .map(|i| i as f64 / (num_knots + 1) as f64)
            .collect(),
        KnotPlacement::Quantile(times) => quantile_knots(num_knots, times)?,
    };
    let basis = SplineBasis::new(degree, knots)?;
    log::debug!(
        "built basis: degree={} knots={} size={} quasi_uniform_ratio={:.3}",
        basis.degree(),
        basis.knots().len(),
        basis.size(),
        basis.quasi_uniform_ratio()
    );
    Ok(basis)
}

fn quantile_knots(num_knots: usize, times: &[f64]) -> Result<Vec<f64>> {
    if num_knots == 0 {
        return Ok(Vec::new());
    }
    if times.is_empty() {
        return Err(Error::DegenerateKnots {
            msg: "no time points supplied for quantile placement".into(),
        });
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let quantile = |p: f64| -> f64 {
        let h = p * (n - 1) as f64;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let knots: Vec<f64> = (1..=num_knots)
        .map(|i| quantile(i as f64 / (num_knots + 1) as f64))
        .collect();
    let interior_strict = knots
        .windows(2)
        .all(|w| w[0] < w[1])
        && knots[0] > 0.0
        && knots[num_knots - 1] < 1.0;
    if !interior_strict {
        return Err(Error::DegenerateKnots {
            msg: format!(
                "{num_knots} quantile knots over {n} times are not strictly increasing inside (0, 1)"
            ),
        });
    }
    Ok(knots)
}

//! Penalized weighted least-squares fitting by block coordinate descent
//! with maximum-block-improvement acceptance.
//!
//! The objective is quadratic in each of the `2d + 2` parameter blocks
//! (per-mode loadings, per-mode subgroup loadings, trend coefficients,
//! subgroup-trend coefficients) while the others are held fixed, so every
//! block has a closed-form ridge minimizer. One iteration solves all block
//! subproblems, scores each candidate by its relative objective improvement,
//! and accepts only the best block. The loop stops when the best available
//! improvement falls below `epsilon` or after `max_iter` iterations.
//!
//! Within-cell weighting never factorizes a covariance matrix: the inverse
//! working covariance is applied through its closed form (diagonal,
//! tridiagonal for AR-1, rank-one update for exchangeable), and each
//! candidate's objective value comes from the normal equations themselves,
//! making one iteration linear in the number of observations.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{CorrelationSpec, CorrelationStructure};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::spline::SplineBasis;
use crate::tensor::{SubgroupScheme, TemporalTensor};

/// Settings for one fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub rank: usize,
    pub lambda: f64,
    /// Relative improvement below which a block is considered converged.
    pub epsilon: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Accept every improving block per step instead of only the best one.
    /// Faster on easy problems; off by default.
    pub accept_all: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            rank: 1,
            lambda: 1.0,
            epsilon: 1e-4,
            max_iter: 500,
            seed: 0,
            accept_all: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config {
                msg: "rank must be at least 1".into(),
            });
        }
        if self.rank > 64 {
            return Err(Error::Config {
                msg: format!("rank {} exceeds the subproblem cap of 64", self.rank),
            });
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Bounds {
                what: "ridge penalty".into(),
                value: self.lambda,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config {
                msg: format!("epsilon must be positive, got {}", self.epsilon),
            });
        }
        if self.max_iter == 0 {
            return Err(Error::Config {
                msg: "max_iter must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Diagnostics of one fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    /// Objective after initialization and after every accepted block.
    pub objective_trace: Vec<f64>,
    pub accepted_blocks: Vec<String>,
    pub converged: bool,
    pub final_lambda: f64,
    /// Parameter coordinates frozen for lack of data (under two
    /// observations in a subgroup).
    pub frozen: Vec<String>,
    /// Not serialized: wall time would break byte-identical reruns.
    #[serde(skip)]
    pub wallclock_secs: f64,
}

/// Relative objective improvement `1 - candidate / previous`; zero once the
/// objective has already reached zero.
pub fn improvement(candidate: f64, previous: f64) -> f64 {
    if previous <= 0.0 {
        0.0
    } else {
        1.0 - candidate / previous
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockId {
    Factor(usize),
    Trend,
    GroupFactor(usize),
    GroupTrend,
}

impl BlockId {
    fn label(&self) -> String {
        match self {
            BlockId::Factor(k) => format!("factors:{}", k + 1),
            BlockId::Trend => "trend".into(),
            BlockId::GroupFactor(k) => format!("group-factors:{}", k + 1),
            BlockId::GroupTrend => "group-trend".into(),
        }
    }
}

/// Closed form of the inverse working covariance of one cell.
enum SigmaInv {
    /// `w I`
    Diagonal { w: f64 },
    /// Symmetric tridiagonal: ends `end`, interior `mid`, off-diagonal `off`.
    Tridiag { end: f64, mid: f64, off: f64 },
    /// `a I + b 1 1'`
    LowRank { a: f64, b: f64 },
}

fn sigma_inv(corr: &CorrelationSpec, n: usize) -> SigmaInv {
    let v = corr.variance;
    match corr.structure {
        CorrelationStructure::Independence => SigmaInv::Diagonal { w: 1.0 / v },
        CorrelationStructure::Ar1 => {
            if n < 2 {
                SigmaInv::Diagonal { w: 1.0 / v }
            } else {
                let r = corr.rho;
                let s = (1.0 - r * r) * v;
                SigmaInv::Tridiag {
                    end: 1.0 / s,
                    mid: (1.0 + r * r) / s,
                    off: -r / s,
                }
            }
        }
        CorrelationStructure::Exchangeable => {
            if n < 2 {
                SigmaInv::Diagonal { w: 1.0 / v }
            } else {
                let r = corr.rho;
                let nf = n as f64;
                SigmaInv::LowRank {
                    a: 1.0 / ((1.0 - r) * v),
                    b: -r / ((1.0 - r) * (1.0 + (nf - 1.0) * r) * v),
                }
            }
        }
    }
}

impl SigmaInv {
    /// `out = SigmaInv * x`.
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        match *self {
            SigmaInv::Diagonal { w } => {
                for i in 0..n {
                    out[i] = w * x[i];
                }
            }
            SigmaInv::Tridiag { end, mid, off } => {
                for i in 0..n {
                    let d = if i == 0 || i == n - 1 { end } else { mid };
                    let mut v = d * x[i];
                    if i > 0 {
                        v += off * x[i - 1];
                    }
                    if i + 1 < n {
                        v += off * x[i + 1];
                    }
                    out[i] = v;
                }
            }
            SigmaInv::LowRank { a, b } => {
                let s: f64 = x.iter().sum();
                for i in 0..n {
                    out[i] = a * x[i] + b * s;
                }
            }
        }
    }

    /// Quadratic form `x' SigmaInv x`.
    fn quad(&self, x: &[f64]) -> f64 {
        let n = x.len();
        match *self {
            SigmaInv::Diagonal { w } => w * x.iter().map(|v| v * v).sum::<f64>(),
            SigmaInv::Tridiag { end, mid, off } => {
                let mut q = 0.0;
                for i in 0..n {
                    let d = if i == 0 || i == n - 1 { end } else { mid };
                    q += d * x[i] * x[i];
                    if i + 1 < n {
                        q += 2.0 * off * x[i] * x[i + 1];
                    }
                }
                q
            }
            SigmaInv::LowRank { a, b } => {
                let s: f64 = x.iter().sum();
                a * x.iter().map(|v| v * v).sum::<f64>() + b * s * s
            }
        }
    }

    /// `out = SigmaInv * rows` for a row-major `n x m` matrix.
    fn apply_rows(&self, n: usize, m: usize, rows: &[f64], out: &mut [f64]) {
        match *self {
            SigmaInv::Diagonal { w } => {
                for (o, &v) in out.iter_mut().zip(rows) {
                    *o = w * v;
                }
            }
            SigmaInv::Tridiag { end, mid, off } => {
                for i in 0..n {
                    let d = if i == 0 || i == n - 1 { end } else { mid };
                    for c in 0..m {
                        let mut v = d * rows[i * m + c];
                        if i > 0 {
                            v += off * rows[(i - 1) * m + c];
                        }
                        if i + 1 < n {
                            v += off * rows[(i + 1) * m + c];
                        }
                        out[i * m + c] = v;
                    }
                }
            }
            SigmaInv::LowRank { a, b } => {
                let mut sums = vec![0.0; m];
                for i in 0..n {
                    for c in 0..m {
                        sums[c] += rows[i * m + c];
                    }
                }
                for i in 0..n {
                    for c in 0..m {
                        out[i * m + c] = a * rows[i * m + c] + b * sums[c];
                    }
                }
            }
        }
    }
}

/// Per-cell data laid out for the solver.
struct CellData {
    cell: Vec<u32>,
    /// Subgroup of the cell's subject in each mode.
    groups: Vec<u32>,
    /// Time group of each observation.
    tgroups: Vec<u32>,
    values: Vec<f64>,
    /// Row-major `n x M` basis evaluations.
    basis: Vec<f64>,
    /// Offset into flat per-observation caches.
    offset: usize,
}

impl CellData {
    fn len(&self) -> usize {
        self.values.len()
    }
}

struct Prep<'a> {
    cells: Vec<CellData>,
    /// Per mode, per subject: indices into `cells`.
    subject_cells: Vec<Vec<Vec<u32>>>,
    /// Per mode, per subgroup: observation count.
    group_obs: Vec<Vec<usize>>,
    /// Per time group: observation count.
    tgroup_obs: Vec<usize>,
    /// Per-cell gram `B' SigmaInv B` (M x M each), when affordable.
    grams: Option<Vec<f64>>,
    corr: CorrelationSpec,
    lambda: f64,
    scheme: &'a SubgroupScheme,
    dims: Vec<u32>,
    m: usize,
    rank: usize,
    total_obs: usize,
}

const GRAM_CACHE_BYTES: usize = 256 << 20;

impl<'a> Prep<'a> {
    fn build(
        tensor: &TemporalTensor,
        scheme: &'a SubgroupScheme,
        basis: &SplineBasis,
        corr: CorrelationSpec,
        lambda: f64,
        rank: usize,
    ) -> Result<Self> {
        let d = tensor.order();
        let m = basis.size();
        let mut cells = Vec::with_capacity(tensor.num_cells());
        let mut subject_cells: Vec<Vec<Vec<u32>>> = tensor
            .dims()
            .iter()
            .map(|&n| vec![Vec::new(); n as usize])
            .collect();
        let mut group_obs: Vec<Vec<usize>> = (0..d)
            .map(|k| vec![0; scheme.num_mode_groups(k)])
            .collect();
        let mut tgroup_obs = vec![0usize; scheme.num_time_groups()];
        let mut offset = 0usize;
        for (cell, series) in tensor.cells() {
            let n = series.len();
            corr.check_cell(n)?;
            let mut groups = Vec::with_capacity(d);
            for (k, &i) in cell.iter().enumerate() {
                let g = scheme.mode_group(k, i)?;
                group_obs[k][g] += n;
                groups.push(g as u32);
            }
            let mut tgroups = Vec::with_capacity(n);
            let mut rows = vec![0.0; n * m];
            for (t_idx, &t) in series.times().iter().enumerate() {
                let e = scheme.time_group(t);
                tgroup_obs[e] += 1;
                tgroups.push(e as u32);
                basis.eval_into(t, &mut rows[t_idx * m..(t_idx + 1) * m])?;
            }
            let idx = cells.len() as u32;
            for (k, &i) in cell.iter().enumerate() {
                subject_cells[k][i as usize].push(idx);
            }
            cells.push(CellData {
                cell: cell.to_vec(),
                groups,
                tgroups,
                values: series.values().to_vec(),
                basis: rows,
                offset,
            });
            offset += n;
        }

        let mut prep = Prep {
            cells,
            subject_cells,
            group_obs,
            tgroup_obs,
            grams: None,
            corr,
            lambda,
            scheme,
            dims: tensor.dims().to_vec(),
            m,
            rank,
            total_obs: offset,
        };
        if prep.cells.len() * m * m * 8 <= GRAM_CACHE_BYTES {
            let mut grams = vec![0.0; prep.cells.len() * m * m];
            let mut scratch = Vec::new();
            for (c, cell) in prep.cells.iter().enumerate() {
                let n = cell.len();
                scratch.resize(n * m, 0.0);
                let si = sigma_inv(&prep.corr, n);
                si.apply_rows(n, m, &cell.basis, &mut scratch);
                let g = &mut grams[c * m * m..(c + 1) * m * m];
                for t in 0..n {
                    for i in 0..m {
                        let bi = cell.basis[t * m + i];
                        if bi == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            g[i * m + j] += bi * scratch[t * m + j];
                        }
                    }
                }
            }
            prep.grams = Some(grams);
        }
        Ok(prep)
    }

    fn gram(&self, c: usize, out: &mut [f64]) {
        let m = self.m;
        if let Some(grams) = &self.grams {
            out.copy_from_slice(&grams[c * m * m..(c + 1) * m * m]);
            return;
        }
        let cell = &self.cells[c];
        let n = cell.len();
        let mut scratch = vec![0.0; n * m];
        let si = sigma_inv(&self.corr, n);
        si.apply_rows(n, m, &cell.basis, &mut scratch);
        out.fill(0.0);
        for t in 0..n {
            for i in 0..m {
                let bi = cell.basis[t * m + i];
                if bi == 0.0 {
                    continue;
                }
                for j in 0..m {
                    out[i * m + j] += bi * scratch[t * m + j];
                }
            }
        }
    }
}

/// Cached per-observation and per-cell predictor pieces.
struct Cache {
    /// `total_obs x r`: trend values at each observation.
    h: Vec<f64>,
    /// `total_obs`: subgroup trend value at each observation.
    g: Vec<f64>,
    /// `cells x r`: product of individual loadings per component.
    u: Vec<f64>,
    /// `cells`: product of subgroup loadings.
    uq: Vec<f64>,
}

impl Cache {
    fn build(prep: &Prep, params: &ModelParams) -> Cache {
        let mut cache = Cache {
            h: vec![0.0; prep.total_obs * prep.rank],
            g: vec![0.0; prep.total_obs],
            u: vec![0.0; prep.cells.len() * prep.rank],
            uq: vec![0.0; prep.cells.len()],
        };
        cache.rebuild_h(prep, params);
        cache.rebuild_g(prep, params);
        cache.rebuild_u(prep, params);
        cache.rebuild_uq(prep, params);
        cache
    }

    fn rebuild_h(&mut self, prep: &Prep, params: &ModelParams) {
        let (m, r) = (prep.m, prep.rank);
        for cell in &prep.cells {
            for t in 0..cell.len() {
                let row = &cell.basis[t * m..(t + 1) * m];
                let out = &mut self.h[(cell.offset + t) * r..(cell.offset + t + 1) * r];
                for (j, o) in out.iter_mut().enumerate() {
                    let mut v = 0.0;
                    for i in 0..m {
                        v += params.trend_coefs[(j, i)] * row[i];
                    }
                    *o = v;
                }
            }
        }
    }

    fn rebuild_g(&mut self, prep: &Prep, params: &ModelParams) {
        let m = prep.m;
        for cell in &prep.cells {
            for t in 0..cell.len() {
                let row = &cell.basis[t * m..(t + 1) * m];
                let e = cell.tgroups[t] as usize;
                let mut v = 0.0;
                for i in 0..m {
                    v += params.group_trend_coefs[(e, i)] * row[i];
                }
                self.g[cell.offset + t] = v;
            }
        }
    }

    fn rebuild_u(&mut self, prep: &Prep, params: &ModelParams) {
        let r = prep.rank;
        for (c, cell) in prep.cells.iter().enumerate() {
            for j in 0..r {
                let mut v = 1.0;
                for (k, &i) in cell.cell.iter().enumerate() {
                    v *= params.factors[k][(i as usize, j)];
                }
                self.u[c * r + j] = v;
            }
        }
    }

    fn rebuild_uq(&mut self, prep: &Prep, params: &ModelParams) {
        for (c, cell) in prep.cells.iter().enumerate() {
            let mut v = 1.0;
            for (k, &g) in cell.groups.iter().enumerate() {
                v *= params.group_factors[k][g as usize];
            }
            self.uq[c] = v;
        }
    }
}

/// Data loss (whitened residual sum of squares) at the cached parameters.
fn data_loss(prep: &Prep, cache: &Cache) -> f64 {
    let r = prep.rank;
    let mut loss = 0.0;
    let mut resid: Vec<f64> = Vec::new();
    for (c, cell) in prep.cells.iter().enumerate() {
        let n = cell.len();
        resid.resize(n, 0.0);
        let u = &cache.u[c * r..(c + 1) * r];
        let uq = cache.uq[c];
        for t in 0..n {
            let hrow = &cache.h[(cell.offset + t) * r..(cell.offset + t + 1) * r];
            let mut pred = uq * cache.g[cell.offset + t];
            for j in 0..r {
                pred += u[j] * hrow[j];
            }
            resid[t] = cell.values[t] - pred;
        }
        loss += sigma_inv(&prep.corr, n).quad(&resid);
    }
    loss
}

fn objective_value(prep: &Prep, params: &ModelParams, cache: &Cache) -> f64 {
    data_loss(prep, cache) + prep.lambda * params.penalty()
}

fn block_penalty(params: &ModelParams, id: BlockId) -> f64 {
    match id {
        BlockId::Factor(k) => params.factors[k].iter().map(|v| v * v).sum(),
        BlockId::Trend => params.trend_coefs.iter().map(|v| v * v).sum(),
        BlockId::GroupFactor(k) => params.group_factors[k].iter().map(|v| v * v).sum(),
        BlockId::GroupTrend => params.group_trend_coefs.iter().map(|v| v * v).sum(),
    }
}

/// Ridge solve `(A + lambda I) x = b` with the degenerate-case rules:
/// an all-zero system under `lambda = 0` keeps the previous value
/// (`Ok(None)`), a singular nonzero system under `lambda = 0` is an error.
fn solve_ridge(
    mut a: DMatrix<f64>,
    b: &DVector<f64>,
    lambda: f64,
    label: &str,
) -> Result<Option<DVector<f64>>> {
    if lambda == 0.0 && a.iter().all(|&v| v == 0.0) && b.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let dim = a.nrows();
    for i in 0..dim {
        a[(i, i)] += lambda;
    }
    match a.cholesky() {
        Some(ch) => Ok(Some(ch.solve(b))),
        None => Err(Error::RidgeDegenerate {
            block: label.to_string(),
        }),
    }
}

struct Candidate {
    id: BlockId,
    value: f64,
    matrix: Option<DMatrix<f64>>,
    vector: Option<DVector<f64>>,
}

/// Exact minimizer over one mode's loading matrix. Subjects without
/// observations keep their current rows.
fn candidate_factor(
    prep: &Prep,
    params: &ModelParams,
    cache: &Cache,
    k: usize,
) -> Result<Candidate> {
    let r = prep.rank;
    let lambda = prep.lambda;
    let n_subj = prep.dims[k] as usize;
    let old = &params.factors[k];

    let per_subject: Vec<Result<(Vec<f64>, f64)>> = (0..n_subj)
        .into_par_iter()
        .map(|i| {
            let cells = &prep.subject_cells[k][i];
            let old_row: Vec<f64> = (0..r).map(|j| old[(i, j)]).collect();
            if cells.is_empty() {
                let pen = lambda * old_row.iter().map(|v| v * v).sum::<f64>();
                return Ok((old_row, pen));
            }
            let mut xtx = DMatrix::<f64>::zeros(r, r);
            let mut xty = DVector::<f64>::zeros(r);
            let mut base = 0.0;
            let mut design: Vec<f64> = Vec::new();
            let mut wdesign: Vec<f64> = Vec::new();
            let mut resp: Vec<f64> = Vec::new();
            let mut z: Vec<f64> = Vec::new();
            for &ci in cells {
                let c = ci as usize;
                let cell = &prep.cells[c];
                let n = cell.len();
                let si = sigma_inv(&prep.corr, n);
                // loading products over the other modes
                let mut other = vec![1.0; r];
                for (k2, &i2) in cell.cell.iter().enumerate() {
                    if k2 == k {
                        continue;
                    }
                    for (j, o) in other.iter_mut().enumerate() {
                        *o *= params.factors[k2][(i2 as usize, j)];
                    }
                }
                design.resize(n * r, 0.0);
                resp.resize(n, 0.0);
                for t in 0..n {
                    let hrow = &cache.h[(cell.offset + t) * r..(cell.offset + t + 1) * r];
                    for j in 0..r {
                        design[t * r + j] = hrow[j] * other[j];
                    }
                    resp[t] = cell.values[t] - cache.uq[c] * cache.g[cell.offset + t];
                }
                z.resize(n, 0.0);
                si.apply(&resp, &mut z);
                base += resp.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
                for t in 0..n {
                    for j in 0..r {
                        xty[j] += design[t * r + j] * z[t];
                    }
                }
                wdesign.resize(n * r, 0.0);
                si.apply_rows(n, r, &design, &mut wdesign);
                for t in 0..n {
                    for a in 0..r {
                        let da = design[t * r + a];
                        if da == 0.0 {
                            continue;
                        }
                        for b in 0..r {
                            xtx[(a, b)] += da * wdesign[t * r + b];
                        }
                    }
                }
            }
            match solve_ridge(xtx.clone(), &xty, lambda, &BlockId::Factor(k).label())? {
                Some(sol) => {
                    let value = base - xty.dot(&sol);
                    Ok((sol.iter().copied().collect(), value))
                }
                None => {
                    // flat direction: keep the row, quadratic evaluated at it
                    let rowv = DVector::from_vec(old_row.clone());
                    let value = base - 2.0 * xty.dot(&rowv)
                        + (&rowv.transpose() * &xtx * &rowv)[(0, 0)]
                        + lambda * rowv.norm_squared();
                    Ok((old_row, value))
                }
            }
        })
        .collect();

    let mut candidate = DMatrix::<f64>::zeros(n_subj, r);
    let mut value = prep.lambda * (params.penalty() - block_penalty(params, BlockId::Factor(k)));
    for (i, res) in per_subject.into_iter().enumerate() {
        let (row, contrib) = res?;
        for j in 0..r {
            candidate[(i, j)] = row[j];
        }
        value += contrib;
    }
    Ok(Candidate {
        id: BlockId::Factor(k),
        value,
        matrix: Some(candidate),
        vector: None,
    })
}

/// Exact minimizer over one mode's subgroup loadings. The normal system is
/// diagonal across subgroups because every cell touches exactly one
/// subgroup per mode, so each loading is a scalar ridge solve. Subgroups
/// with fewer than two observations are frozen.
fn candidate_group_factor(
    prep: &Prep,
    params: &ModelParams,
    cache: &Cache,
    k: usize,
    frozen_log: &mut Vec<String>,
) -> Result<Candidate> {
    let r = prep.rank;
    let lambda = prep.lambda;
    let n_groups = prep.scheme.num_mode_groups(k);
    let mut a = vec![0.0; n_groups];
    let mut b = vec![0.0; n_groups];
    let mut base = 0.0;
    let mut coeff: Vec<f64> = Vec::new();
    let mut resp: Vec<f64> = Vec::new();
    let mut z: Vec<f64> = Vec::new();

    for (c, cell) in prep.cells.iter().enumerate() {
        let n = cell.len();
        let e = cell.groups[k] as usize;
        let si = sigma_inv(&prep.corr, n);
        let mut other = 1.0;
        for (k2, &g2) in cell.groups.iter().enumerate() {
            if k2 != k {
                other *= params.group_factors[k2][g2 as usize];
            }
        }
        coeff.resize(n, 0.0);
        resp.resize(n, 0.0);
        for t in 0..n {
            coeff[t] = other * cache.g[cell.offset + t];
            let hrow = &cache.h[(cell.offset + t) * r..(cell.offset + t + 1) * r];
            let u = &cache.u[c * r..(c + 1) * r];
            let mut ind = 0.0;
            for j in 0..r {
                ind += u[j] * hrow[j];
            }
            resp[t] = cell.values[t] - ind;
        }
        z.resize(n, 0.0);
        si.apply(&resp, &mut z);
        base += resp.iter().zip(&z).map(|(x, y)| x * y).sum::<f64>();
        si.apply(&coeff, &mut z);
        a[e] += coeff.iter().zip(&z).map(|(x, y)| x * y).sum::<f64>();
        b[e] += resp.iter().zip(&z).map(|(x, y)| x * y).sum::<f64>();
    }

    let old = &params.group_factors[k];
    let mut candidate = old.clone();
    let mut value =
        base + lambda * (params.penalty() - block_penalty(params, BlockId::GroupFactor(k)));
    for e in 0..n_groups {
        let enough = prep.group_obs[k][e] >= 2;
        if enough && a[e] + lambda > 0.0 {
            candidate[e] = b[e] / (a[e] + lambda);
            value -= b[e] * candidate[e];
        } else {
            if !enough {
                frozen_log.push(format!("group-factors:{}:{}", k + 1, e + 1));
            }
            let q = old[e];
            value += a[e] * q * q - 2.0 * b[e] * q + lambda * q * q;
        }
    }
    Ok(Candidate {
        id: BlockId::GroupFactor(k),
        value,
        matrix: None,
        vector: Some(candidate),
    })
}

/// Exact joint minimizer over all trend spline coefficients (an
/// `r * M`-dimensional ridge solve assembled from per-cell grams).
fn candidate_trend(prep: &Prep, params: &ModelParams, cache: &Cache) -> Result<Candidate> {
    let (r, m) = (prep.rank, prep.m);
    let dim = r * m;
    let lambda = prep.lambda;
    let mut xtx = DMatrix::<f64>::zeros(dim, dim);
    let mut xty = DVector::<f64>::zeros(dim);
    let mut base = 0.0;
    let mut gram = vec![0.0; m * m];
    let mut resp: Vec<f64> = Vec::new();
    let mut z: Vec<f64> = Vec::new();

    for (c, cell) in prep.cells.iter().enumerate() {
        let n = cell.len();
        let si = sigma_inv(&prep.corr, n);
        resp.resize(n, 0.0);
        for t in 0..n {
            resp[t] = cell.values[t] - cache.uq[c] * cache.g[cell.offset + t];
        }
        z.resize(n, 0.0);
        si.apply(&resp, &mut z);
        base += resp.iter().zip(&z).map(|(x, y)| x * y).sum::<f64>();
        // rhs blocks: u_j * B' z
        let u = &cache.u[c * r..(c + 1) * r];
        for i in 0..m {
            let mut bz = 0.0;
            for t in 0..n {
                bz += cell.basis[t * m + i] * z[t];
            }
            for j in 0..r {
                if u[j] != 0.0 {
                    xty[j * m + i] += u[j] * bz;
                }
            }
        }
        // normal blocks: u_j * u_j2 * gram
        prep.gram(c, &mut gram);
        for j in 0..r {
            if u[j] == 0.0 {
                continue;
            }
            for j2 in 0..r {
                let s = u[j] * u[j2];
                if s == 0.0 {
                    continue;
                }
                for i in 0..m {
                    for i2 in 0..m {
                        xtx[(j * m + i, j2 * m + i2)] += s * gram[i * m + i2];
                    }
                }
            }
        }
    }

    let value;
    let candidate = match solve_ridge(xtx.clone(), &xty, lambda, &BlockId::Trend.label())? {
        Some(sol) => {
            value = base + lambda * (params.penalty() - block_penalty(params, BlockId::Trend))
                - xty.dot(&sol);
            DMatrix::from_fn(r, m, |j, i| sol[j * m + i])
        }
        None => {
            let flat: Vec<f64> = (0..dim).map(|x| params.trend_coefs[(x / m, x % m)]).collect();
            let fv = DVector::from_vec(flat);
            value = base + lambda * (params.penalty() - block_penalty(params, BlockId::Trend))
                - 2.0 * xty.dot(&fv)
                + (&fv.transpose() * &xtx * &fv)[(0, 0)]
                + lambda * fv.norm_squared();
            params.trend_coefs.clone()
        }
    };
    Ok(Candidate {
        id: BlockId::Trend,
        value,
        matrix: Some(candidate),
        vector: None,
    })
}

/// Accumulates the masked gram `X' SigmaInv X` of the subgroup-trend design
/// for one cell into the `(m_time * M)`-dimensional normal matrix. Row `t`
/// of the design is the basis row placed in the block of its time group,
/// scaled by the cell's subgroup loading product.
fn accumulate_group_trend_gram(
    prep: &Prep,
    cell: &CellData,
    uq: f64,
    xtx: &mut DMatrix<f64>,
) {
    let m = prep.m;
    let n = cell.len();
    let w = uq * uq;
    let add_pair = |xtx: &mut DMatrix<f64>, t: usize, s: usize, scale: f64| {
        let (et, es) = (cell.tgroups[t] as usize, cell.tgroups[s] as usize);
        let (bt, bs) = (
            &cell.basis[t * m..(t + 1) * m],
            &cell.basis[s * m..(s + 1) * m],
        );
        for i in 0..m {
            let v = scale * bt[i];
            if v == 0.0 {
                continue;
            }
            for j in 0..m {
                xtx[(et * m + i, es * m + j)] += v * bs[j];
            }
        }
    };
    match sigma_inv(&prep.corr, n) {
        SigmaInv::Diagonal { w: d } => {
            for t in 0..n {
                add_pair(xtx, t, t, w * d);
            }
        }
        SigmaInv::Tridiag { end, mid, off } => {
            for t in 0..n {
                let d = if t == 0 || t == n - 1 { end } else { mid };
                add_pair(xtx, t, t, w * d);
                if t + 1 < n {
                    add_pair(xtx, t, t + 1, w * off);
                    add_pair(xtx, t + 1, t, w * off);
                }
            }
        }
        SigmaInv::LowRank { a, b } => {
            for t in 0..n {
                add_pair(xtx, t, t, w * a);
            }
            // b * (sum of rows per block) outer products
            let mut present: Vec<usize> = cell.tgroups.iter().map(|&e| e as usize).collect();
            present.sort_unstable();
            present.dedup();
            let mut sums = vec![0.0; present.len() * m];
            for t in 0..n {
                let p = present
                    .binary_search(&(cell.tgroups[t] as usize))
                    .expect("group present");
                for i in 0..m {
                    sums[p * m + i] += cell.basis[t * m + i];
                }
            }
            for (p1, &e1) in present.iter().enumerate() {
                for (p2, &e2) in present.iter().enumerate() {
                    for i in 0..m {
                        let v = w * b * sums[p1 * m + i];
                        if v == 0.0 {
                            continue;
                        }
                        for j in 0..m {
                            xtx[(e1 * m + i, e2 * m + j)] += v * sums[p2 * m + j];
                        }
                    }
                }
            }
        }
    }
}

/// Exact joint minimizer over the subgroup-trend coefficients of all time
/// groups. Under a non-diagonal working correlation the time groups couple
/// within cells, so the solve is joint rather than per-group. Time groups
/// with fewer than two observations are frozen at their current rows and
/// moved into the response.
fn candidate_group_trend(
    prep: &Prep,
    params: &ModelParams,
    cache: &Cache,
    gram_cache: &mut Option<DMatrix<f64>>,
    frozen_log: &mut Vec<String>,
) -> Result<Candidate> {
    let (r, m) = (prep.rank, prep.m);
    let n_tg = prep.scheme.num_time_groups();
    let dim = n_tg * m;
    let lambda = prep.lambda;
    let frozen: Vec<bool> = prep.tgroup_obs.iter().map(|&c| c < 2).collect();
    let any_frozen = frozen.iter().any(|&f| f);
    for (e, &f) in frozen.iter().enumerate() {
        if f {
            frozen_log.push(format!("group-trend:{}", e + 1));
        }
    }

    if gram_cache.is_none() {
        let mut xtx = DMatrix::<f64>::zeros(dim, dim);
        for (c, cell) in prep.cells.iter().enumerate() {
            if cache.uq[c] != 0.0 {
                accumulate_group_trend_gram(prep, cell, cache.uq[c], &mut xtx);
            }
        }
        *gram_cache = Some(xtx);
    }
    let xtx = gram_cache.as_ref().expect("just built");

    let mut xty = DVector::<f64>::zeros(dim);
    let mut base = 0.0;
    let mut resp: Vec<f64> = Vec::new();
    let mut z: Vec<f64> = Vec::new();
    for (c, cell) in prep.cells.iter().enumerate() {
        let n = cell.len();
        let si = sigma_inv(&prep.corr, n);
        let u = &cache.u[c * r..(c + 1) * r];
        resp.resize(n, 0.0);
        for t in 0..n {
            let hrow = &cache.h[(cell.offset + t) * r..(cell.offset + t + 1) * r];
            let mut ind = 0.0;
            for j in 0..r {
                ind += u[j] * hrow[j];
            }
            let mut v = cell.values[t] - ind;
            // frozen groups stay in the model: move them into the response
            if any_frozen && frozen[cell.tgroups[t] as usize] {
                v -= cache.uq[c] * cache.g[cell.offset + t];
            }
            resp[t] = v;
        }
        z.resize(n, 0.0);
        si.apply(&resp, &mut z);
        base += resp.iter().zip(&z).map(|(x, y)| x * y).sum::<f64>();
        if cache.uq[c] == 0.0 {
            continue;
        }
        for t in 0..n {
            if any_frozen && frozen[cell.tgroups[t] as usize] {
                continue;
            }
            let e = cell.tgroups[t] as usize;
            let row = &cell.basis[t * m..(t + 1) * m];
            for i in 0..m {
                xty[e * m + i] += cache.uq[c] * row[i] * z[t];
            }
        }
    }

    let old = &params.group_trend_coefs;
    let pen_other = lambda * (params.penalty() - block_penalty(params, BlockId::GroupTrend));
    let mut candidate = old.clone();
    let value;
    if any_frozen {
        let active: Vec<usize> = (0..dim).filter(|i| !frozen[i / m]).collect();
        let mut frozen_pen = 0.0;
        for e in 0..n_tg {
            if frozen[e] {
                frozen_pen += old.row(e).iter().map(|v| v * v).sum::<f64>();
            }
        }
        if active.is_empty() {
            value = base + pen_other + lambda * frozen_pen;
        } else {
            let sub_a = DMatrix::from_fn(active.len(), active.len(), |i, j| {
                xtx[(active[i], active[j])]
            });
            let sub_b = DVector::from_fn(active.len(), |i, _| xty[active[i]]);
            match solve_ridge(sub_a.clone(), &sub_b, lambda, &BlockId::GroupTrend.label())? {
                Some(sol) => {
                    for (pos, &idx) in active.iter().enumerate() {
                        candidate[(idx / m, idx % m)] = sol[pos];
                    }
                    value = base + pen_other + lambda * frozen_pen - sub_b.dot(&sol);
                }
                None => {
                    let fv = DVector::from_fn(active.len(), |i, _| {
                        old[(active[i] / m, active[i] % m)]
                    });
                    value = base + pen_other + lambda * frozen_pen - 2.0 * sub_b.dot(&fv)
                        + (&fv.transpose() * &sub_a * &fv)[(0, 0)]
                        + lambda * fv.norm_squared();
                }
            }
        }
    } else {
        match solve_ridge(xtx.clone(), &xty, lambda, &BlockId::GroupTrend.label())? {
            Some(sol) => {
                candidate = DMatrix::from_fn(n_tg, m, |e, i| sol[e * m + i]);
                value = base + pen_other - xty.dot(&sol);
            }
            None => {
                let fv = DVector::from_fn(dim, |i, _| old[(i / m, i % m)]);
                value = base + pen_other - 2.0 * xty.dot(&fv)
                    + (&fv.transpose() * xtx * &fv)[(0, 0)]
                    + lambda * fv.norm_squared();
            }
        }
    }
    Ok(Candidate {
        id: BlockId::GroupTrend,
        value,
        matrix: Some(candidate),
        vector: None,
    })
}

/// Random initialization: observed subjects draw loading rows from
/// `Normal(0, 1/sqrt(rank))`, unobserved subjects start (and stay) at zero,
/// subgroup loadings start at one, spline coefficients at zero.
pub fn init_params(
    tensor: &TemporalTensor,
    scheme: &SubgroupScheme,
    basis: &SplineBasis,
    rank: usize,
    seed: u64,
) -> ModelParams {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (rank as f64).sqrt().recip()).expect("valid scale");
    let dims = tensor.dims();
    let mut observed: Vec<Vec<bool>> = dims.iter().map(|&n| vec![false; n as usize]).collect();
    for (cell, _) in tensor.cells() {
        for (k, &i) in cell.iter().enumerate() {
            observed[k][i as usize] = true;
        }
    }
    let mut params = ModelParams::zeros(dims, rank, scheme, basis);
    for (k, obs) in observed.iter().enumerate() {
        for (i, &seen) in obs.iter().enumerate() {
            for j in 0..rank {
                let draw = normal.sample(&mut rng);
                if seen {
                    params.factors[k][(i, j)] = draw;
                }
            }
        }
    }
    // on large instances a chance-correlation start is too flat for the
    // relative-improvement stop rule, so align the leading columns with the
    // dominant structure of the time-averaged data where that is cheap
    init_factors_spectral(tensor, rank, &mut params);
    for (k, obs) in observed.iter().enumerate() {
        for (i, &seen) in obs.iter().enumerate() {
            if !seen {
                params.factors[k].row_mut(i).fill(0.0);
            }
        }
    }
    init_group_factors(tensor, scheme, &mut params);
    params
}

/// Largest unfolding (entries) eligible for the spectral initializer.
const SPECTRAL_CAP: usize = 8_000_000;

/// Overwrites the leading factor columns with left singular vectors of each
/// mode's unfolding of the time-averaged tensor. Modes whose unfolding
/// would be too large keep their random columns.
fn init_factors_spectral(tensor: &TemporalTensor, rank: usize, params: &mut ModelParams) {
    let dims = tensor.dims();
    let total_cells: usize = dims.iter().map(|&n| n as usize).product();
    if total_cells > SPECTRAL_CAP {
        return;
    }
    let d = dims.len();
    // column index of a cell in the mode-k unfolding
    let flat_other = |cell: &[u32], k: usize| -> usize {
        let mut idx = 0;
        for (j, &i) in cell.iter().enumerate() {
            if j != k {
                idx = idx * dims[j] as usize + i as usize;
            }
        }
        idx
    };
    for k in 0..d {
        let n_k = dims[k] as usize;
        let others = total_cells / n_k;
        let mut unfolding = DMatrix::<f64>::zeros(n_k, others);
        for (cell, series) in tensor.cells() {
            let mean = series.values().iter().sum::<f64>() / series.len() as f64;
            unfolding[(cell[k] as usize, flat_other(cell, k))] = mean;
        }
        let svd = unfolding.svd(true, false);
        let Some(u) = svd.u else { continue };
        for j in 0..rank.min(u.ncols()) {
            if svd.singular_values[j] > 1e-12 {
                params.factors[k].set_column(j, &u.column(j));
            }
        }
    }
}

/// Initializes subgroup factors from a rank-1 power iteration on the array
/// of mean responses per subgroup combination and time group; all-ones when
/// the means carry no signal.
fn init_group_factors(tensor: &TemporalTensor, scheme: &SubgroupScheme, params: &mut ModelParams) {
    for q in &mut params.group_factors {
        q.fill(1.0);
    }
    let d = scheme.order();
    let mut sizes: Vec<usize> = (0..d).map(|k| scheme.num_mode_groups(k)).collect();
    sizes.push(scheme.num_time_groups());
    let total: usize = sizes.iter().product();
    if total > SPECTRAL_CAP {
        return;
    }
    let mut sums = vec![0.0; total];
    let mut counts = vec![0usize; total];
    let mut groups = vec![0usize; d + 1];
    for (cell, series) in tensor.cells() {
        for k in 0..d {
            groups[k] = scheme
                .mode_group(k, cell[k])
                .expect("tensor indices fit the scheme");
        }
        for (&t, &y) in series.times().iter().zip(series.values()) {
            groups[d] = scheme.time_group(t);
            let mut idx = 0;
            for (g, &m) in groups.iter().zip(&sizes) {
                idx = idx * m + g;
            }
            sums[idx] += y;
            counts[idx] += 1;
        }
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    if means.iter().all(|&v| v.abs() < 1e-12) {
        return;
    }
    // rank-1 factors over (d+1) modes; the time-group factor is discarded
    // because the first subgroup-trend update supplies scale and shape
    let mut vecs: Vec<Vec<f64>> = sizes.iter().map(|&m| vec![1.0; m]).collect();
    for _ in 0..30 {
        for k in 0..=d {
            let mut new = vec![0.0; sizes[k]];
            for (idx, &v) in means.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let mut rest = idx;
                let mut coord = vec![0usize; d + 1];
                for j in (0..=d).rev() {
                    coord[j] = rest % sizes[j];
                    rest /= sizes[j];
                }
                let mut w = v;
                for j in 0..=d {
                    if j != k {
                        w *= vecs[j][coord[j]];
                    }
                }
                new[coord[k]] += w;
            }
            let norm = new.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return;
            }
            for v in &mut new {
                *v /= norm;
            }
            vecs[k] = new;
        }
    }
    for k in 0..d {
        // deterministic sign: largest-magnitude entry positive
        let lead = vecs[k]
            .iter()
            .cloned()
            .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        let flip = if lead < 0.0 { -1.0 } else { 1.0 };
        for (e, &v) in vecs[k].iter().enumerate() {
            params.group_factors[k][e] = flip * v * (sizes[k] as f64).sqrt();
        }
    }
}

/// Reorders the factorization into a canonical column permutation: columns
/// sorted by the first mode's loading columns, descending lexicographically
/// row by row. Trend coefficient rows move with their columns, so
/// predictions are unchanged.
pub fn align_permutation(params: &mut ModelParams) {
    let r = params.rank();
    if r < 2 {
        return;
    }
    let first = params.factors[0].clone();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        for i in 0..first.nrows() {
            match first[(i, b)].total_cmp(&first[(i, a)]) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    for f in &mut params.factors {
        let old = f.clone();
        for (new_j, &old_j) in order.iter().enumerate() {
            f.set_column(new_j, &old.column(old_j));
        }
    }
    let old = params.trend_coefs.clone();
    for (new_j, &old_j) in order.iter().enumerate() {
        params.trend_coefs.set_row(new_j, &old.row(old_j));
    }
}

/// Fits from a fresh random initialization; see [`fit_from`].
pub fn fit(
    tensor: &TemporalTensor,
    scheme: &SubgroupScheme,
    basis: &SplineBasis,
    corr: &CorrelationSpec,
    opts: &FitOptions,
) -> Result<(ModelParams, FitReport)> {
    opts.validate()?;
    let init = init_params(tensor, scheme, basis, opts.rank, opts.seed);
    fit_from(tensor, scheme, basis, corr, opts, init)
}

/// Runs block coordinate descent from the given starting point and returns
/// the aligned parameters with a fit report. One iteration has two steps:
/// the first solves the per-mode loading and trend subproblems and accepts
/// the best one, the second does the same over the subgroup loadings and
/// subgroup trend. Every accepted block is an exact minimizer, so the
/// objective trace is non-increasing. The loop stops once the largest
/// relative improvement seen across an iteration's candidates falls below
/// `epsilon`, or at `max_iter`.
pub fn fit_from(
    tensor: &TemporalTensor,
    scheme: &SubgroupScheme,
    basis: &SplineBasis,
    corr: &CorrelationSpec,
    opts: &FitOptions,
    init: ModelParams,
) -> Result<(ModelParams, FitReport)> {
    let start = Instant::now();
    opts.validate()?;
    if basis.size() > 64 {
        return Err(Error::Config {
            msg: format!(
                "spline basis of size {} exceeds the subproblem cap of 64",
                basis.size()
            ),
        });
    }
    if tensor.num_observations() == 0 {
        return Err(Error::EmptySplit {
            msg: "cannot fit an empty tensor".into(),
        });
    }
    if init.rank() != opts.rank {
        return Err(Error::Shape {
            msg: format!(
                "initial parameters have rank {}, options say {}",
                init.rank(),
                opts.rank
            ),
        });
    }
    init.validate(tensor.dims(), scheme, basis)?;
    let prep = Prep::build(tensor, scheme, basis, *corr, opts.lambda, opts.rank)?;

    let d = tensor.order();
    let mut params = init;
    let mut cache = Cache::build(&prep, &params);
    let mut objective = objective_value(&prep, &params, &cache);
    let mut trace = vec![objective];
    let mut accepted: Vec<String> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    // freezing depends only on observation counts, which are fixed per fit
    let mut frozen_report: Vec<String> = Vec::new();
    for (k, groups) in prep.group_obs.iter().enumerate() {
        for (e, &count) in groups.iter().enumerate() {
            if count < 2 {
                frozen_report.push(format!("group-factors:{}:{}", k + 1, e + 1));
            }
        }
    }
    for (e, &count) in prep.tgroup_obs.iter().enumerate() {
        if count < 2 {
            frozen_report.push(format!("group-trend:{}", e + 1));
        }
    }
    if !frozen_report.is_empty() {
        log::warn!(
            "{} subgroup coordinate(s) have fewer than two observations and stay frozen: {}",
            frozen_report.len(),
            frozen_report.join(", ")
        );
    }
    // the subgroup-trend normal matrix only changes when subgroup loadings do
    let mut beta_gram: Option<DMatrix<f64>> = None;

    let step_individual: Vec<BlockId> = (0..d)
        .map(BlockId::Factor)
        .chain(std::iter::once(BlockId::Trend))
        .collect();
    let step_subgroup: Vec<BlockId> = (0..d)
        .map(BlockId::GroupFactor)
        .chain(std::iter::once(BlockId::GroupTrend))
        .collect();

    let solve = |id: BlockId,
                 params: &ModelParams,
                 cache: &Cache,
                 beta_gram: &mut Option<DMatrix<f64>>|
     -> Result<Candidate> {
        let mut scratch_frozen = Vec::new();
        match id {
            BlockId::Factor(k) => candidate_factor(&prep, params, cache, k),
            BlockId::Trend => candidate_trend(&prep, params, cache),
            BlockId::GroupFactor(k) => {
                candidate_group_factor(&prep, params, cache, k, &mut scratch_frozen)
            }
            BlockId::GroupTrend => {
                candidate_group_trend(&prep, params, cache, beta_gram, &mut scratch_frozen)
            }
        }
    };
    let apply = |cand: Candidate,
                 params: &mut ModelParams,
                 cache: &mut Cache,
                 beta_gram: &mut Option<DMatrix<f64>>|
     -> Result<f64> {
        match cand.id {
            BlockId::Factor(k) => {
                params.factors[k] = cand.matrix.expect("factor candidate");
                cache.rebuild_u(&prep, params);
            }
            BlockId::Trend => {
                params.trend_coefs = cand.matrix.expect("trend candidate");
                cache.rebuild_h(&prep, params);
            }
            BlockId::GroupFactor(k) => {
                params.group_factors[k] = cand.vector.expect("group factor candidate");
                cache.rebuild_uq(&prep, params);
                *beta_gram = None;
            }
            BlockId::GroupTrend => {
                params.group_trend_coefs = cand.matrix.expect("group trend candidate");
                cache.rebuild_g(&prep, params);
            }
        }
        let direct = objective_value(&prep, params, cache);
        debug_assert!(
            (direct - cand.value).abs() <= 1e-4 * direct.abs().max(1.0),
            "closed-form objective {} drifted from direct evaluation {}",
            cand.value,
            direct
        );
        if !direct.is_finite() {
            return Err(Error::Divergence {
                block: cand.id.label(),
                value: direct,
            });
        }
        Ok(direct)
    };

    for iter in 1..=opts.max_iter {
        iterations = iter;
        let mut iter_max_j = f64::NEG_INFINITY;
        for step in [&step_individual, &step_subgroup] {
            if opts.accept_all {
                for &id in step.iter() {
                    let cand = solve(id, &params, &cache, &mut beta_gram)?;
                    let j = improvement(cand.value, objective);
                    iter_max_j = iter_max_j.max(j);
                    if j > 0.0 {
                        let label = cand.id.label();
                        objective = apply(cand, &mut params, &mut cache, &mut beta_gram)?;
                        trace.push(objective);
                        accepted.push(label);
                    }
                }
            } else {
                let mut best: Option<(f64, Candidate)> = None;
                for &id in step.iter() {
                    let cand = solve(id, &params, &cache, &mut beta_gram)?;
                    let j = improvement(cand.value, objective);
                    iter_max_j = iter_max_j.max(j);
                    if best.as_ref().is_none_or(|(bj, _)| j > *bj) {
                        best = Some((j, cand));
                    }
                }
                let (best_j, cand) = best.expect("every step has candidates");
                if best_j > 0.0 {
                    let label = cand.id.label();
                    objective = apply(cand, &mut params, &mut cache, &mut beta_gram)?;
                    trace.push(objective);
                    log::debug!(
                        "iter={iter} accepted={label} improvement={best_j:.4e} objective={objective:.8e}"
                    );
                    accepted.push(label);
                }
            }
        }
        if iter_max_j < opts.epsilon {
            converged = true;
            log::debug!(
                "iter={iter} converged: best improvement {iter_max_j:.3e} < {}",
                opts.epsilon
            );
            break;
        }
    }

    align_permutation(&mut params);
    let report = FitReport {
        iterations,
        objective_trace: trace,
        accepted_blocks: accepted,
        converged,
        final_lambda: opts.lambda,
        frozen: frozen_report,
        wallclock_secs: start.elapsed().as_secs_f64(),
    };
    log::info!(
        "fit done: iterations={} converged={} objective={:.6e} wallclock={:.2}s",
        report.iterations,
        report.converged,
        report.objective_trace.last().copied().unwrap_or(f64::NAN),
        report.wallclock_secs
    );
    Ok((params, report))
}

/// Validation score of one ridge value during tuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub rmse: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Result of a grid search over the ridge penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneReport {
    pub best_lambda: f64,
    pub table: Vec<LambdaScore>,
}

/// Fits once per grid value (warm-starting each fit from the previous
/// one) and scores root-mean-square error on the held-out observations.
/// Ties within `1e-12` go to the smaller ridge value.
pub fn tune_lambda(
    train: &TemporalTensor,
    validation: &TemporalTensor,
    scheme: &SubgroupScheme,
    basis: &SplineBasis,
    corr: &CorrelationSpec,
    opts: &FitOptions,
    grid: &[f64],
) -> Result<TuneReport> {
    if grid.is_empty() {
        return Err(Error::Config {
            msg: "ridge grid must not be empty".into(),
        });
    }
    if grid.iter().any(|&l| !l.is_finite() || l < 0.0) {
        return Err(Error::Config {
            msg: format!("ridge grid must be finite and nonnegative, got {grid:?}"),
        });
    }
    if validation.num_observations() == 0 {
        return Err(Error::EmptySplit {
            msg: "validation tensor has no observations".into(),
        });
    }

    let mut table = Vec::with_capacity(grid.len());
    let mut warm: Option<ModelParams> = None;
    let mut last_err: Option<Error> = None;
    for &lambda in grid {
        let run_opts = FitOptions { lambda, ..*opts };
        let attempt = match warm.clone() {
            Some(start) => fit_from(train, scheme, basis, corr, &run_opts, start),
            None => fit(train, scheme, basis, corr, &run_opts),
        };
        match attempt {
            Ok((params, report)) => {
                let mut sq = 0.0;
                let mut n = 0usize;
                for (cell, t, y) in validation.iter_observations() {
                    let pred = crate::model::predict_cell(&params, scheme, basis, cell, t)?;
                    sq += (y - pred) * (y - pred);
                    n += 1;
                }
                let rmse = (sq / n as f64).sqrt();
                table.push(LambdaScore {
                    lambda,
                    rmse,
                    iterations: report.iterations,
                    converged: report.converged,
                });
                warm = Some(params);
            }
            Err(e) => {
                log::warn!("tuning fit at lambda={lambda} failed: {e}");
                table.push(LambdaScore {
                    lambda,
                    rmse: f64::INFINITY,
                    iterations: 0,
                    converged: false,
                });
                last_err = Some(e);
            }
        }
    }

    let best_lambda = select_lambda(&table).ok_or_else(|| {
        last_err.unwrap_or(Error::Config {
            msg: "no ridge value produced a finite validation score".into(),
        })
    })?;
    Ok(TuneReport { best_lambda, table })
}

/// Smallest-lambda argmin of the validation score, treating differences
/// within `1e-12` as ties.
fn select_lambda(table: &[LambdaScore]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for row in table {
        if !row.rmse.is_finite() {
            continue;
        }
        best = Some(match best {
            None => (row.lambda, row.rmse),
            Some((bl, br)) => {
                if row.rmse < br - 1e-12 || ((row.rmse - br).abs() <= 1e-12 && row.lambda < bl) {
                    (row.lambda, row.rmse)
                } else {
                    (bl, br)
                }
            }
        });
    }
    best.map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{objective, predict_cell};
    use crate::spline::SplineBasis;
    use crate::tensor::TimeGroups;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn basis_linear() -> SplineBasis {
        SplineBasis::new(1, vec![]).unwrap()
    }

    #[test]
    fn improvement_definition() {
        assert_abs_diff_eq!(improvement(90.0, 100.0), 0.1, epsilon = 1e-15);
        assert_eq!(improvement(1.0, 0.0), 0.0);
        assert_eq!(improvement(5.0, -1.0), 0.0);
    }

    #[test]
    fn select_lambda_prefers_smaller_on_ties() {
        let row = |lambda, rmse| LambdaScore {
            lambda,
            rmse,
            iterations: 1,
            converged: true,
        };
        assert_eq!(
            select_lambda(&[row(0.5, 1.0), row(0.2, 1.0)]).unwrap(),
            0.2
        );
        assert_eq!(
            select_lambda(&[row(0.5, 1.0), row(0.2, 2.0)]).unwrap(),
            0.5
        );
        assert_eq!(select_lambda(&[row(0.5, f64::INFINITY)]), None);
    }

    /// d=2 instance with every block identifiable, for direct update tests.
    fn small_instance() -> (TemporalTensor, SubgroupScheme, SplineBasis) {
        let mut tensor = TemporalTensor::new(vec![3, 2]).unwrap();
        let times = [0.0, 0.3, 0.6, 0.9];
        let mut v = 0.0f64;
        for i in 0..3u32 {
            for j in 0..2u32 {
                for (ti, &t) in times.iter().enumerate() {
                    if (i + j) as usize % 2 == ti % 2 {
                        continue;
                    }
                    v += 1.0;
                    tensor.insert(&[i, j], t, (v * 0.37).sin() * 2.0).unwrap();
                }
            }
        }
        let scheme = SubgroupScheme::new(
            vec![vec![0, 1, 0], vec![0, 1]],
            TimeGroups::Intervals {
                breakpoints: vec![0.5],
                labels: vec![1, 2],
            },
        )
        .unwrap();
        let basis = SplineBasis::new(2, vec![0.5]).unwrap();
        (tensor, scheme, basis)
    }

    /// Derivative-free quadratic minimization: exact for quadratics via one
    /// Newton step built from finite second differences.
    fn minimize_quadratic(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64) -> Vec<f64> {
        let n = x0.len();
        let f0 = f(x0);
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        let bump = |x: &[f64], i: usize, s: f64| {
            let mut y = x.to_vec();
            y[i] += s;
            y
        };
        for i in 0..n {
            let fp = f(&bump(x0, i, step));
            let fm = f(&bump(x0, i, -step));
            g[i] = (fp - fm) / (2.0 * step);
            h[(i, i)] = (fp - 2.0 * f0 + fm) / (step * step);
        }
        for i in 0..n {
            for j in i + 1..n {
                let fpp = f(&bump(&bump(x0, i, step), j, step));
                let fp0 = f(&bump(x0, i, step));
                let f0p = f(&bump(x0, j, step));
                let mixed = (fpp - fp0 - f0p + f0) / (step * step);
                h[(i, j)] = mixed;
                h[(j, i)] = mixed;
            }
        }
        let delta = h.lu().solve(&g).expect("nonsingular quadratic");
        x0.iter().zip(delta.iter()).map(|(x, d)| x - d).collect()
    }

    fn random_params(
        dims: &[u32],
        rank: usize,
        scheme: &SubgroupScheme,
        basis: &SplineBasis,
        seed: u64,
    ) -> ModelParams {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(dims, rank, scheme, basis);
        let mut fill = |m: &mut [f64]| {
            for v in m {
                *v = rng.random_range(-1.0..1.0);
            }
        };
        for f in &mut p.factors {
            fill(f.as_mut_slice());
        }
        for q in &mut p.group_factors {
            fill(q.as_mut_slice());
        }
        fill(p.trend_coefs.as_mut_slice());
        fill(p.group_trend_coefs.as_mut_slice());
        p
    }

    /// Each block update must land on the exact constrained minimizer; the
    /// oracle recovers it from the black-box objective alone.
    #[test]
    fn block_updates_match_quadratic_oracle() {
        let (tensor, scheme, basis) = small_instance();
        let corrs = [
            CorrelationSpec::independence(),
            CorrelationSpec::new(CorrelationStructure::Ar1, 0.6, 1.4).unwrap(),
            CorrelationSpec::new(CorrelationStructure::Exchangeable, 0.3, 0.8).unwrap(),
        ];
        for (case, corr) in corrs.iter().enumerate() {
            let lambda = 0.7;
            let params = random_params(&[3, 2], 2, &scheme, &basis, 100 + case as u64);
            let prep = Prep::build(&tensor, &scheme, &basis, *corr, lambda, 2).unwrap();
            let cache = Cache::build(&prep, &params);

            // mode-0 loading block
            let cand = candidate_factor(&prep, &params, &cache, 0).unwrap();
            let flat: Vec<f64> = params.factors[0].iter().copied().collect();
            let f = |x: &[f64]| {
                let mut p = params.clone();
                p.factors[0] = DMatrix::from_column_slice(3, 2, x);
                objective(&p, &tensor, &scheme, &basis, corr, lambda).unwrap()
            };
            let oracle = minimize_quadratic(&f, &flat, 0.5);
            let got = cand.matrix.unwrap();
            for (a, b) in got.iter().zip(&oracle) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
            }
            assert_abs_diff_eq!(
                cand.value,
                f(&got.iter().copied().collect::<Vec<_>>()),
                epsilon = 1e-8 * cand.value.abs().max(1.0)
            );

            // mode-1 subgroup loadings
            let mut frozen = Vec::new();
            let cand = candidate_group_factor(&prep, &params, &cache, 1, &mut frozen).unwrap();
            assert!(frozen.is_empty());
            let flat: Vec<f64> = params.group_factors[1].iter().copied().collect();
            let f = |x: &[f64]| {
                let mut p = params.clone();
                p.group_factors[1] = DVector::from_column_slice(x);
                objective(&p, &tensor, &scheme, &basis, corr, lambda).unwrap()
            };
            let oracle = minimize_quadratic(&f, &flat, 0.5);
            for (a, b) in cand.vector.unwrap().iter().zip(&oracle) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
            }

            // trend coefficients
            let cand = candidate_trend(&prep, &params, &cache).unwrap();
            let flat: Vec<f64> = (0..2 * basis.size())
                .map(|i| params.trend_coefs[(i / basis.size(), i % basis.size())])
                .collect();
            let f = |x: &[f64]| {
                let mut p = params.clone();
                p.trend_coefs = DMatrix::from_fn(2, basis.size(), |j, i| x[j * basis.size() + i]);
                objective(&p, &tensor, &scheme, &basis, corr, lambda).unwrap()
            };
            let oracle = minimize_quadratic(&f, &flat, 0.5);
            let got = cand.matrix.unwrap();
            for (i, &b) in oracle.iter().enumerate() {
                assert_abs_diff_eq!(got[(i / basis.size(), i % basis.size())], b, epsilon = 1e-6);
            }

            // subgroup-trend coefficients (joint across time groups)
            let mut frozen = Vec::new();
            let mut gram = None;
            let cand =
                candidate_group_trend(&prep, &params, &cache, &mut gram, &mut frozen).unwrap();
            assert!(frozen.is_empty());
            let m = basis.size();
            let flat: Vec<f64> = (0..2 * m)
                .map(|i| params.group_trend_coefs[(i / m, i % m)])
                .collect();
            let f = |x: &[f64]| {
                let mut p = params.clone();
                p.group_trend_coefs = DMatrix::from_fn(2, m, |e, i| x[e * m + i]);
                objective(&p, &tensor, &scheme, &basis, corr, lambda).unwrap()
            };
            let oracle = minimize_quadratic(&f, &flat, 0.5);
            let got = cand.matrix.unwrap();
            for (i, &b) in oracle.iter().enumerate() {
                assert_abs_diff_eq!(got[(i / m, i % m)], b, epsilon = 1e-6);
            }
        }
    }

    /// Two cells observed at t = 0 with unit designs: the trend update is a
    /// ridge mean, landing on intercept 2 with zero slope.
    #[test]
    fn trend_update_on_intercept_data_is_the_mean() {
        let mut tensor = TemporalTensor::new(vec![2, 1]).unwrap();
        tensor.insert(&[0, 0], 0.0, 1.0).unwrap();
        tensor.insert(&[1, 0], 0.0, 3.0).unwrap();
        let scheme = SubgroupScheme::uniform(&[2, 1]);
        let basis = basis_linear();
        let mut params = ModelParams::zeros(&[2, 1], 1, &scheme, &basis);
        params.factors[0] = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        params.factors[1] = DMatrix::from_row_slice(1, 1, &[1.0]);
        // subgroup term disabled
        params.group_factors[0] = DVector::from_vec(vec![0.0]);
        params.group_factors[1] = DVector::from_vec(vec![0.0]);

        let lambda = 1e-9;
        let prep = Prep::build(
            &tensor,
            &scheme,
            &basis,
            CorrelationSpec::independence(),
            lambda,
            1,
        )
        .unwrap();
        let cache = Cache::build(&prep, &params);
        let cand = candidate_trend(&prep, &params, &cache).unwrap();
        let got = cand.matrix.unwrap();
        assert_abs_diff_eq!(got[(0, 0)], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(got[(0, 1)], 0.0, epsilon = 1e-12);
    }

    /// One observation with unit design and response 2 under lambda = 1
    /// shrinks the loading to 2 / (1 + 1) = 1.
    #[test]
    fn factor_update_is_a_scalar_ridge_solve() {
        let mut tensor = TemporalTensor::new(vec![1, 1]).unwrap();
        tensor.insert(&[0, 0], 0.0, 2.0).unwrap();
        let scheme = SubgroupScheme::uniform(&[1, 1]);
        let basis = basis_linear();
        let mut params = ModelParams::zeros(&[1, 1], 1, &scheme, &basis);
        params.factors[1] = DMatrix::from_row_slice(1, 1, &[1.0]);
        params.trend_coefs = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        params.group_factors[0] = DVector::from_vec(vec![0.0]);
        params.group_factors[1] = DVector::from_vec(vec![0.0]);
        let prep = Prep::build(
            &tensor,
            &scheme,
            &basis,
            CorrelationSpec::independence(),
            1.0,
            1,
        )
        .unwrap();
        let cache = Cache::build(&prep, &params);
        let cand = candidate_factor(&prep, &params, &cache, 0).unwrap();
        assert_abs_diff_eq!(cand.matrix.unwrap()[(0, 0)], 1.0, epsilon = 1e-12);
    }

    /// Subgroup loadings solve per-subgroup scalar problems: with g = 1,
    /// other loadings 1 and zero individual term, the update is the
    /// (shrunken) subgroup mean.
    #[test]
    fn group_factor_update_is_a_subgroup_mean() {
        let mut tensor = TemporalTensor::new(vec![2, 1]).unwrap();
        tensor.insert(&[0, 0], 0.0, 2.0).unwrap();
        tensor.insert(&[0, 0], 0.5, 2.0).unwrap();
        tensor.insert(&[1, 0], 0.25, 6.0).unwrap();
        tensor.insert(&[1, 0], 0.75, 6.0).unwrap();
        let scheme = SubgroupScheme::new(
            vec![vec![0, 1], vec![0]],
            TimeGroups::Single,
        )
        .unwrap();
        let basis = basis_linear();
        let mut params = ModelParams::zeros(&[2, 1], 1, &scheme, &basis);
        params.group_factors[0] = DVector::from_vec(vec![1.0, 1.0]);
        params.group_factors[1] = DVector::from_vec(vec![1.0]);
        params.group_trend_coefs = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let prep = Prep::build(
            &tensor,
            &scheme,
            &basis,
            CorrelationSpec::independence(),
            0.0,
            1,
        )
        .unwrap();
        let cache = Cache::build(&prep, &params);
        let mut frozen = Vec::new();
        let cand = candidate_group_factor(&prep, &params, &cache, 0, &mut frozen).unwrap();
        let got = cand.vector.unwrap();
        assert_abs_diff_eq!(got[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got[1], 6.0, epsilon = 1e-12);
        assert!(frozen.is_empty());
    }

    #[test]
    fn subgroups_with_one_observation_are_frozen() {
        let mut tensor = TemporalTensor::new(vec![2, 1]).unwrap();
        tensor.insert(&[0, 0], 0.0, 2.0).unwrap();
        tensor.insert(&[0, 0], 0.5, 2.0).unwrap();
        tensor.insert(&[1, 0], 0.25, 6.0).unwrap();
        let scheme = SubgroupScheme::new(vec![vec![0, 1], vec![0]], TimeGroups::Single).unwrap();
        let basis = basis_linear();
        let mut params = ModelParams::zeros(&[2, 1], 1, &scheme, &basis);
        params.group_factors[0] = DVector::from_vec(vec![1.0, 7.5]);
        params.group_factors[1] = DVector::from_vec(vec![1.0]);
        params.group_trend_coefs = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let prep = Prep::build(
            &tensor,
            &scheme,
            &basis,
            CorrelationSpec::independence(),
            0.5,
            1,
        )
        .unwrap();
        let cache = Cache::build(&prep, &params);
        let mut frozen = Vec::new();
        let cand = candidate_group_factor(&prep, &params, &cache, 0, &mut frozen).unwrap();
        let got = cand.vector.unwrap();
        assert_eq!(got[1], 7.5, "frozen subgroup keeps its value");
        assert_eq!(frozen, vec!["group-factors:1:2".to_string()]);
    }

    #[test]
    fn zero_design_with_zero_penalty_keeps_previous_value() {
        let a = DMatrix::zeros(2, 2);
        let b = DVector::zeros(2);
        assert!(solve_ridge(a, &b, 0.0, "x").unwrap().is_none());

        // singular but nonzero at lambda = 0 is an error
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            solve_ridge(a, &b, 0.0, "x"),
            Err(Error::RidgeDegenerate { .. })
        ));

        // zero design with positive penalty shrinks to zero
        let a = DMatrix::zeros(2, 2);
        let b = DVector::zeros(2);
        let sol = solve_ridge(a, &b, 0.5, "x").unwrap().unwrap();
        assert_eq!(sol, DVector::from_vec(vec![0.0, 0.0]));
    }

    fn synthetic_rank1(
        dims: &[u32],
        seed: u64,
        noise: f64,
    ) -> (TemporalTensor, SubgroupScheme) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut tensor = TemporalTensor::new(dims.to_vec()).unwrap();
        let loadings: Vec<Vec<f64>> = dims
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_range(0.5..1.5)).collect())
            .collect();
        let times: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        let mut index = vec![0u32; dims.len()];
        loop {
            for &t in &times {
                let h = 2.0 * t + 1.0;
                let mut y = h;
                for (k, &i) in index.iter().enumerate() {
                    y *= loadings[k][i as usize];
                }
                let e: f64 = rng.random_range(-1.0..1.0);
                tensor.insert(&index, t, y + noise * e).unwrap();
            }
            let mut k = dims.len();
            loop {
                if k == 0 {
                    return (tensor, SubgroupScheme::uniform(dims));
                }
                k -= 1;
                index[k] += 1;
                if index[k] < dims[k] {
                    break;
                }
                index[k] = 0;
            }
        }
    }

    #[test]
    fn fit_recovers_a_noiseless_rank1_tensor() {
        let (tensor, scheme) = synthetic_rank1(&[5, 4, 3], 9, 0.0);
        let basis = SplineBasis::new(2, vec![0.5]).unwrap();
        let opts = FitOptions {
            rank: 1,
            lambda: 1e-6,
            epsilon: 1e-10,
            max_iter: 200,
            seed: 3,
            accept_all: false,
        };
        let corr = CorrelationSpec::independence();
        let (params, report) = fit(&tensor, &scheme, &basis, &corr, &opts).unwrap();
        let mut sq = 0.0;
        let mut n = 0;
        for (cell, t, y) in tensor.iter_observations() {
            let p = predict_cell(&params, &scheme, &basis, cell, t).unwrap();
            sq += (y - p) * (y - p);
            n += 1;
        }
        let rmse = (sq / n as f64).sqrt();
        assert!(rmse < 1e-2, "training rmse {rmse} after {} iters", report.iterations);
    }

    #[test]
    fn objective_trace_is_monotone_and_matches_the_reference_objective() {
        let (tensor, scheme, basis) = small_instance();
        let corr = CorrelationSpec::new(CorrelationStructure::Ar1, 0.5, 1.2).unwrap();
        let opts = FitOptions {
            rank: 2,
            lambda: 0.3,
            epsilon: 1e-7,
            max_iter: 120,
            seed: 11,
            accept_all: false,
        };
        let (params, report) = fit(&tensor, &scheme, &basis, &corr, &opts).unwrap();
        for w in report.objective_trace.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-10),
                "objective increased: {} -> {}",
                w[0],
                w[1]
            );
        }
        let reference = objective(&params, &tensor, &scheme, &basis, &corr, 0.3).unwrap();
        let last = *report.objective_trace.last().unwrap();
        assert_abs_diff_eq!(last, reference, epsilon = 1e-8 * reference.max(1.0));
    }

    #[test]
    fn fits_are_deterministic_given_a_seed() {
        let (tensor, scheme, basis) = small_instance();
        let corr = CorrelationSpec::new(CorrelationStructure::Exchangeable, 0.2, 1.0).unwrap();
        let opts = FitOptions {
            rank: 2,
            lambda: 0.5,
            epsilon: 1e-6,
            max_iter: 60,
            seed: 21,
            accept_all: false,
        };
        let (p1, r1) = fit(&tensor, &scheme, &basis, &corr, &opts).unwrap();
        let (p2, r2) = fit(&tensor, &scheme, &basis, &corr, &opts).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.objective_trace, r2.objective_trace);
        assert_eq!(r1.accepted_blocks, r2.accepted_blocks);
    }

    #[test]
    fn infinite_epsilon_stops_after_one_iteration() {
        let (tensor, scheme, basis) = small_instance();
        let corr = CorrelationSpec::independence();
        let opts = FitOptions {
            rank: 1,
            lambda: 1.0,
            epsilon: f64::INFINITY,
            max_iter: 50,
            seed: 0,
            accept_all: false,
        };
        let (_, report) = fit(&tensor, &scheme, &basis, &corr, &opts).unwrap();
        assert_eq!(report.iterations, 1);
        assert!(report.converged);
        // one iteration runs both steps, so at most two blocks are accepted
        assert!(report.accepted_blocks.len() <= 2);
    }

    #[test]
    fn unobserved_subjects_keep_zero_loading_rows() {
        let mut tensor = TemporalTensor::new(vec![3, 2]).unwrap();
        for (i, t) in [(0u32, 0.0), (0, 0.5), (1, 0.25), (1, 0.75)] {
            tensor.insert(&[i, 0], t, 1.0 + t).unwrap();
            tensor.insert(&[i, 1], t, 2.0 - t).unwrap();
        }
        // subject 3 of mode 1 never observed
        let scheme = SubgroupScheme::uniform(&[3, 2]);
        let basis = basis_linear();
        let corr = CorrelationSpec::independence();
        let opts = FitOptions {
            rank: 2,
            lambda: 0.1,
            epsilon: 1e-6,
            max_iter: 80,
            seed: 5,
            accept_all: false,
        };
        let (params, _) = fit(&tensor, &scheme, &basis, &corr, &opts).unwrap();
        for j in 0..2 {
            assert_eq!(params.factors[0][(2, j)], 0.0);
        }
    }

    #[test]
    fn alignment_orders_columns_and_preserves_predictions() {
        let scheme = SubgroupScheme::uniform(&[2, 2]);
        let basis = basis_linear();
        let mut params = ModelParams::zeros(&[2, 2], 2, &scheme, &basis);
        params.factors[0] = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 0.5, 0.5]);
        params.factors[1] = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 3.0]);
        params.trend_coefs = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let before: Vec<f64> = (0..2)
            .flat_map(|i| {
                (0..2).map(move |j| (i as u32, j as u32))
            })
            .map(|(i, j)| predict_cell(&params, &scheme, &basis, &[i, j], 0.7).unwrap())
            .collect();
        align_permutation(&mut params);
        // columns sorted descending by first row of mode-1 loadings: 3 before 1
        assert_eq!(params.factors[0][(0, 0)], 3.0);
        assert_eq!(params.factors[0][(0, 1)], 1.0);
        let after: Vec<f64> = (0..2)
            .flat_map(|i| {
                (0..2).map(move |j| (i as u32, j as u32))
            })
            .map(|(i, j)| predict_cell(&params, &scheme, &basis, &[i, j], 0.7).unwrap())
            .collect();
        for (a, b) in before.iter().zip(&after) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn permuted_initialization_converges_to_the_same_aligned_solution() {
        let (tensor, scheme, basis) = small_instance();
        let corr = CorrelationSpec::independence();
        let opts = FitOptions {
            rank: 2,
            lambda: 0.4,
            epsilon: 1e-12,
            max_iter: 1000,
            seed: 17,
            accept_all: false,
        };
        let init = init_params(&tensor, &scheme, &basis, 2, opts.seed);
        let mut swapped = init.clone();
        for f in &mut swapped.factors {
            let c0 = f.column(0).clone_owned();
            let c1 = f.column(1).clone_owned();
            f.set_column(0, &c1);
            f.set_column(1, &c0);
        }
        let (p1, _) = fit_from(&tensor, &scheme, &basis, &corr, &opts, init).unwrap();
        let (p2, _) = fit_from(&tensor, &scheme, &basis, &corr, &opts, swapped).unwrap();
        // both runs align to the same canonical permutation
        for (a, b) in p1.factors[0].iter().zip(p2.factors[0].iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-4);
        }
    }

    #[test]
    fn tuning_scores_the_grid_and_returns_the_best_lambda() {
        let (tensor, scheme) = synthetic_rank1(&[4, 3], 31, 0.05);
        let (train, val) = tensor.split_trailing_times(2).unwrap();
        let basis = SplineBasis::new(2, vec![0.5]).unwrap();
        let corr = CorrelationSpec::independence();
        let opts = FitOptions {
            rank: 1,
            lambda: 1.0,
            epsilon: 1e-8,
            max_iter: 150,
            seed: 7,
            accept_all: false,
        };
        let grid = [1e-6, 0.1, 1000.0];
        let report = tune_lambda(&train, &val, &scheme, &basis, &corr, &opts, &grid).unwrap();
        assert_eq!(report.table.len(), 3);
        // an absurdly large ridge cannot win on clean rank-1 data
        assert!(report.best_lambda < 1000.0);
        let worst = report.table.iter().find(|r| r.lambda == 1000.0).unwrap();
        let best = report
            .table
            .iter()
            .find(|r| r.lambda == report.best_lambda)
            .unwrap();
        assert!(best.rmse <= worst.rmse);
        assert!(tune_lambda(&train, &val, &scheme, &basis, &corr, &opts, &[]).is_err());
        assert!(
            tune_lambda(&train, &val, &scheme, &basis, &corr, &opts, &[-1.0]).is_err()
        );
    }

    #[test]
    fn exchangeable_correlation_incompatible_with_large_cells_fails_early() {
        let mut tensor = TemporalTensor::new(vec![1, 1]).unwrap();
        for i in 0..10 {
            tensor.insert(&[0, 0], i as f64 / 9.0, 1.0).unwrap();
        }
        let scheme = SubgroupScheme::uniform(&[1, 1]);
        let basis = basis_linear();
        let corr = CorrelationSpec::new(CorrelationStructure::Exchangeable, -0.5, 1.0).unwrap();
        let opts = FitOptions {
            rank: 1,
            lambda: 1.0,
            epsilon: 1e-4,
            max_iter: 10,
            seed: 0,
            accept_all: false,
        };
        let err = fit(&tensor, &scheme, &basis, &corr, &opts).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn subproblem_dimensions_are_capped_at_64() {
        let (tensor, scheme, basis) = small_instance();
        let mut opts = FitOptions {
            rank: 65,
            lambda: 1.0,
            epsilon: 1e-4,
            max_iter: 10,
            seed: 0,
            accept_all: false,
        };
        let err = fit(&tensor, &scheme, &basis, &CorrelationSpec::independence(), &opts).unwrap_err();
        assert!(err.to_string().contains("cap"), "{err}");

        opts.rank = 1;
        let knots: Vec<f64> = (1..=63).map(|i| i as f64 / 64.0).collect();
        let wide = SplineBasis::new(2, knots).unwrap();
        assert!(wide.size() > 64);
        let err = fit(&tensor, &scheme, &wide, &CorrelationSpec::independence(), &opts).unwrap_err();
        assert!(err.to_string().contains("cap"), "{err}");
    }
}

//! Synthetic third-order tensor generator with known ground truth.
//!
//! Produces train/test splits of a 100 x 9 x 100 tensor function observed at
//! T = T1 + T2 uniform time points: three smooth trend components with
//! standard normal loadings, a piecewise subgroup trend over four time
//! groups, deterministic subgroup loadings, controllable missingness, a
//! block of cold-start items that never appears in training, and either
//! independent or AR-1 errors with unit marginal variance. Everything is a
//! pure function of the seed, so replications are reproducible and
//! parallelizable.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SubgroupScheme, TemporalTensor, TimeGroups};

/// Error process for the simulated observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "snake_case", deny_unknown_fields)]
pub enum ErrorModel {
    Independent,
    Ar1 { rho: f64 },
}

/// How sorted time points are assigned to the four time groups.
///
/// Round-robin interleaves groups across the time range, so every group is
/// seen during training. Contiguous blocks put the latest quarter of time
/// points in one group; with a trailing test split that group is never
/// trained, which is only useful for studying that failure mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeAssignment {
    RoundRobin,
    Contiguous,
}

fn default_n() -> [u32; 3] {
    [100, 9, 100]
}
fn default_m() -> [u32; 4] {
    [10, 3, 10, 4]
}
fn default_rank() -> usize {
    3
}
fn default_t1() -> usize {
    12
}
fn default_t2() -> usize {
    8
}
fn default_missing() -> f64 {
    0.8
}
fn default_cold() -> f64 {
    0.3
}
fn default_error() -> ErrorModel {
    ErrorModel::Independent
}
fn default_assignment() -> TimeAssignment {
    TimeAssignment::RoundRobin
}

/// Generator configuration; the defaults reproduce the benchmark design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Mode sizes (subjects, contexts, items).
    #[serde(default = "default_n")]
    pub n: [u32; 3],
    /// Subgroup counts per mode plus the number of time groups.
    #[serde(default = "default_m")]
    pub m: [u32; 4],
    /// Number of trend components (at most 3).
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Training time points (earliest after sorting).
    #[serde(default = "default_t1")]
    pub t1: usize,
    /// Test time points (latest after sorting).
    #[serde(default = "default_t2")]
    pub t2: usize,
    /// Fraction of the full cell x time grid left unobserved.
    #[serde(default = "default_missing")]
    pub missing_fraction: f64,
    /// Fraction of items withheld from training entirely.
    #[serde(default = "default_cold")]
    pub cold_start_fraction: f64,
    #[serde(default = "default_error")]
    pub error: ErrorModel,
    #[serde(default = "default_assignment")]
    pub time_assignment: TimeAssignment,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: default_n(),
            m: default_m(),
            rank: default_rank(),
            t1: default_t1(),
            t2: default_t2(),
            missing_fraction: default_missing(),
            cold_start_fraction: default_cold(),
            error: default_error(),
            time_assignment: default_assignment(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n.iter().any(|&v| v == 0) || self.m.iter().any(|&v| v == 0) {
            return Err(Error::Config {
                msg: format!("mode sizes {:?} and group counts {:?} must be positive", self.n, self.m),
            });
        }
        for k in 0..3 {
            if self.m[k] > self.n[k] {
                return Err(Error::Config {
                    msg: format!("mode {} has {} subgroups but only {} subjects", k + 1, self.m[k], self.n[k]),
                });
            }
        }
        if self.rank == 0 || self.rank > 3 {
            return Err(Error::Config {
                msg: format!("simulated rank {} outside 1..=3 (only three trend components exist)", self.rank),
            });
        }
        if self.m[3] > 4 {
            return Err(Error::Config {
                msg: format!("{} time groups requested but only four subgroup trends exist", self.m[3]),
            });
        }
        if self.t1 == 0 || self.t2 == 0 {
            return Err(Error::Config {
                msg: "both training and test splits need at least one time point".into(),
            });
        }
        if self.t1 + self.t2 < self.m[3] as usize {
            return Err(Error::Config {
                msg: format!(
                    "{} time points cannot cover {} time groups",
                    self.t1 + self.t2,
                    self.m[3]
                ),
            });
        }
        for (name, v) in [
            ("missing_fraction", self.missing_fraction),
            ("cold_start_fraction", self.cold_start_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Bounds {
                    what: name.into(),
                    value: v,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
        }
        if let ErrorModel::Ar1 { rho } = self.error {
            if !rho.is_finite() || rho.abs() >= 1.0 {
                return Err(Error::Bounds {
                    what: "simulated AR-1 correlation".into(),
                    value: rho,
                    lo: -1.0,
                    hi: 1.0,
                });
            }
        }
        Ok(())
    }

    /// Number of item indices reserved for the cold-start block.
    pub fn num_cold_items(&self) -> u32 {
        (self.cold_start_fraction * f64::from(self.n[2])).ceil() as u32
    }
}

/// Trend component `j` (1-based) evaluated at `t`.
pub fn trend_h(j: usize, t: f64) -> Result<f64> {
    check_time(t)?;
    match j {
        1 => Ok((0.3 * std::f64::consts::PI * t).sin()),
        2 => Ok(8.0 * t * (1.0 - t) - 1.0),
        3 => Ok((0.2 * std::f64::consts::PI * t).cos() + 1.0),
        _ => Err(Error::IndexRange {
            what: "trend component".into(),
            got: j,
            max: 3,
        }),
    }
}

/// Subgroup trend for time group `e` (1-based) evaluated at `t`.
pub fn trend_g(e: usize, t: f64) -> Result<f64> {
    check_time(t)?;
    match e {
        1 => Ok(2.0 * t - 1.0),
        2 => Ok(8.0 * (t - 0.5).powi(3)),
        3 => Ok((0.1 * std::f64::consts::PI * t).sin() + (std::f64::consts::PI * t).cos()),
        4 => Ok(-5.0 * t.exp() + 10.0),
        _ => Err(Error::IndexRange {
            what: "time subgroup trend".into(),
            got: e,
            max: 4,
        }),
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Bounds {
            what: "time".into(),
            value: t,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(())
}

/// Ground truth behind one simulated dataset.
#[derive(Debug, Clone)]
pub struct SimTruth {
    /// Per mode: `n_k x r` standard normal individual loadings.
    pub factors: Vec<DMatrix<f64>>,
    /// Per mode: deterministic subgroup loadings, `-1 + 0.4e`, `-1.2 + 0.6e`,
    /// `-0.4 + 0.2e` for 1-based group `e`.
    pub group_factors: Vec<DVector<f64>>,
}

/// One simulated dataset: disjoint train/test splits over a shared time
/// grid, the subgroup scheme, and the generating truth.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub train: TemporalTensor,
    pub test: TemporalTensor,
    pub scheme: SubgroupScheme,
    pub truth: SimTruth,
    /// All T sorted time points; the first `t1` belong to the train split.
    pub times: Vec<f64>,
}

/// Noise-free model value at one cell and time under the generating truth.
pub fn true_mean(
    truth: &SimTruth,
    scheme: &SubgroupScheme,
    cell: &[u32],
    t: f64,
) -> Result<f64> {
    if cell.len() != truth.factors.len() {
        return Err(Error::Shape {
            msg: format!(
                "cell has {} indices, truth has {} modes",
                cell.len(),
                truth.factors.len()
            ),
        });
    }
    let rank = truth.factors[0].ncols();
    let mut value = 0.0;
    for j in 0..rank {
        let mut prod = trend_h(j + 1, t)?;
        for (k, f) in truth.factors.iter().enumerate() {
            prod *= f[(cell[k] as usize, j)];
        }
        value += prod;
    }
    let mut sub = trend_g(scheme.time_group(t) + 1, t)?;
    for (k, q) in truth.group_factors.iter().enumerate() {
        sub *= q[scheme.mode_group(k, cell[k])?];
    }
    Ok(value + sub)
}

/// Balanced 0-based group of `idx` among `groups` round-robin slots.
fn round_robin(idx: usize, groups: usize) -> usize {
    idx % groups
}

/// Balanced 0-based group of `idx` when `len` items are split into
/// `groups` contiguous blocks whose sizes differ by at most one.
fn contiguous(idx: usize, len: usize, groups: usize) -> usize {
    let base = len / groups;
    let rem = len % groups;
    let cut = rem * (base + 1);
    if idx < cut {
        idx / (base + 1)
    } else {
        rem + (idx - cut) / base
    }
}

/// Generates one dataset. All randomness flows from `config.seed`; per-cell
/// error sequences live on distinct generator streams so the output does not
/// depend on iteration order.
pub fn simulate(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let [n1, n2, n3] = config.n.map(|v| v as usize);
    let t_total = config.t1 + config.t2;
    let m_time = config.m[3] as usize;

    // sorted uniform time grid; earliest t1 points train, latest t2 test
    let mut times: Vec<f64> = (0..t_total).map(|_| rng.random_range(0.0..1.0)).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    if times.len() != t_total {
        return Err(Error::Config {
            msg: "uniform time draws collided; use a different seed".into(),
        });
    }

    // time groups as half-open intervals split at midpoints between draws
    let slot_group: Vec<usize> = (0..t_total)
        .map(|s| match config.time_assignment {
            TimeAssignment::RoundRobin => round_robin(s, m_time),
            TimeAssignment::Contiguous => contiguous(s, t_total, m_time),
        })
        .collect();
    let breakpoints: Vec<f64> = times.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let labels: Vec<u32> = slot_group.iter().map(|&g| g as u32 + 1).collect();
    let time_groups = if m_time == 1 {
        TimeGroups::Single
    } else {
        TimeGroups::Intervals {
            breakpoints,
            labels,
        }
    };

    // balanced round-robin subject subgroups keep every group represented
    // among both warm and cold-start subjects
    let mode_groups: Vec<Vec<u32>> = (0..3)
        .map(|k| {
            (0..config.n[k] as usize)
                .map(|i| round_robin(i, config.m[k] as usize) as u32)
                .collect()
        })
        .collect();
    let scheme = SubgroupScheme::new(mode_groups, time_groups)?;

    // latent individual loadings ~ N(0, 1), drawn in a fixed order
    let factors: Vec<DMatrix<f64>> = (0..3)
        .map(|k| {
            DMatrix::from_fn(config.n[k] as usize, config.rank, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            })
        })
        .collect();
    let group_factors: Vec<DVector<f64>> = (0..3)
        .map(|k| {
            let coef = [(-1.0, 0.4), (-1.2, 0.6), (-0.4, 0.2)][k];
            DVector::from_fn(config.m[k] as usize, |e, _| coef.0 + coef.1 * (e as f64 + 1.0))
        })
        .collect();
    let truth = SimTruth {
        factors,
        group_factors,
    };

    // observation sampling: exact count without replacement from the grid
    // minus the cold-start training slots
    let n_cold = config.num_cold_items() as usize;
    let warm = n3 - n_cold;
    let total_slots = n1 * n2 * n3 * t_total;
    let target = (total_slots as f64 * (1.0 - config.missing_fraction)).round() as usize;
    let block = warm * t_total + n_cold * config.t2;
    let universe = n1 * n2 * block;
    if target > universe {
        return Err(Error::Config {
            msg: format!(
                "requested {target} observations but only {universe} cell/time slots \
                 remain after withholding {n_cold} cold-start items from training"
            ),
        });
    }
    let mut picks = rand::seq::index::sample(&mut rng, universe, target).into_vec();
    picks.sort_unstable();

    let mut train = TemporalTensor::new(config.n.to_vec())?;
    let mut test = TemporalTensor::new(config.n.to_vec())?;
    let mut current_cell = usize::MAX;
    let mut errors: Vec<f64> = Vec::new();
    for u in picks {
        let pair = u / block;
        let rem = u % block;
        let (i3, s) = if rem < warm * t_total {
            (rem / t_total, rem % t_total)
        } else {
            let r2 = rem - warm * t_total;
            (warm + r2 / config.t2, config.t1 + r2 % config.t2)
        };
        let i1 = pair / n2;
        let i2 = pair % n2;
        let flat_cell = (i1 * n2 + i2) * n3 + i3;
        if flat_cell != current_cell {
            current_cell = flat_cell;
            errors = cell_errors(config, flat_cell as u64, t_total);
        }
        let cell = [i1 as u32, i2 as u32, i3 as u32];
        let y = true_mean(&truth, &scheme, &cell, times[s])? + errors[s];
        let split = if s < config.t1 { &mut train } else { &mut test };
        split.insert(&cell, times[s], y)?;
    }
    Ok(SimOutput {
        train,
        test,
        scheme,
        truth,
        times,
    })
}

/// Unit-variance error sequence for one cell over the full time grid, on a
/// cell-specific generator stream. AR-1 recursion spans all slots, so the
/// correlation between two observed entries decays with their grid gap even
/// when intermediate slots are unobserved.
fn cell_errors(config: &SimConfig, flat_cell: u64, t_total: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(flat_cell + 1);
    let z: Vec<f64> = (0..t_total).map(|_| rng.sample(StandardNormal)).collect();
    match config.error {
        ErrorModel::Independent => z,
        ErrorModel::Ar1 { rho } => {
            let scale = (1.0 - rho * rho).sqrt();
            let mut out = Vec::with_capacity(t_total);
            let mut prev = z[0];
            out.push(prev);
            for &innov in &z[1..] {
                prev = rho * prev + scale * innov;
                out.push(prev);
            }
            out
        }
    }
}

//! Release gate: one test per acceptance criterion. Each prints a single
//! PASS/FAIL line with the measured quantities, then asserts.
//!
//! The three replicated benchmark studies (independent truth fitted with
//! independence weights, AR-1 truth fitted with matched and mismatched
//! weights) are expensive, so they are computed once in a shared harness
//! and reused by the criteria that need them.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use dtrs::correlation::{CorrelationSpec, CorrelationStructure};
use dtrs::evaluate::{evaluate_model, run_replications, BenchSummary, WarmIndex};
use dtrs::inference::sandwich_covariance;
use dtrs::model::{objective, predict_cell, ModelParams};
use dtrs::pipeline::{fit_with_tuning, FitPipelineConfig};
use dtrs::simulate::{simulate, ErrorModel, SimConfig};
use dtrs::solver::{align_permutation, fit_from, init_params, FitOptions};
use dtrs::spline::{build_basis, knot_count, KnotPlacement, SplineBasis};
use dtrs::tensor::{SubgroupScheme, TemporalTensor, TimeGroups};

const REPS: usize = 10;
const BASE_SEED: u64 = 2024;

/// Prints the verdict line for a criterion, then enforces it.
fn check(criterion: &str, ok: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
}

struct Harness {
    /// Independence-weighted fits on independent-error truth.
    independent: BenchSummary,
    /// AR-1-weighted fits on AR-1 truth (rho = 0.85).
    ar_matched: BenchSummary,
    /// Independence-weighted fits on the same AR-1 truth.
    ar_mismatched: BenchSummary,
}

static HARNESS: OnceLock<Harness> = OnceLock::new();

fn bench_sim(error: ErrorModel) -> SimConfig {
    SimConfig {
        error,
        seed: BASE_SEED,
        ..SimConfig::default()
    }
}

fn bench_fit(correlation: CorrelationStructure) -> FitPipelineConfig {
    FitPipelineConfig {
        correlation,
        seed: BASE_SEED,
        ..FitPipelineConfig::default()
    }
}

fn harness() -> &'static Harness {
    HARNESS.get_or_init(|| {
        let independent = run_replications(
            &bench_sim(ErrorModel::Independent),
            &bench_fit(CorrelationStructure::Independence),
            REPS,
            0.05,
        )
        .expect("independent-truth study completes");
        let ar_truth = bench_sim(ErrorModel::Ar1 { rho: 0.85 });
        let ar_matched = run_replications(
            &ar_truth,
            &bench_fit(CorrelationStructure::Ar1),
            REPS,
            0.05,
        )
        .expect("matched-correlation study completes");
        let ar_mismatched = run_replications(
            &ar_truth,
            &bench_fit(CorrelationStructure::Independence),
            REPS,
            0.05,
        )
        .expect("mismatched-correlation study completes");
        Harness {
            independent,
            ar_matched,
            ar_mismatched,
        }
    })
}

#[test]
fn criterion_1_benchmark_accuracy_and_coverage_bands() {
    let s = &harness().independent;
    let ok = s.completed == REPS
        && (1.37..=1.77).contains(&s.mean_rmse)
        && (0.99..=1.19).contains(&s.mean_mae)
        && (0.92..=0.97).contains(&s.mean_picp);
    check(
        "1",
        ok,
        &format!(
            "{} reps: rmse {} in [1.37, 1.77], mae {} in [0.99, 1.19], picp {} in [0.92, 0.97]",
            s.completed,
            BenchSummary::formatted(s.mean_rmse, s.sd_rmse),
            BenchSummary::formatted(s.mean_mae, s.sd_mae),
            BenchSummary::formatted(s.mean_picp, s.sd_picp),
        ),
    );
}

#[test]
fn criterion_2_matched_correlation_is_no_worse() {
    let h = harness();
    let matched = h.ar_matched.mean_rmse;
    let mismatched = h.ar_mismatched.mean_rmse;
    let ok = h.ar_matched.completed == REPS
        && h.ar_mismatched.completed == REPS
        && matched <= mismatched;
    check(
        "2",
        ok,
        &format!("AR-1 truth: rmse {matched:.4} with matched weights vs {mismatched:.4} with independence weights"),
    );
}

/// Finite-difference Newton step. The per-block objective is exactly
/// quadratic, so one step from any point lands on its global minimizer.
fn minimize_quadratic(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let n = x0.len();
    let base = f(x0);
    let at = |steps: &[(usize, f64)]| {
        let mut x = x0.to_vec();
        for &(i, s) in steps {
            x[i] += s;
        }
        f(&x)
    };
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        let fp = at(&[(i, h)]);
        let fm = at(&[(i, -h)]);
        grad[i] = (fp - fm) / (2.0 * h);
        hess[(i, i)] = (fp - 2.0 * base + fm) / (h * h);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let pp = at(&[(i, h), (j, h)]);
            let pm = at(&[(i, h), (j, -h)]);
            let mp = at(&[(i, -h), (j, h)]);
            let mm = at(&[(i, -h), (j, -h)]);
            let mixed = (pp - pm - mp + mm) / (4.0 * h * h);
            hess[(i, j)] = mixed;
            hess[(j, i)] = mixed;
        }
    }
    let delta = hess.lu().solve(&grad).expect("nonsingular block quadratic");
    x0.iter().zip(delta.iter()).map(|(x, d)| x - d).collect()
}

/// A small random instance: 3x2 tensor, two observations per cell
/// guaranteed (one in each time group) plus random extras, so nothing is
/// frozen for lack of data.
fn exactness_instance(
    seed: u64,
) -> (TemporalTensor, SubgroupScheme, SplineBasis, CorrelationSpec, f64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut tensor = TemporalTensor::new(vec![3, 2]).unwrap();
    let times: Vec<f64> = (0..8).map(|s| s as f64 / 7.0).collect();
    for i in 0..3u32 {
        for j in 0..2u32 {
            for (s, &t) in times.iter().enumerate() {
                // s = 2 and s = 6 are always present, one per time group
                if s == 2 || s == 6 || rng.random_range(0.0..1.0) < 0.5 {
                    tensor
                        .insert(&[i, j], t, rng.random_range(-2.0..2.0))
                        .unwrap();
                }
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
    let basis = build_basis(1, 1, KnotPlacement::Equispaced).unwrap();
    let corr = match seed % 3 {
        0 => CorrelationSpec::independence(),
        1 => CorrelationSpec::new(CorrelationStructure::Ar1, 0.5, 1.2).unwrap(),
        _ => CorrelationSpec::new(CorrelationStructure::Exchangeable, 0.25, 0.9).unwrap(),
    };
    let lambda = [0.3, 0.7, 1.5][(seed % 5) as usize % 3];
    (tensor, scheme, basis, corr, lambda)
}

fn random_params(
    dims: &[u32],
    rank: usize,
    scheme: &SubgroupScheme,
    basis: &SplineBasis,
    rng: &mut ChaCha20Rng,
) -> ModelParams {
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

#[test]
fn criterion_3_block_updates_match_numeric_minimizers() {
    let rank = 2;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut max_err = 0.0f64;
    for instance in 0..50u64 {
        let (tensor, scheme, basis, corr, lambda) = exactness_instance(9_000 + instance);
        let mut rng = ChaCha20Rng::seed_from_u64(instance);
        let init = random_params(tensor.dims(), rank, &scheme, &basis, &mut rng);
        let opts = FitOptions {
            rank,
            lambda,
            epsilon: 1e-12,
            max_iter: 1,
            seed: 0,
            accept_all: true,
        };
        let (fitted, report) =
            fit_from(&tensor, &scheme, &basis, &corr, &opts, init.clone()).unwrap();

        // replay the accepted blocks, solving each subproblem numerically
        // from the same intermediate state the solver saw
        let m = basis.size();
        let mut theta = init;
        for label in &report.accepted_blocks {
            let snapshot = theta.clone();
            let eval = |p: &ModelParams| {
                objective(p, &tensor, &scheme, &basis, &corr, lambda).unwrap()
            };
            match label.as_str() {
                "trend" => {
                    *counts.entry("trend").or_insert(0) += 1;
                    let flat: Vec<f64> = snapshot.trend_coefs.iter().copied().collect();
                    let f = |x: &[f64]| {
                        let mut p = snapshot.clone();
                        p.trend_coefs = DMatrix::from_column_slice(rank, m, x);
                        eval(&p)
                    };
                    let sol = minimize_quadratic(&f, &flat, 0.5);
                    theta.trend_coefs = DMatrix::from_column_slice(rank, m, &sol);
                }
                "group-trend" => {
                    *counts.entry("group-trend").or_insert(0) += 1;
                    let rows = scheme.num_time_groups();
                    let flat: Vec<f64> = snapshot.group_trend_coefs.iter().copied().collect();
                    let f = |x: &[f64]| {
                        let mut p = snapshot.clone();
                        p.group_trend_coefs = DMatrix::from_column_slice(rows, m, x);
                        eval(&p)
                    };
                    let sol = minimize_quadratic(&f, &flat, 0.5);
                    theta.group_trend_coefs = DMatrix::from_column_slice(rows, m, &sol);
                }
                other => {
                    let (kind, k) = other.split_once(':').expect("block label");
                    let k: usize = k.parse::<usize>().unwrap() - 1;
                    if kind == "factors" {
                        *counts.entry("factors").or_insert(0) += 1;
                        let n = tensor.dims()[k] as usize;
                        let flat: Vec<f64> = snapshot.factors[k].iter().copied().collect();
                        let f = |x: &[f64]| {
                            let mut p = snapshot.clone();
                            p.factors[k] = DMatrix::from_column_slice(n, rank, x);
                            eval(&p)
                        };
                        let sol = minimize_quadratic(&f, &flat, 0.5);
                        theta.factors[k] = DMatrix::from_column_slice(n, rank, &sol);
                    } else {
                        *counts.entry("group-factors").or_insert(0) += 1;
                        let flat: Vec<f64> = snapshot.group_factors[k].iter().copied().collect();
                        let f = |x: &[f64]| {
                            let mut p = snapshot.clone();
                            p.group_factors[k] = DVector::from_column_slice(x);
                            eval(&p)
                        };
                        let sol = minimize_quadratic(&f, &flat, 0.5);
                        theta.group_factors[k] = DVector::from_column_slice(&sol);
                    }
                }
            }
        }

        // the solver permutes factor columns for identifiability after the
        // loop; apply the same deterministic alignment to the replay
        align_permutation(&mut theta);

        // the solver's accepted updates must coincide with the replayed
        // numeric minimizers, block by block
        for k in 0..theta.factors.len() {
            max_err = max_err.max((&theta.factors[k] - &fitted.factors[k]).norm());
            max_err = max_err.max((&theta.group_factors[k] - &fitted.group_factors[k]).norm());
        }
        max_err = max_err.max((&theta.trend_coefs - &fitted.trend_coefs).norm());
        max_err = max_err.max((&theta.group_trend_coefs - &fitted.group_trend_coefs).norm());
    }
    let enough = ["factors", "trend", "group-factors", "group-trend"]
        .iter()
        .all(|kind| counts.get(kind).copied().unwrap_or(0) >= 50);
    check(
        "3",
        enough && max_err < 1e-6,
        &format!("updates checked per subproblem {counts:?}, max parameter-norm gap {max_err:.2e}"),
    );
}

#[test]
fn criterion_4_objective_traces_monotone_and_converged() {
    let h = harness();
    let mut fits = 0usize;
    let mut max_uptick = 0.0f64;
    let mut all_converged = true;
    for study in [&h.independent, &h.ar_matched, &h.ar_mismatched] {
        for outcome in &study.outcomes {
            let report = outcome.fit.as_ref().expect("completed replication");
            fits += 1;
            for w in report.objective_trace.windows(2) {
                max_uptick = max_uptick.max((w[1] - w[0]) / w[0].abs().max(1.0));
            }
            all_converged &= report.converged && report.iterations < 500;
        }
    }
    check(
        "4",
        max_uptick <= 1e-10 && all_converged,
        &format!(
            "{fits} fits: max relative objective uptick {max_uptick:.2e}, all converged before 500 iterations"
        ),
    );
}

#[test]
fn criterion_5_noiseless_rank1_recovery() {
    let mut rng = ChaCha20Rng::seed_from_u64(55);
    let dims = vec![6u32, 5, 4];
    let scheme = SubgroupScheme::uniform(&dims);
    let basis = build_basis(2, 1, KnotPlacement::Equispaced).unwrap();
    let loadings: Vec<Vec<f64>> = dims
        .iter()
        .map(|&n| (0..n).map(|_| rng.random_range(0.5..1.5)).collect())
        .collect();
    // the trend is a quadratic, exactly representable by the basis
    let trend = |t: f64| 0.8 + 0.6 * t - 0.9 * t * t;
    let mut tensor = TemporalTensor::new(dims.clone()).unwrap();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let u = loadings[0][i as usize] * loadings[1][j as usize] * loadings[2][k as usize];
                for s in 0..10 {
                    let t = f64::from(s) / 9.0;
                    tensor.insert(&[i, j, k], t, trend(t) * u).unwrap();
                }
            }
        }
    }
    let opts = FitOptions {
        rank: 1,
        lambda: 1e-6,
        epsilon: 1e-12,
        max_iter: 200,
        seed: 55,
        accept_all: false,
    };
    let init = init_params(&tensor, &scheme, &basis, 1, opts.seed);
    let (params, report) = fit_from(&tensor, &scheme, &basis, &CorrelationSpec::independence(), &opts, init).unwrap();
    let mut ss = 0.0;
    let mut n = 0usize;
    for (cell, series) in tensor.cells() {
        for (&t, &y) in series.times().iter().zip(series.values()) {
            let e = y - predict_cell(&params, &scheme, &basis, cell, t).unwrap();
            ss += e * e;
            n += 1;
        }
    }
    let rmse = (ss / n as f64).sqrt();
    check(
        "5",
        rmse < 1e-2 && report.iterations <= 200,
        &format!("training rmse {rmse:.2e} after {} iterations", report.iterations),
    );
}

#[test]
fn criterion_6_cold_start_predictions_equal_the_subgroup_term() {
    let sim = SimConfig {
        n: [15, 3, 12],
        m: [5, 3, 4, 4],
        rank: 2,
        t1: 10,
        t2: 5,
        missing_fraction: 0.3,
        cold_start_fraction: 0.3,
        seed: 66,
        ..SimConfig::default()
    };
    let data = simulate(&sim).unwrap();
    let config = FitPipelineConfig {
        rank: 2,
        max_iter: 60,
        seed: 6,
        ..FitPipelineConfig::default()
    };
    let model = fit_with_tuning(&data.train, &data.scheme, &config, (0.0, 1.0)).unwrap();
    let warm = WarmIndex::from_training(&data.train);
    let mut checked = 0usize;
    let mut max_diff = 0.0f64;
    for (cell, series) in data.test.cells() {
        if warm.is_warm(cell) {
            continue;
        }
        for &t in series.times() {
            let yhat = predict_cell(&model.params, &model.scheme, &model.basis, cell, t).unwrap();
            let b = model.basis.eval(t).unwrap();
            let e = model.scheme.time_group(t);
            let g: f64 = model
                .params
                .group_trend_coefs
                .row(e)
                .iter()
                .zip(&b)
                .map(|(c, v)| c * v)
                .sum();
            let q = model.params.group_product(&model.scheme, cell).unwrap();
            max_diff = max_diff.max((yhat - g * q).abs());
            checked += 1;
        }
    }
    check(
        "6",
        checked > 0 && max_diff < 1e-12,
        &format!("{checked} cold-start predictions, max deviation from the subgroup term {max_diff:.2e}"),
    );
}

#[test]
fn criterion_7_interval_coverage_at_two_levels() {
    // coverage is a property of the method over the simulation design, so
    // pool it across replications; the exact-count sampler keeps the warm
    // point count identical per seed, making the plain mean the pooled rate
    const COVERAGE_REPS: u64 = 5;
    let mut c95 = 0.0;
    let mut c50 = 0.0;
    let mut points = 0usize;
    for i in 0..COVERAGE_REPS {
        let sim = SimConfig {
            seed: BASE_SEED + 700 + i,
            ..bench_sim(ErrorModel::Independent)
        };
        let data = simulate(&sim).unwrap();
        let config = FitPipelineConfig {
            seed: BASE_SEED + 700 + i,
            ..bench_fit(CorrelationStructure::Independence)
        };
        let model = fit_with_tuning(&data.train, &data.scheme, &config, (0.0, 1.0)).unwrap();
        let warm = WarmIndex::from_training(&data.train);
        let at95 = evaluate_model(&model, &data.test, Some(&warm), Some(0.05)).unwrap();
        let at50 = evaluate_model(&model, &data.test, Some(&warm), Some(0.5)).unwrap();
        c95 += at95.picp.unwrap() / COVERAGE_REPS as f64;
        c50 += at50.picp.unwrap() / COVERAGE_REPS as f64;
        points += at95.n_evaluated;
    }
    let ok = points >= 10_000 && (0.92..=0.97).contains(&c95) && (0.45..=0.55).contains(&c50);
    check(
        "7",
        ok,
        &format!(
            "{points} test points over {COVERAGE_REPS} replications: \
             95% coverage {c95:.4} in [0.92, 0.97], 50% coverage {c50:.4} in [0.45, 0.55]"
        ),
    );
}

#[test]
fn criterion_8_sandwich_matches_a_robust_wls_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(88);
    let dims = vec![3u32, 2];
    // periodic time groups interleave across the knot, so every subgroup
    // trend block sees the full basis support and the bread stays invertible
    // at lambda = 0
    let scheme = SubgroupScheme::new(
        vec![vec![0, 1, 0], vec![0, 1]],
        TimeGroups::Periodic { units: 4, groups: 2 },
    )
    .unwrap();
    let basis = build_basis(1, 1, KnotPlacement::Equispaced).unwrap();
    let rank = 2;
    let params = random_params(&dims, rank, &scheme, &basis, &mut rng);
    let mut tensor = TemporalTensor::new(dims).unwrap();
    for i in 0..3u32 {
        for j in 0..2u32 {
            for s in 0..10 {
                let t = f64::from(s) / 9.0;
                tensor
                    .insert(&[i, j], t, rng.random_range(-2.0..2.0))
                    .unwrap();
            }
        }
    }
    assert!(tensor.num_observations() <= 100);

    let corr = CorrelationSpec::independence();
    let sw = sandwich_covariance(&params, &tensor, &scheme, &basis, &corr, 0.0).unwrap();

    // generic robust-WLS oracle assembled from scratch: with identity
    // working covariance, bread = sum W'W and meat = sum (W'r)(W'r)'
    let m = basis.size();
    let dim = (rank + scheme.num_time_groups()) * m;
    let mut bread = DMatrix::<f64>::zeros(dim, dim);
    let mut meat = DMatrix::<f64>::zeros(dim, dim);
    for (cell, series) in tensor.cells() {
        let n = series.len();
        let mut design = DMatrix::<f64>::zeros(n, dim);
        let mut resid = DVector::<f64>::zeros(n);
        for (row, (&t, &y)) in series.times().iter().zip(series.values()).enumerate() {
            let b = basis.eval(t).unwrap();
            for j in 0..rank {
                let mut u = 1.0;
                for (k, &i) in cell.iter().enumerate() {
                    u *= params.factors[k][(i as usize, j)];
                }
                for (c, &bv) in b.iter().enumerate() {
                    design[(row, j * m + c)] = u * bv;
                }
            }
            let e = scheme.time_group(t);
            let q = params.group_product(&scheme, cell).unwrap();
            for (c, &bv) in b.iter().enumerate() {
                design[(row, (rank + e) * m + c)] = q * bv;
            }
            resid[row] = y - predict_cell(&params, &scheme, &basis, cell, t).unwrap();
        }
        bread += design.transpose() * &design;
        let score = design.transpose() * &resid;
        meat += &score * score.transpose();
    }
    let inv = bread.try_inverse().expect("well-conditioned oracle bread");
    let oracle = &inv * meat * &inv;

    let scale = oracle.amax();
    let mut max_rel = 0.0f64;
    for i in 0..dim {
        for j in 0..dim {
            max_rel = max_rel.max((sw.cov_gamma[(i, j)] - oracle[(i, j)]).abs() / scale);
        }
    }
    check(
        "8",
        max_rel < 1e-8,
        &format!("{dim}x{dim} covariance, max relative gap to the robust-WLS oracle {max_rel:.2e}"),
    );
}

#[test]
fn criterion_9_spline_error_monotone_and_knot_rule() {
    let grid: Vec<f64> = (0..200).map(|i| i as f64 / 199.0).collect();
    let target: Vec<f64> = grid
        .iter()
        .map(|&t| (0.3 * std::f64::consts::PI * t).sin())
        .collect();
    let mut errors = Vec::new();
    for knots in 0..=8 {
        let basis = build_basis(2, knots, KnotPlacement::Equispaced).unwrap();
        let m = basis.size();
        let design = DMatrix::from_fn(grid.len(), m, |i, j| basis.eval(grid[i]).unwrap()[j]);
        let y = DVector::from_column_slice(&target);
        let sol = design
            .clone()
            .svd(true, true)
            .solve(&y, 1e-12)
            .expect("least squares solves");
        errors.push((&y - design * sol).norm());
    }
    let monotone = errors.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let rule = knot_count(1000, 2);
    let shown: Vec<String> = errors.iter().map(|e| format!("{e:.2e}")).collect();
    check(
        "9",
        monotone && rule == 2,
        &format!(
            "least-squares errors [{}] non-increasing, knot_count(1000, 2) = {rule}",
            shown.join(", ")
        ),
    );
}

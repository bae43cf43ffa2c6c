//! Rate experiments: deterministic skeleton, small-noise deviation, coupled
//! moment and variance sweeps, strong error against a refined reference, and
//! log-log regression of the results.
//!
//! Every experiment returns tidy [`Record`]s with the column set
//! `experiment, level, h, eps, theta, delta, statistic, value, samples, seed`.

use std::io::Write;

use rayon::prelude::*;

use crate::coupling::{simulate_coupled, simulate_independent, LevelPair};
use crate::error::{Error, Result};
use crate::mlmc::LevelParams;
use crate::model::{Payoff, SddeProblem};
use crate::rng::{derive_seed, NoiseStream};
use crate::scheme::{
    deterministic_path, level_step, theta_em_path, theta_em_path_driven, DelayBuffer, GridSpec, TamedDrift,
};
use crate::stats::RunningStats;

/// Extra refinement levels of the strong-error reference solution.
pub const REFERENCE_EXTRA_LEVELS: u32 = 3;

/// Seed tag for the independent coarse paths of the uncoupled comparison.
const UNCOUPLED_TAG: u64 = 0x5eed_0001;

/// Ordinary least squares fit of `log y = slope * log x + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(log x, log y)` pairs used in the fit.
    pub points: Vec<(f64, f64)>,
}

impl RateFit {
    /// Fits on natural logs. Needs at least three points, all positive.
    pub fn fit(x: &[f64], y: &[f64]) -> Result<RateFit> {
        if x.len() != y.len() {
            return Err(Error::config("x and y must have the same length"));
        }
        if x.len() < 3 || x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InsufficientPoints(x.len()));
        }
        let points: Vec<(f64, f64)> = x.iter().zip(y).map(|(a, b)| (a.ln(), b.ln())).collect();
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
        if sxx == 0.0 {
            return Err(Error::config("regression abscissae are all equal"));
        }
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
        Ok(RateFit {
            slope,
            intercept,
            r_squared,
            points,
        })
    }
}

/// `y ~ c1 * b1 + c2 * b2` with `c1, c2 >= 0`, fitted in relative least
/// squares. `r_squared` is measured on the log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeFit {
    pub c1: f64,
    pub c2: f64,
    pub r_squared: f64,
    /// `max_i y_i / fit_i`; at most 1 means every point lies on or below the fit.
    pub max_ratio: f64,
}

impl EnvelopeFit {
    pub fn fit(b1: &[f64], b2: &[f64], y: &[f64]) -> Result<EnvelopeFit> {
        if b1.len() != y.len() || b2.len() != y.len() {
            return Err(Error::config("basis and data lengths differ"));
        }
        if y.len() < 3 || y.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InsufficientPoints(y.len()));
        }
        // rows scaled by 1 / y
        let (mut a11, mut a12, mut a22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..y.len() {
            let (u, v) = (b1[i] / y[i], b2[i] / y[i]);
            a11 += u * u;
            a12 += u * v;
            a22 += v * v;
            r1 += u;
            r2 += v;
        }
        let det = a11 * a22 - a12 * a12;
        let mut candidates = Vec::new();
        if det.abs() > 1e-300 {
            let c1 = (r1 * a22 - r2 * a12) / det;
            let c2 = (a11 * r2 - a12 * r1) / det;
            if c1 >= 0.0 && c2 >= 0.0 {
                candidates.push((c1, c2));
            }
        }
        if a11 > 0.0 {
            candidates.push((r1 / a11, 0.0));
        }
        if a22 > 0.0 {
            candidates.push((0.0, r2 / a22));
        }
        let loss = |c: &(f64, f64)| -> f64 {
            (0..y.len())
                .map(|i| ((c.0 * b1[i] + c.1 * b2[i]) / y[i] - 1.0).powi(2))
                .sum()
        };
        let (c1, c2) = candidates
            .into_iter()
            .min_by(|a, b| loss(a).total_cmp(&loss(b)))
            .ok_or_else(|| Error::config("degenerate envelope basis"))?;

        let logs: Vec<f64> = y.iter().map(|v| v.ln()).collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let syy: f64 = logs.iter().map(|l| (l - mean).powi(2)).sum();
        let mut sse = 0.0;
        let mut max_ratio: f64 = 0.0;
        for i in 0..y.len() {
            let fit = c1 * b1[i] + c2 * b2[i];
            sse += (logs[i] - fit.ln()).powi(2);
            max_ratio = max_ratio.max(y[i] / fit);
        }
        let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
        Ok(EnvelopeFit {
            c1,
            c2,
            r_squared,
            max_ratio,
        })
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub experiment: String,
    pub level: Option<u32>,
    pub h: Option<f64>,
    pub eps: Option<f64>,
    pub theta: f64,
    pub delta: Option<f64>,
    pub statistic: String,
    pub value: f64,
    pub samples: Option<u64>,
    pub seed: u64,
}

pub const CSV_HEADER: [&str; 10] = [
    "experiment",
    "level",
    "h",
    "eps",
    "theta",
    "delta",
    "statistic",
    "value",
    "samples",
    "seed",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the header and rows. Floats use Rust's shortest round-trip format.
pub fn write_records<W: Write>(writer: W, records: &[Record]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.experiment.clone(),
            opt(r.level),
            opt(r.h),
            opt(r.eps),
            r.theta.to_string(),
            opt(r.delta),
            r.statistic.clone(),
            r.value.to_string(),
            opt(r.samples),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters shared by every cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepParams {
    pub refinement: usize,
    pub theta: f64,
    pub delta: Option<f64>,
    pub n_paths: usize,
    pub seed: u64,
}

impl SweepParams {
    pub fn level_params(&self) -> LevelParams {
        LevelParams {
            refinement: self.refinement,
            theta: self.theta,
            delta: self.delta,
            seed: self.seed,
        }
    }

    fn taming_for(&self, problem: &SddeProblem, level: u32) -> Result<Option<TamedDrift>> {
        self.delta
            .map(|d| TamedDrift::for_level(problem.horizon(), self.refinement, level, d))
            .transpose()
    }

    fn record(&self, experiment: &str, statistic: &str, value: f64) -> Record {
        Record {
            experiment: experiment.to_string(),
            level: None,
            h: None,
            eps: None,
            theta: self.theta,
            delta: self.delta,
            statistic: statistic.to_string(),
            value,
            samples: None,
            seed: self.seed,
        }
    }
}

fn fit_records(params: &SweepParams, experiment: &str, axis: &str, fit: &RateFit) -> [Record; 3] {
    [
        params.record(experiment, &format!("slope_{axis}"), fit.slope),
        params.record(experiment, &format!("intercept_{axis}"), fit.intercept),
        params.record(experiment, &format!("r2_{axis}"), fit.r_squared),
    ]
}

/// The theta EM recursion with the noise term removed.
pub fn deterministic_skeleton(problem: &SddeProblem, grid: &GridSpec, taming: Option<&TamedDrift>) -> Result<DelayBuffer> {
    deterministic_path(problem, grid, taming)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub fit: RateFit,
    /// `(abscissa, value)` per sweep point, including points excluded from the fit.
    pub values: Vec<(f64, f64)>,
    pub records: Vec<Record>,
}

/// `E[sup_n |X^eps(t_n) - Z(t_n)|^2]` across `eps_sweep` at a fixed level,
/// fitted against `eps`. Zero entries of the sweep are reported but not fitted.
pub fn small_noise_deviation(
    problem: &SddeProblem,
    level: u32,
    params: &SweepParams,
    eps_sweep: &[f64],
) -> Result<SweepOutcome> {
    let grid = GridSpec::for_level(problem, level, params.refinement, params.theta)?;
    let taming = params.taming_for(problem, level)?;
    let skeleton = deterministic_path(problem, &grid, taming.as_ref())?;
    let mut values = Vec::new();
    let mut records = Vec::new();
    for &eps in eps_sweep {
        let noisy = problem.clone().with_noise_scale(eps);
        let devs = (0..params.n_paths as u64)
            .into_par_iter()
            .map(|p| {
                let noise = NoiseStream::new(params.seed, level, p, problem.dim_noise()).with_grid(grid.total_steps, 1);
                let x = theta_em_path(&noisy, &grid, &noise, taming.as_ref()).map_err(|e| e.at(level, p))?;
                Ok(x.forward_values()
                    .zip(skeleton.forward_values())
                    .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
                    .fold(0.0, f64::max))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean: RunningStats = devs.into_iter().collect();
        values.push((eps, mean.mean()));
        records.push(Record {
            level: Some(level),
            h: Some(grid.step),
            eps: Some(eps),
            samples: Some(params.n_paths as u64),
            ..params.record("deviation", "sup_sq_deviation", mean.mean())
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = values.iter().filter(|v| v.0 > 0.0).copied().unzip();
    let fit = RateFit::fit(&xs, &ys)?;
    records.extend(fit_records(params, "deviation", "eps", &fit));
    Ok(SweepOutcome { fit, values, records })
}

/// Monte Carlo statistics of one coupled level at one noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledCell {
    pub level: u32,
    pub h_fine: f64,
    pub h_coarse: f64,
    pub eps: f64,
    pub samples: usize,
    /// `max_n E|X_fine(t_n) - X_coarse(t_n)|^2`.
    pub sup_second_moment: f64,
    /// `E|X_fine(T) - X_coarse(T)|^2`.
    pub terminal_second_moment: f64,
    /// `Var(Psi(X_fine(T)) - Psi(X_coarse(T)))`.
    pub terminal_variance: f64,
    /// `max_n Var(Psi(X_fine(t_n)) - Psi(X_coarse(t_n)))`.
    pub sup_variance: f64,
    /// Terminal variance with independent fine and coarse noise, if requested.
    pub uncoupled_variance: Option<f64>,
    /// `max_n E|X_fine(t_n^k) - X_fine(t_n)|` over substeps `k`, signed mean per
    /// component norm (bias of the within-interval drift).
    pub within_interval_bias: f64,
    /// `max_{n,k} E|X_fine(t_n^k) - X_fine(t_n)|^2`.
    pub within_interval_second_moment: f64,
}

struct PathSummary {
    gaps: Vec<f64>,
    deltas: Vec<f64>,
    within_mean: Vec<f64>,
    within_sq: Vec<f64>,
    uncoupled_delta: Option<f64>,
}

fn summarize_pair(
    problem: &SddeProblem,
    psi: &Payoff,
    pair: &LevelPair,
    params: &SweepParams,
    path: u64,
    uncoupled: bool,
) -> Result<PathSummary> {
    let cp = simulate_coupled(problem, pair, &pair.noise(problem, params.seed, path)).map_err(|e| e.at(pair.level, path))?;
    let m = pair.refinement;
    let a = problem.dim_state();
    // within-interval increments X(t_n^k) - X(t_n), per (n, k), first component
    // for the signed mean and full norm for the second moment
    let intervals = pair.coarse_steps();
    let mut within_mean = vec![0.0; intervals * m];
    let mut within_sq = vec![0.0; intervals * m];
    for n in 0..intervals {
        let base = cp.fine.get((n * m) as isize);
        for k in 1..=m {
            let x = cp.fine.get((n * m + k) as isize);
            within_mean[n * m + k - 1] = x[0] - base[0];
            within_sq[n * m + k - 1] = (0..a).map(|i| (x[i] - base[i]).powi(2)).sum();
        }
    }
    let uncoupled_delta = if uncoupled {
        // one increment per fine step: same indices as the coupled run
        let fine_noise = NoiseStream::new(params.seed, pair.level, path, problem.dim_noise())
            .with_grid(pair.fine_grid().total_steps, 1);
        let coarse_noise = NoiseStream::new(
            derive_seed(params.seed, UNCOUPLED_TAG),
            pair.level - 1,
            path,
            problem.dim_noise(),
        )
        .with_grid(pair.coarse_steps(), 1);
        let ind = simulate_independent(problem, pair, &fine_noise, &coarse_noise).map_err(|e| e.at(pair.level, path))?;
        Some(psi.eval(ind.fine.terminal()) - psi.eval(ind.coarse.terminal()))
    } else {
        None
    };
    Ok(PathSummary {
        gaps: cp.squared_gaps(),
        deltas: cp.node_payoff_deltas(psi),
        within_mean,
        within_sq,
        uncoupled_delta,
    })
}

/// Simulates `params.n_paths` coupled pairs of `level` for `problem` as given
/// (its own noise scale) and reduces them in path order.
pub fn coupled_cell(
    problem: &SddeProblem,
    psi: &Payoff,
    level: u32,
    params: &SweepParams,
    uncoupled: bool,
) -> Result<CoupledCell> {
    let pair = LevelPair::new(problem, level, params.refinement, params.theta, params.delta)?;
    let summaries = (0..params.n_paths as u64)
        .into_par_iter()
        .map(|p| summarize_pair(problem, psi, &pair, params, p, uncoupled))
        .collect::<Result<Vec<_>>>()?;

    let nodes = pair.coarse_steps() + 1;
    let mut gap_sum = vec![0.0; nodes];
    let mut delta_stats = vec![RunningStats::new(); nodes];
    let mut within_mean = vec![0.0; nodes * pair.refinement];
    let mut within_sq = vec![0.0; nodes * pair.refinement];
    let mut uncoupled_stats = RunningStats::new();
    for s in &summaries {
        for n in 0..nodes {
            gap_sum[n] += s.gaps[n];
            delta_stats[n].push(s.deltas[n]);
        }
        for (acc, v) in within_mean.iter_mut().zip(&s.within_mean) {
            *acc += v;
        }
        for (acc, v) in within_sq.iter_mut().zip(&s.within_sq) {
            *acc += v;
        }
        if let Some(d) = s.uncoupled_delta {
            uncoupled_stats.push(d);
        }
    }
    let count = summaries.len() as f64;
    let sup = |v: &[f64]| v.iter().map(|x| x / count).fold(0.0, f64::max);
    Ok(CoupledCell {
        level,
        h_fine: pair.fine_step(),
        h_coarse: pair.coarse_step(),
        eps: problem.noise_scale(),
        samples: summaries.len(),
        sup_second_moment: sup(&gap_sum),
        terminal_second_moment: gap_sum[nodes - 1] / count,
        terminal_variance: delta_stats[nodes - 1].variance(),
        sup_variance: delta_stats.iter().map(RunningStats::variance).fold(0.0, f64::max),
        uncoupled_variance: uncoupled.then(|| uncoupled_stats.variance()),
        within_interval_bias: within_mean.iter().map(|x| (x / count).abs()).fold(0.0, f64::max),
        within_interval_second_moment: sup(&within_sq),
    })
}

impl CoupledCell {
    fn records(&self, experiment: &str, params: &SweepParams) -> Vec<Record> {
        let mut stats = vec![
            ("sup_second_moment", self.sup_second_moment),
            ("terminal_second_moment", self.terminal_second_moment),
            ("terminal_variance", self.terminal_variance),
            ("sup_variance", self.sup_variance),
        ];
        if let Some(u) = self.uncoupled_variance {
            stats.push(("uncoupled_variance", u));
        }
        stats
            .into_iter()
            .map(|(name, value)| Record {
                level: Some(self.level),
                h: Some(self.h_fine),
                eps: Some(self.eps),
                samples: Some(self.samples as u64),
                ..params.record(experiment, name, value)
            })
            .collect()
    }
}

/// Level sweep at fixed noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSweep {
    pub levels: Vec<u32>,
    pub eps: f64,
}

/// Noise-scale sweep at a fixed level.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsSweep {
    pub level: u32,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatePair {
    pub h_slope: RateFit,
    pub eps_slope: RateFit,
    pub h_cells: Vec<CoupledCell>,
    pub eps_cells: Vec<CoupledCell>,
    pub records: Vec<Record>,
}

fn run_cells(
    problem: &SddeProblem,
    psi: &Payoff,
    params: &SweepParams,
    h: &LevelSweep,
    eps: &EpsSweep,
    uncoupled: bool,
) -> Result<(Vec<CoupledCell>, Vec<CoupledCell>)> {
    let at_eps = problem.clone().with_noise_scale(h.eps);
    let h_cells = h
        .levels
        .iter()
        .map(|&l| coupled_cell(&at_eps, psi, l, params, uncoupled))
        .collect::<Result<Vec<_>>>()?;
    let eps_cells = eps
        .eps
        .iter()
        .map(|&e| coupled_cell(&problem.clone().with_noise_scale(e), psi, eps.level, params, uncoupled))
        .collect::<Result<Vec<_>>>()?;
    Ok((h_cells, eps_cells))
}

/// Slopes of `sup_n E|X_fine(t_n) - X_coarse(t_n)|^2` in `h_l` and in `eps`.
pub fn coupled_moment_rates(
    problem: &SddeProblem,
    params: &SweepParams,
    h: &LevelSweep,
    eps: &EpsSweep,
) -> Result<RatePair> {
    let identity = Payoff::builtin("identity")?;
    let (h_cells, eps_cells) = run_cells(problem, &identity, params, h, eps, false)?;
    let h_slope = RateFit::fit(
        &h_cells.iter().map(|c| c.h_fine).collect::<Vec<_>>(),
        &h_cells.iter().map(|c| c.sup_second_moment).collect::<Vec<_>>(),
    )?;
    let eps_slope = RateFit::fit(
        &eps_cells.iter().map(|c| c.eps).collect::<Vec<_>>(),
        &eps_cells.iter().map(|c| c.sup_second_moment).collect::<Vec<_>>(),
    )?;
    let mut records: Vec<Record> = h_cells
        .iter()
        .chain(&eps_cells)
        .flat_map(|c| c.records("rates-moment", params))
        .collect();
    records.extend(fit_records(params, "rates-moment", "h", &h_slope));
    records.extend(fit_records(params, "rates-moment", "eps", &eps_slope));
    Ok(RatePair {
        h_slope,
        eps_slope,
        h_cells,
        eps_cells,
        records,
    })
}

/// Slopes of `Var(Psi(X_fine(T)) - Psi(X_coarse(T)))` in `h_(l-1)` and in
/// `eps`, with the uncoupled variance computed alongside.
pub fn coupled_variance_rates(
    problem: &SddeProblem,
    psi: &Payoff,
    params: &SweepParams,
    h: &LevelSweep,
    eps: &EpsSweep,
) -> Result<RatePair> {
    let (h_cells, eps_cells) = run_cells(problem, psi, params, h, eps, true)?;
    let h_slope = RateFit::fit(
        &h_cells.iter().map(|c| c.h_coarse).collect::<Vec<_>>(),
        &h_cells.iter().map(|c| c.terminal_variance).collect::<Vec<_>>(),
    )?;
    let eps_slope = RateFit::fit(
        &eps_cells.iter().map(|c| c.eps).collect::<Vec<_>>(),
        &eps_cells.iter().map(|c| c.terminal_variance).collect::<Vec<_>>(),
    )?;
    let mut records: Vec<Record> = h_cells
        .iter()
        .chain(&eps_cells)
        .flat_map(|c| c.records("rates-variance", params))
        .collect();
    records.extend(fit_records(params, "rates-variance", "h", &h_slope));
    records.extend(fit_records(params, "rates-variance", "eps", &eps_slope));
    Ok(RatePair {
        h_slope,
        eps_slope,
        h_cells,
        eps_cells,
        records,
    })
}

/// `E|Psi(X_ref(T)) - Psi(X_h(T))|^2` against `h` over `levels`.
///
/// The reference runs `REFERENCE_EXTRA_LEVELS` levels above the finest level
/// of the sweep on substream `(seed, ref_level, p)`; each level consumes block
/// sums of the reference increments, so errors are pathwise.
pub fn strong_error_rate(
    problem: &SddeProblem,
    psi: &Payoff,
    params: &SweepParams,
    levels: &[u32],
    eps: f64,
) -> Result<SweepOutcome> {
    if levels.len() < 3 {
        return Err(Error::InsufficientPoints(levels.len()));
    }
    let problem = problem.clone().with_noise_scale(eps);
    let max_level = *levels.iter().max().expect("non-empty");
    let ref_level = max_level + REFERENCE_EXTRA_LEVELS;
    let ref_grid = GridSpec::for_level(&problem, ref_level, params.refinement, params.theta)?;
    let ref_taming = params.taming_for(&problem, ref_level)?;
    let grids = levels
        .iter()
        .map(|&l| {
            let g = GridSpec::for_level(&problem, l, params.refinement, params.theta)?;
            g.check_admissible(&problem)?;
            Ok((g, params.taming_for(&problem, l)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let d = problem.dim_noise();
    let sqrt_ref = level_step(problem.horizon(), params.refinement, ref_level).sqrt();

    let per_path = (0..params.n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let noise = NoiseStream::new(params.seed, ref_level, p, d).with_grid(ref_grid.total_steps, 1);
            let mut xi = vec![0.0; ref_grid.total_steps * d];
            let mut cursor = noise.cursor();
            for chunk in xi.chunks_mut(d) {
                cursor.next_into(chunk)?;
            }
            let reference = theta_em_path_driven(&problem, &ref_grid, ref_taming.as_ref(), |n, dw| {
                for j in 0..d {
                    dw[j] = sqrt_ref * xi[n * d + j];
                }
                Ok(())
            })
            .map_err(|e| e.at(ref_level, p))?;
            let target = psi.eval(reference.terminal());
            grids
                .iter()
                .zip(levels)
                .map(|((grid, taming), &l)| {
                    let block = ref_grid.total_steps / grid.total_steps;
                    let x = theta_em_path_driven(&problem, grid, taming.as_ref(), |n, dw| {
                        dw.fill(0.0);
                        for k in 0..block {
                            for j in 0..d {
                                dw[j] += xi[(n * block + k) * d + j];
                            }
                        }
                        dw.iter_mut().for_each(|w| *w *= sqrt_ref);
                        Ok(())
                    })
                    .map_err(|e| e.at(l, p))?;
                    Ok((psi.eval(x.terminal()) - target).powi(2))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut values = Vec::new();
    let mut records = Vec::new();
    for (i, (&l, (grid, _))) in levels.iter().zip(&grids).enumerate() {
        let mean: RunningStats = per_path.iter().map(|v| v[i]).collect();
        values.push((grid.step, mean.mean()));
        records.push(Record {
            level: Some(l),
            h: Some(grid.step),
            eps: Some(eps),
            samples: Some(params.n_paths as u64),
            ..params.record("rates-strong", "mean_sq_error", mean.mean())
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = values.iter().copied().unzip();
    let fit = RateFit::fit(&xs, &ys)?;
    records.extend(fit_records(params, "rates-strong", "h", &fit));
    Ok(SweepOutcome { fit, values, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_problem, builtin_problem_with, Coefficients};
    use crate::scheme::theta_em_path;

    #[test]
    fn exact_power_law_is_recovered() {
        let x = [0.5, 0.25, 0.125, 0.0625];
        let y: Vec<f64> = x.iter().map(|h: &f64| 3.0 * h.powi(2)).collect();
        let fit = RateFit::fit(&x, &y).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_is_an_error() {
        assert!(matches!(RateFit::fit(&[0.1], &[0.2]), Err(Error::InsufficientPoints(1))));
        assert!(matches!(
            RateFit::fit(&[0.1, 0.2, 0.3], &[1.0, 0.0, 2.0]),
            Err(Error::InsufficientPoints(3))
        ));
    }

    #[test]
    fn envelope_recovers_two_terms() {
        let h = [0.25, 0.125, 0.0625, 0.03125, 0.015625];
        let b1: Vec<f64> = h.iter().map(|x: &f64| x.sqrt()).collect();
        let b2: Vec<f64> = h.to_vec();
        let y: Vec<f64> = (0..5).map(|i| 0.3 * b1[i] + 2.0 * b2[i]).collect();
        let fit = EnvelopeFit::fit(&b1, &b2, &y).unwrap();
        assert!((fit.c1 - 0.3).abs() < 1e-10 && (fit.c2 - 2.0).abs() < 1e-10);
        assert!((fit.max_ratio - 1.0).abs() < 1e-10);
    }

    #[test]
    fn csv_header_and_blanks() {
        let mut buf = Vec::new();
        let r = Record {
            experiment: "x".into(),
            level: None,
            h: Some(0.5),
            eps: None,
            theta: 0.25,
            delta: None,
            statistic: "s".into(),
            value: 1.5,
            samples: Some(3),
            seed: 7,
        };
        write_records(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "experiment,level,h,eps,theta,delta,statistic,value,samples,seed\nx,,0.5,,0.25,,s,1.5,3,7\n"
        );
    }

    #[test]
    fn skeleton_of_zero_dynamics_is_constant() {
        let p = builtin_problem("zero_dynamics").unwrap();
        let g = GridSpec::for_level(&p, 4, 2, 0.3).unwrap();
        assert!(deterministic_skeleton(&p, &g, None).unwrap().forward_values().all(|x| x == [1.0]));
    }

    #[test]
    fn skeleton_matches_noise_free_path() {
        for name in ["linear_scalar", "additive_noise"] {
            let p = builtin_problem(name).unwrap().with_noise_scale(0.0);
            let g = GridSpec::for_level(&p, 5, 2, 0.7).unwrap();
            let noise = NoiseStream::new(1, 5, 0, 1).with_grid(g.total_steps, 1);
            assert_eq!(
                theta_em_path(&p, &g, &noise, None).unwrap(),
                deterministic_skeleton(&p, &g, None).unwrap()
            );
        }
    }

    #[test]
    fn skeleton_matches_closed_form_linear_recursion() {
        let mut coef = Coefficients::new();
        coef.insert("a1".into(), -1.3);
        coef.insert("a2".into(), 0.4);
        let p = builtin_problem_with("linear_scalar", &coef).unwrap();
        let g = GridSpec::for_level(&p, 4, 2, 1.0).unwrap();
        let z = deterministic_skeleton(&p, &g, None).unwrap();
        // (1 - h a1) Z[n+1] = Z[n] + h a2 Z[n+1-m] for theta = 1
        let (h, m) = (g.step, g.steps_per_delay);
        let mut oracle = vec![1.0; m + 1];
        for n in 0..g.total_steps {
            let next = (oracle[n + m] + h * 0.4 * oracle[n + 1]) / (1.0 + 1.3 * h);
            oracle.push(next);
        }
        for (n, v) in z.forward_values().enumerate() {
            assert!((v[0] - oracle[n + m]).abs() < 1e-12, "{n}: {} vs {}", v[0], oracle[n + m]);
        }
    }

    #[test]
    fn deviation_is_zero_without_noise() {
        let p = builtin_problem("linear_scalar").unwrap();
        let params = SweepParams {
            refinement: 2,
            theta: 0.5,
            delta: None,
            n_paths: 50,
            seed: 0,
        };
        let out = small_noise_deviation(&p, 4, &params, &[0.0, 0.01, 0.1, 1.0]).unwrap();
        assert_eq!(out.values[0], (0.0, 0.0));
        assert!((out.fit.slope - 2.0).abs() < 0.3);
    }

    #[test]
    fn strong_error_needs_three_levels() {
        let p = builtin_problem("linear_scalar").unwrap();
        let psi = Payoff::builtin("identity").unwrap();
        let params = SweepParams {
            refinement: 2,
            theta: 0.5,
            delta: None,
            n_paths: 4,
            seed: 0,
        };
        assert!(matches!(
            strong_error_rate(&p, &psi, &params, &[4], 0.1),
            Err(Error::InsufficientPoints(1))
        ));
    }
}

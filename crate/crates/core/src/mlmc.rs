//! Multilevel Monte Carlo estimator of `E[Psi(X(T))]`.
//!
//! The estimate telescopes a plain theta EM estimate at the base level with
//! the mean coupled differences of every finer level:
//!
//! ```text
//! E[Psi(X_{h_L})] = E[Psi(X_{h_base})] + sum_{l = base+1}^{L} E[Psi(X_{h_l}) - Psi(X_{h_{l-1}})]
//! ```
//!
//! Level `l` draws path `p` from noise substream `(seed, l, p)`, so levels are
//! independent and every sample is reproducible on its own.

use rayon::prelude::*;

use crate::coupling::{coupled_payoff_delta, simulate_coupled, LevelPair};
use crate::error::{Error, Result};
use crate::model::{Payoff, SddeProblem};
use crate::rng::NoiseStream;
use crate::scheme::{theta_em_path, GridSpec, TamedDrift};
use crate::stats::RunningStats;

/// Pilot sample count for automatic allocation.
pub const DEFAULT_PILOT: usize = 100;

/// Statistics of one level. At the base level `delta` is `Psi` itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelStats {
    pub level: u32,
    pub is_base: bool,
    pub delta: RunningStats,
    pub fine: RunningStats,
    /// Fine plus coarse steps of one sample.
    pub cost_per_sample: f64,
}

impl LevelStats {
    pub fn samples(&self) -> u64 {
        self.delta.count()
    }

    pub fn mean_delta(&self) -> f64 {
        self.delta.mean()
    }

    pub fn var_delta(&self) -> f64 {
        self.delta.variance()
    }

    pub fn mean_fine(&self) -> f64 {
        self.fine.mean()
    }

    pub fn var_fine(&self) -> f64 {
        self.fine.variance()
    }

    /// `samples * (M^l + M^(l-1))`, or `samples * M^l` at the base level.
    pub fn cost_units(&self) -> f64 {
        self.samples() as f64 * self.cost_per_sample
    }

    /// Combines statistics of disjoint sample sets of the same level.
    pub fn merge(&mut self, other: &LevelStats) -> Result<()> {
        if self.level != other.level || self.is_base != other.is_base {
            return Err(Error::config(format!(
                "cannot merge statistics of level {} into level {}",
                other.level, self.level
            )));
        }
        self.delta.merge(&other.delta);
        self.fine.merge(&other.fine);
        Ok(())
    }
}

/// Shared parameters of every level of one estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelParams {
    pub refinement: usize,
    pub theta: f64,
    /// Taming exponent; `None` for the raw drift.
    pub delta: Option<f64>,
    pub seed: u64,
}

/// One sample of a coupled level: `(Psi(fine) - Psi(coarse), Psi(fine))`.
pub fn coupled_sample(problem: &SddeProblem, psi: &Payoff, pair: &LevelPair, seed: u64, path: u64) -> Result<(f64, f64)> {
    let cp = simulate_coupled(problem, pair, &pair.noise(problem, seed, path)).map_err(|e| e.at(pair.level, path))?;
    Ok((coupled_payoff_delta(&cp, psi), psi.eval(cp.fine.terminal())))
}

/// Grid and taming of a plain (uncoupled) path at `level`.
pub fn single_level_setup(
    problem: &SddeProblem,
    level: u32,
    params: &LevelParams,
) -> Result<(GridSpec, Option<TamedDrift>)> {
    let grid = GridSpec::for_level(problem, level, params.refinement, params.theta)?;
    grid.check_admissible(problem)?;
    if problem.regularity().is_one_sided() && params.delta.is_none() {
        return Err(Error::config("one-sided Lipschitz problems need a taming exponent delta"));
    }
    let taming = params
        .delta
        .map(|d| TamedDrift::for_level(problem.horizon(), params.refinement, level, d))
        .transpose()?;
    Ok((grid, taming))
}

/// One plain sample `Psi(X_{h_l}(T))` on substream `(seed, level, path)`.
pub fn single_sample(
    problem: &SddeProblem,
    psi: &Payoff,
    level: u32,
    grid: &GridSpec,
    taming: Option<&TamedDrift>,
    seed: u64,
    path: u64,
) -> Result<f64> {
    let noise = NoiseStream::new(seed, level, path, problem.dim_noise()).with_grid(grid.total_steps, 1);
    let x = theta_em_path(problem, grid, &noise, taming).map_err(|e| e.at(level, path))?;
    Ok(psi.eval(x.terminal()))
}

/// Per-path samples of a level over `paths`, in path order. The base level
/// yields `(Psi, Psi)`.
pub fn level_samples(
    problem: &SddeProblem,
    psi: &Payoff,
    level: u32,
    is_base: bool,
    params: &LevelParams,
    paths: std::ops::Range<u64>,
) -> Result<Vec<(f64, f64)>> {
    if is_base {
        let (grid, taming) = single_level_setup(problem, level, params)?;
        paths
            .into_par_iter()
            .map(|p| single_sample(problem, psi, level, &grid, taming.as_ref(), params.seed, p).map(|v| (v, v)))
            .collect()
    } else {
        let pair = LevelPair::new(problem, level, params.refinement, params.theta, params.delta)?;
        paths
            .into_par_iter()
            .map(|p| coupled_sample(problem, psi, &pair, params.seed, p))
            .collect()
    }
}

fn cost_per_sample(refinement: usize, level: u32, is_base: bool) -> f64 {
    let m = refinement as f64;
    if is_base {
        m.powi(level as i32)
    } else {
        m.powi(level as i32) + m.powi(level as i32 - 1)
    }
}

/// Statistics of a level over an explicit path range. Samples are computed in
/// parallel and accumulated in path order, so the result does not depend on
/// the worker count.
pub fn estimate_level_paths(
    problem: &SddeProblem,
    psi: &Payoff,
    level: u32,
    is_base: bool,
    params: &LevelParams,
    paths: std::ops::Range<u64>,
) -> Result<LevelStats> {
    let samples = level_samples(problem, psi, level, is_base, params, paths)?;
    let mut stats = LevelStats {
        level,
        is_base,
        delta: RunningStats::new(),
        fine: RunningStats::new(),
        cost_per_sample: cost_per_sample(params.refinement, level, is_base),
    };
    for (delta, fine) in samples {
        stats.delta.push(delta);
        stats.fine.push(fine);
    }
    Ok(stats)
}

/// Statistics of `Psi(fine(T)) - Psi(coarse(T))` over paths `0..n_samples`.
pub fn estimate_level(
    problem: &SddeProblem,
    psi: &Payoff,
    level: u32,
    params: &LevelParams,
    n_samples: usize,
) -> Result<LevelStats> {
    if n_samples < 2 {
        return Err(Error::config("a level needs at least 2 samples"));
    }
    estimate_level_paths(problem, psi, level, false, params, 0..n_samples as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleAllocation {
    /// Samples per level, base level first. A single entry applies to all levels.
    Fixed(Vec<usize>),
    /// Pilot run, then cost-weighted allocation toward `target_se`, capped per level.
    Auto {
        target_se: f64,
        pilot: usize,
        cap: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmcConfig {
    pub base_level: u32,
    pub max_level: u32,
    pub params: LevelParams,
    pub allocation: SampleAllocation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimateStatus {
    Ok,
    /// The per-level cap stopped allocation before `target_se` was reached.
    TargetNotMet { target_se: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmcEstimate {
    pub value: f64,
    pub levels: Vec<LevelStats>,
    pub base_level_mean: f64,
    pub total_cost: f64,
    pub std_error: f64,
    pub status: EstimateStatus,
}

impl MlmcEstimate {
    fn assemble(levels: Vec<LevelStats>, status: EstimateStatus) -> Self {
        let base_level_mean = levels[0].mean_delta();
        let value = base_level_mean + levels[1..].iter().map(LevelStats::mean_delta).sum::<f64>();
        let variance: f64 = levels
            .iter()
            .map(|s| s.var_delta() / s.samples() as f64)
            .sum();
        MlmcEstimate {
            value,
            base_level_mean,
            total_cost: levels.iter().map(LevelStats::cost_units).sum(),
            std_error: variance.sqrt(),
            levels,
            status,
        }
    }
}

impl MlmcConfig {
    fn validate(&self, problem: &SddeProblem) -> Result<()> {
        if self.base_level > self.max_level {
            return Err(Error::config(format!(
                "base level {} exceeds max level {}",
                self.base_level, self.max_level
            )));
        }
        let tamed = self.params.delta.is_some() || problem.regularity().is_one_sided();
        if tamed && self.base_level < 2 {
            return Err(Error::config("tamed estimates need base level >= 2"));
        }
        match &self.allocation {
            SampleAllocation::Fixed(n) => {
                let levels = (self.max_level - self.base_level + 1) as usize;
                if n.is_empty() || (n.len() != 1 && n.len() != levels) {
                    return Err(Error::config(format!(
                        "expected 1 or {levels} sample counts, got {}",
                        n.len()
                    )));
                }
                if n.iter().any(|&k| k < 2) {
                    return Err(Error::config("every level needs at least 2 samples"));
                }
            }
            SampleAllocation::Auto { target_se, pilot, cap } => {
                if !(*target_se > 0.0) || *pilot < 2 || cap < pilot {
                    return Err(Error::config(format!(
                        "auto allocation needs target_se > 0, pilot >= 2 and cap >= pilot (got {target_se}, {pilot}, {cap})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Telescoping MLMC estimate over `base_level..=max_level`.
pub fn mlmc_estimate(problem: &SddeProblem, psi: &Payoff, config: &MlmcConfig) -> Result<MlmcEstimate> {
    config.validate(problem)?;
    let levels: Vec<u32> = (config.base_level..=config.max_level).collect();
    let base = config.base_level;
    let params = &config.params;

    match &config.allocation {
        SampleAllocation::Fixed(counts) => {
            let stats = levels
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    let n = if counts.len() == 1 { counts[0] } else { counts[i] };
                    estimate_level_paths(problem, psi, l, l == base, params, 0..n as u64)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MlmcEstimate::assemble(stats, EstimateStatus::Ok))
        }
        SampleAllocation::Auto { target_se, pilot, cap } => {
            let mut stats = levels
                .iter()
                .map(|&l| estimate_level_paths(problem, psi, l, l == base, params, 0..*pilot as u64))
                .collect::<Result<Vec<_>>>()?;
            // a few refinement rounds: variances from the pilot are noisy
            for _ in 0..5 {
                let weight: f64 = stats
                    .iter()
                    .map(|s| (s.var_delta() * s.cost_per_sample).sqrt())
                    .sum();
                let mut grew = false;
                for s in stats.iter_mut() {
                    let ideal = ((s.var_delta() / s.cost_per_sample).sqrt() * weight / (target_se * target_se)).ceil();
                    let wanted = (ideal.min(*cap as f64) as u64).max(s.samples());
                    if wanted > s.samples() {
                        let extra =
                            estimate_level_paths(problem, psi, s.level, s.is_base, params, s.samples()..wanted)?;
                        s.merge(&extra)?;
                        grew = true;
                    }
                }
                let estimate = MlmcEstimate::assemble(stats.clone(), EstimateStatus::Ok);
                if estimate.std_error <= *target_se || !grew {
                    break;
                }
            }
            let estimate = MlmcEstimate::assemble(stats, EstimateStatus::Ok);
            let status = if estimate.std_error <= *target_se {
                EstimateStatus::Ok
            } else {
                EstimateStatus::TargetNotMet { target_se: *target_se }
            };
            Ok(MlmcEstimate { status, ..estimate })
        }
    }
}

//! Command-line front end.
//!
//! Flags may also come from a flat `key=value` file passed with `--config`;
//! keys are long flag names without the dashes and flags given on the command
//! line win. The CSV is written to a temporary file next to `--out` and renamed
//! into place, so a failed run never leaves a partial file behind. A run summary
//! goes to `<out>.summary.txt`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};

use crate::analysis::{
    coupled_cell, coupled_moment_rates, coupled_variance_rates, small_noise_deviation, strong_error_rate,
    write_records, EpsSweep, LevelSweep, Record, SweepParams,
};
use crate::coupling::LevelPair;
use crate::error::{Error, Result};
use crate::mlmc::{mlmc_estimate, EstimateStatus, MlmcConfig, SampleAllocation, DEFAULT_PILOT};
use crate::model::{builtin_problem_with, Coefficients, Payoff, SddeProblem};
use crate::rng::NoiseStream;
use crate::scheme::{theta_em_path, GridSpec, TamedDrift};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    /// One sample path at `--level`.
    Path,
    /// Coupled fine/coarse statistics at `--level` for each `--eps`.
    Coupled,
    /// Multilevel estimate of E[Psi(X(T))] over `--base-level..=--max-level`.
    Mlmc,
    /// Strong error against a refined reference, one fit per `--eps`.
    RatesStrong,
    /// Coupled second-moment slopes in h (at the first `--eps`) and in eps (`--eps-sweep` at `--level`).
    RatesMoment,
    /// Coupled variance slopes, with the uncoupled variance alongside.
    RatesVariance,
    /// Small-noise deviation from the deterministic skeleton over `--eps-sweep` at `--level`.
    Deviation,
}

impl Experiment {
    pub fn label(self) -> &'static str {
        match self {
            Experiment::Path => "path",
            Experiment::Coupled => "coupled",
            Experiment::Mlmc => "mlmc",
            Experiment::RatesStrong => "rates-strong",
            Experiment::RatesMoment => "rates-moment",
            Experiment::RatesVariance => "rates-variance",
            Experiment::Deviation => "deviation",
        }
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "mlmc-sdde", version, about = "Theta Euler-Maruyama and multilevel Monte Carlo for small-noise SDDEs")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Experiment to run.
    #[arg(long, value_enum, default_value = "rates-strong")]
    pub experiment: Experiment,

    /// Builtin problem: zero_dynamics, linear_scalar, additive_noise, cubic_onesided.
    #[arg(long, default_value = "linear_scalar")]
    pub problem: String,

    /// Coefficient override `key=value` (repeatable), e.g. `--coef b1=0.5`.
    #[arg(long = "coef", value_name = "KEY=VALUE")]
    pub coef: Vec<String>,

    /// Implicitness parameter in [0, 1].
    #[arg(long, default_value_t = 0.25)]
    pub theta: f64,

    /// Taming exponent in (0, 1/2]; required for one-sided problems.
    #[arg(long)]
    pub delta: Option<f64>,

    /// Refinement factor between levels.
    #[arg(long = "M", default_value_t = 2)]
    pub refinement: usize,

    /// Coarsest level of sweeps and of the multilevel estimator.
    #[arg(long, default_value_t = 3)]
    pub base_level: u32,

    /// Finest level of sweeps and of the multilevel estimator.
    #[arg(long, default_value_t = 7)]
    pub max_level: u32,

    /// Level for path, coupled, deviation and the eps sweeps [default: max-level].
    #[arg(long)]
    pub level: Option<u32>,

    /// Step size; must equal T / M^level for some level and overrides `--level`.
    #[arg(long)]
    pub h: Option<f64>,

    /// Noise scale(s), comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.0001")]
    pub eps: Vec<f64>,

    /// Noise scales of the eps sweeps, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.4")]
    pub eps_sweep: Vec<f64>,

    /// Paths per level or per sweep cell.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,

    /// Target standard error; switches the multilevel estimator to automatic allocation.
    #[arg(long)]
    pub target_se: Option<f64>,

    /// Per-level sample cap under automatic allocation.
    #[arg(long, default_value_t = 1_000_000)]
    pub max_samples: usize,

    /// Payoff: identity, sigmoid, tanh, constant.
    #[arg(long, default_value = "identity")]
    pub payoff: String,

    /// Master seed.
    #[arg(long, env = "MLMC_SDDE_SEED", default_value_t = 0)]
    pub seed: u64,

    /// CSV output path.
    #[arg(long, default_value = "mlmc-sdde.csv")]
    pub out: PathBuf,

    /// Worker threads [default: available parallelism].
    #[arg(long)]
    pub jobs: Option<usize>,

    /// Flat key=value file with defaults for any of the flags above.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses `args`, merging a `--config` file underneath the explicit flags.
pub fn parse_args<I, T>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let first = Cli::try_parse_from(&args)?;
    let Some(path) = &first.config else {
        return Ok(first);
    };
    let text = fs::read_to_string(path).map_err(|e| {
        clap::Error::raw(
            clap::error::ErrorKind::Io,
            format!("cannot read config file {}: {e}\n", path.display()),
        )
    })?;
    let mut merged: Vec<OsString> = args.iter().take(1).cloned().collect();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            clap::Error::raw(
                clap::error::ErrorKind::InvalidValue,
                format!("{}:{}: expected key=value\n", path.display(), lineno + 1),
            )
        })?;
        merged.push(format!("--{}={}", key.trim(), value.trim()).into());
    }
    merged.extend(args.into_iter().skip(1));
    Cli::try_parse_from(merged)
}

/// Process exit code for an error: 2 configuration or admissibility, 3 solver
/// non-convergence, 4 I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::NonConvergence { .. } => 3,
        Error::Io(_) => 4,
        _ => 2,
    }
}

/// Everything a run needs, resolved and validated from [`Cli`].
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub problem: SddeProblem,
    pub coefficients: Coefficients,
    pub payoff: Payoff,
    pub theta: f64,
    pub delta: Option<f64>,
    pub refinement: usize,
    pub base_level: u32,
    pub max_level: u32,
    pub level: u32,
    pub eps: Vec<f64>,
    pub eps_sweep: Vec<f64>,
    pub samples: usize,
    pub target_se: Option<f64>,
    pub max_samples: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
}

fn level_for_step(problem: &SddeProblem, refinement: usize, h: f64) -> Result<u32> {
    let ratio = problem.horizon() / h;
    let level = ratio.ln() / (refinement as f64).ln();
    let rounded = level.round();
    if !(h > 0.0) || rounded < 0.0 || (level - rounded).abs() > 1e-9 {
        return Err(Error::GridMisaligned(format!(
            "h = {h} is not T / M^level for T = {} and M = {refinement}",
            problem.horizon()
        )));
    }
    Ok(rounded as u32)
}

impl RunConfig {
    pub fn from_cli(cli: &Cli) -> Result<RunConfig> {
        let mut coefficients = Coefficients::new();
        for kv in &cli.coef {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--coef expects key=value, got {kv:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("--coef {k}: {v:?} is not a number")))?;
            coefficients.insert(k.trim().to_string(), v);
        }
        let problem = builtin_problem_with(&cli.problem, &coefficients)?;
        let payoff = Payoff::builtin(&cli.payoff)?;
        if cli.refinement < 2 {
            return Err(Error::config(format!("--M must be at least 2, got {}", cli.refinement)));
        }
        if cli.base_level > cli.max_level {
            return Err(Error::config(format!(
                "--base-level {} exceeds --max-level {}",
                cli.base_level, cli.max_level
            )));
        }
        if cli.eps.is_empty() {
            return Err(Error::config("--eps needs at least one value"));
        }
        if cli.samples < 2 {
            return Err(Error::config("--samples must be at least 2"));
        }
        let level = match cli.h {
            Some(h) => level_for_step(&problem, cli.refinement, h)?,
            None => cli.level.unwrap_or(cli.max_level),
        };
        let jobs = cli
            .jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if jobs == 0 {
            return Err(Error::config("--jobs must be positive"));
        }
        let cfg = RunConfig {
            experiment: cli.experiment,
            problem,
            coefficients,
            payoff,
            theta: cli.theta,
            delta: cli.delta,
            refinement: cli.refinement,
            base_level: cli.base_level,
            max_level: cli.max_level,
            level,
            eps: cli.eps.clone(),
            eps_sweep: cli.eps_sweep.clone(),
            samples: cli.samples,
            target_se: cli.target_se,
            max_samples: cli.max_samples,
            seed: cli.seed,
            out: cli.out.clone(),
            jobs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn problem_at(&self, eps: f64) -> Result<SddeProblem> {
        let p = self.problem.clone().with_noise_scale(eps);
        p.validate()?;
        Ok(p)
    }

    fn sweep_params(&self) -> SweepParams {
        SweepParams {
            refinement: self.refinement,
            theta: self.theta,
            delta: self.delta,
            n_paths: self.samples,
            seed: self.seed,
        }
    }

    fn check_single(&self, level: u32) -> Result<()> {
        let grid = GridSpec::for_level(&self.problem, level, self.refinement, self.theta)?;
        grid.check_admissible(&self.problem)?;
        match self.delta {
            Some(d) => {
                TamedDrift::for_level(self.problem.horizon(), self.refinement, level, d)?;
            }
            None if self.problem.regularity().is_one_sided() => {
                return Err(Error::config(format!(
                    "problem {} has a one-sided Lipschitz drift and needs --delta",
                    self.problem.name()
                )));
            }
            None => {}
        }
        Ok(())
    }

    fn check_pair(&self, level: u32) -> Result<()> {
        LevelPair::new(&self.problem, level, self.refinement, self.theta, self.delta).map(|_| ())
    }

    /// Grid admissibility and coupling constraints for every level the
    /// experiment will touch, before any simulation starts.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::config(format!("--theta must lie in [0, 1], got {}", self.theta)));
        }
        for &e in self.eps.iter().chain(&self.eps_sweep) {
            self.problem_at(e)?;
        }
        let sweep = self.base_level..=self.max_level;
        match self.experiment {
            Experiment::Path | Experiment::Deviation => self.check_single(self.level)?,
            Experiment::Coupled => self.check_pair(self.level)?,
            Experiment::Mlmc => {
                self.check_single(self.base_level)?;
                for l in self.base_level + 1..=self.max_level {
                    self.check_pair(l)?;
                }
            }
            Experiment::RatesStrong => {
                for l in sweep {
                    self.check_single(l)?;
                }
                self.check_single(self.max_level + crate::analysis::REFERENCE_EXTRA_LEVELS)?;
            }
            Experiment::RatesMoment | Experiment::RatesVariance => {
                for l in sweep {
                    self.check_pair(l)?;
                }
                self.check_pair(self.level)?;
            }
        }
        Ok(())
    }
}

/// Result of [`execute`]: the CSV rows plus summary lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<Record>,
    pub summary: Vec<String>,
}

fn plain_record(cfg: &RunConfig, experiment: &str, statistic: impl Into<String>, value: f64) -> Record {
    Record {
        experiment: experiment.to_string(),
        level: None,
        h: None,
        eps: None,
        theta: cfg.theta,
        delta: cfg.delta,
        statistic: statistic.into(),
        value,
        samples: None,
        seed: cfg.seed,
    }
}

fn run_path(cfg: &RunConfig) -> Result<RunOutput> {
    let mut records = Vec::new();
    for &eps in &cfg.eps {
        let p = cfg.problem_at(eps)?;
        let grid = GridSpec::for_level(&p, cfg.level, cfg.refinement, cfg.theta)?;
        let taming = cfg
            .delta
            .map(|d| TamedDrift::for_level(p.horizon(), cfg.refinement, cfg.level, d))
            .transpose()?;
        let noise = NoiseStream::new(cfg.seed, cfg.level, 0, p.dim_noise()).with_grid(grid.total_steps, 1);
        let path = theta_em_path(&p, &grid, &noise, taming.as_ref()).map_err(|e| e.at(cfg.level, 0))?;
        for (n, x) in path.forward_values().enumerate() {
            let t = n as f64 * grid.step;
            for (i, v) in x.iter().enumerate() {
                records.push(Record {
                    level: Some(cfg.level),
                    h: Some(grid.step),
                    eps: Some(eps),
                    ..plain_record(cfg, "path", format!("x{i}(t={t})"), *v)
                });
            }
        }
    }
    let summary = vec![format!("path nodes: {}", records.len() / cfg.problem.dim_state().max(1))];
    Ok(RunOutput { records, summary })
}

fn run_coupled(cfg: &RunConfig) -> Result<RunOutput> {
    let mut records = Vec::new();
    let mut summary = Vec::new();
    for &eps in &cfg.eps {
        let c = coupled_cell(&cfg.problem_at(eps)?, &cfg.payoff, cfg.level, &cfg.sweep_params(), true)?;
        let stats = [
            ("sup_second_moment", c.sup_second_moment),
            ("terminal_second_moment", c.terminal_second_moment),
            ("terminal_variance", c.terminal_variance),
            ("sup_variance", c.sup_variance),
            ("uncoupled_variance", c.uncoupled_variance.unwrap_or(f64::NAN)),
        ];
        for (name, value) in stats {
            records.push(Record {
                level: Some(c.level),
                h: Some(c.h_fine),
                eps: Some(eps),
                samples: Some(c.samples as u64),
                ..plain_record(cfg, "coupled", name, value)
            });
        }
        summary.push(format!(
            "eps {eps}: sup second moment {:e}, terminal variance {:e}",
            c.sup_second_moment, c.terminal_variance
        ));
    }
    Ok(RunOutput { records, summary })
}

fn run_mlmc(cfg: &RunConfig) -> Result<RunOutput> {
    let eps = cfg.eps[0];
    let problem = cfg.problem_at(eps)?;
    let allocation = match cfg.target_se {
        Some(target_se) => SampleAllocation::Auto {
            target_se,
            pilot: DEFAULT_PILOT.min(cfg.max_samples),
            cap: cfg.max_samples,
        },
        None => SampleAllocation::Fixed(vec![cfg.samples]),
    };
    let est = mlmc_estimate(
        &problem,
        &cfg.payoff,
        &MlmcConfig {
            base_level: cfg.base_level,
            max_level: cfg.max_level,
            params: cfg.sweep_params().level_params(),
            allocation,
        },
    )?;
    let mut records = Vec::new();
    for s in &est.levels {
        let h = crate::scheme::level_step(problem.horizon(), cfg.refinement, s.level);
        for (name, value) in [
            ("mean_delta", s.mean_delta()),
            ("var_delta", s.var_delta()),
            ("mean_fine", s.mean_fine()),
            ("var_fine", s.var_fine()),
            ("cost_units", s.cost_units()),
        ] {
            records.push(Record {
                level: Some(s.level),
                h: Some(h),
                eps: Some(eps),
                samples: Some(s.samples()),
                ..plain_record(cfg, "mlmc", name, value)
            });
        }
    }
    for (name, value) in [
        ("value", est.value),
        ("std_error", est.std_error),
        ("total_cost", est.total_cost),
    ] {
        records.push(Record {
            eps: Some(eps),
            ..plain_record(cfg, "mlmc", name, value)
        });
    }
    let status = match est.status {
        EstimateStatus::Ok => "ok".to_string(),
        EstimateStatus::TargetNotMet { target_se } => format!("target standard error {target_se} not met"),
    };
    let summary = vec![
        format!("value: {}", est.value),
        format!("std_error: {}", est.std_error),
        format!("total_cost: {}", est.total_cost),
        format!("status: {status}"),
    ];
    Ok(RunOutput { records, summary })
}

fn fit_line(name: &str, fit: &crate::analysis::RateFit) -> String {
    format!("{name}: slope {:.4}, r^2 {:.4}", fit.slope, fit.r_squared)
}

fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    let params = cfg.sweep_params();
    let levels: Vec<u32> = (cfg.base_level..=cfg.max_level).collect();
    match cfg.experiment {
        Experiment::Path => run_path(cfg),
        Experiment::Coupled => run_coupled(cfg),
        Experiment::Mlmc => run_mlmc(cfg),
        Experiment::RatesStrong => {
            let mut out = RunOutput {
                records: Vec::new(),
                summary: Vec::new(),
            };
            for &eps in &cfg.eps {
                let r = strong_error_rate(&cfg.problem, &cfg.payoff, &params, &levels, eps)?;
                out.summary.push(fit_line(&format!("strong error, eps {eps}"), &r.fit));
                out.records.extend(r.records);
            }
            Ok(out)
        }
        Experiment::RatesMoment | Experiment::RatesVariance => {
            let h = LevelSweep {
                levels,
                eps: cfg.eps[0],
            };
            let e = EpsSweep {
                level: cfg.level,
                eps: cfg.eps_sweep.clone(),
            };
            let r = if cfg.experiment == Experiment::RatesMoment {
                coupled_moment_rates(&cfg.problem, &params, &h, &e)?
            } else {
                coupled_variance_rates(&cfg.problem, &cfg.payoff, &params, &h, &e)?
            };
            Ok(RunOutput {
                summary: vec![fit_line("slope in h", &r.h_slope), fit_line("slope in eps", &r.eps_slope)],
                records: r.records,
            })
        }
        Experiment::Deviation => {
            let r = small_noise_deviation(&cfg.problem, cfg.level, &params, &cfg.eps_sweep)?;
            Ok(RunOutput {
                summary: vec![fit_line("deviation slope in eps", &r.fit)],
                records: r.records,
            })
        }
    }
}

/// Runs the experiment on a pool of `cfg.jobs` threads. The result does not
/// depend on the thread count.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_experiment(cfg))
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

pub fn summary_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".summary.txt");
    PathBuf::from(s)
}

fn render_summary(cfg: &RunConfig, out: &RunOutput, seconds: f64) -> String {
    let mut s = String::new();
    let coef: Vec<String> = cfg.coefficients.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let _ = writeln!(s, "experiment: {}", cfg.experiment.label());
    let _ = writeln!(s, "problem: {}", cfg.problem.name());
    let _ = writeln!(s, "coefficients: {}", coef.join(" "));
    let _ = writeln!(s, "payoff: {}", cfg.payoff.name());
    let _ = writeln!(s, "theta: {}", cfg.theta);
    let _ = writeln!(s, "delta: {}", cfg.delta.map_or("none".into(), |d| d.to_string()));
    let _ = writeln!(s, "M: {}", cfg.refinement);
    let _ = writeln!(s, "levels: {}..={} (level {})", cfg.base_level, cfg.max_level, cfg.level);
    let _ = writeln!(s, "eps: {:?}", cfg.eps);
    let _ = writeln!(s, "eps_sweep: {:?}", cfg.eps_sweep);
    let _ = writeln!(s, "samples: {}", cfg.samples);
    let _ = writeln!(s, "seed: {}", cfg.seed);
    let _ = writeln!(s, "jobs: {}", cfg.jobs);
    let _ = writeln!(s, "rows: {}", out.records.len());
    for line in &out.summary {
        let _ = writeln!(s, "{line}");
    }
    let _ = writeln!(s, "wall_time_s: {seconds:.3}");
    s
}

/// Executes a validated configuration and writes the CSV and summary.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let out = execute(cfg)?;
    let mut csv = Vec::new();
    write_records(&mut csv, &out.records)?;
    write_atomic(&cfg.out, &csv)?;
    let summary = render_summary(cfg, &out, start.elapsed().as_secs_f64());
    write_atomic(&summary_path(&cfg.out), summary.as_bytes())?;
    Ok(out)
}

/// Entry point used by the binary: returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse_args(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                clap::error::ErrorKind::Io => 4,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = RunConfig::from_cli(&cli).and_then(|cfg| run(&cfg));
    match result {
        Ok(out) => {
            for line in &out.summary {
                println!("{line}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        parse_args(std::iter::once("mlmc-sdde").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn defaults_parse() {
        let c = cli(&[]);
        assert_eq!(c.experiment, Experiment::RatesStrong);
        assert_eq!((c.refinement, c.base_level, c.max_level, c.samples), (2, 3, 7, 10_000));
        assert_eq!(c.eps, vec![1e-4]);
    }

    #[test]
    fn step_maps_to_level() {
        let c = cli(&["--experiment", "path", "--h", "0.0625"]);
        assert_eq!(RunConfig::from_cli(&c).unwrap().level, 4);
        let c = cli(&["--experiment", "path", "--h", "0.1"]);
        assert!(matches!(RunConfig::from_cli(&c), Err(Error::GridMisaligned(_))));
    }

    #[test]
    fn inadmissible_theta_is_exit_2() {
        let c = cli(&["--experiment", "path", "--theta", "0.6", "--h", "0.25", "--coef", "a1=-3"]);
        let err = RunConfig::from_cli(&c).unwrap_err();
        assert!(err.to_string().contains("theta*h < 1/max(alpha_bar, 6*beta)"), "{err}");
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn one_sided_needs_delta() {
        let c = cli(&["--experiment", "path", "--problem", "cubic_onesided"]);
        assert_eq!(exit_code(&RunConfig::from_cli(&c).unwrap_err()), 2);
    }

    #[test]
    fn config_file_is_overridden_by_flags() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        fs::write(&f, "# comment\ntheta = 0.5\nsamples=77\ncoef=b1=0.3\n").unwrap();
        let c = cli(&["--config", f.to_str().unwrap(), "--samples", "12"]);
        assert_eq!((c.theta, c.samples), (0.5, 12));
        assert_eq!(c.coef, vec!["b1=0.3".to_string()]);
    }

    #[test]
    fn exit_codes_follow_root_cause() {
        let nc = Error::NonConvergence {
            iterations: 200,
            residual: 1.0,
        };
        assert_eq!(exit_code(&nc.at(3, 4)), 3);
        assert_eq!(exit_code(&Error::Io("x".into())), 4);
        assert_eq!(exit_code(&Error::config("x")), 2);
    }
}

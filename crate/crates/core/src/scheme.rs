//! Single-level theta Euler-Maruyama for SDDEs.
//!
//! With `F` the raw or tamed drift and `m = tau / h`, one step reads
//!
//! ```text
//! X[n+1] - theta h F(X[n+1], X[n+1-m]) = X[n] - theta h F(X[n], X[n-m]) + h F(X[n], X[n-m])
//!                                       + eps g(X[n], X[n-m]) dW[n]
//! ```
//!
//! The delayed argument of the implicit term is a stored grid value because
//! `m >= 1`, so the solve only iterates in the current state.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{norm, DerivedConstants, Regularity, SddeProblem};
use crate::rng::NoiseStream;

/// Absolute residual tolerance of the implicit solve, scaled by `1 + |y|`.
pub const SOLVER_TOL: f64 = 1e-12;
pub const SOLVER_MAX_ITER: usize = 200;

/// Step size of level `l`: `T * M^-l`.
pub fn level_step(horizon: f64, refinement: usize, level: u32) -> f64 {
    horizon / (refinement as f64).powi(level as i32)
}

fn aligned_count(span: f64, step: f64, what: &str) -> Result<usize> {
    let ratio = span / step;
    let count = ratio.round();
    if count < 1.0 || (count * step - span).abs() > 8.0 * f64::EPSILON * span {
        return Err(Error::GridMisaligned(format!(
            "{what} = {span} is not a positive integer multiple of h = {step} (ratio {ratio})"
        )));
    }
    Ok(count as usize)
}

/// Uniform grid with `h * m = tau` and `h * N = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub step: f64,
    pub steps_per_delay: usize,
    pub total_steps: usize,
    pub theta: f64,
}

impl GridSpec {
    pub fn from_step(problem: &SddeProblem, step: f64, theta: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::config(format!("step must be positive, got {step}")));
        }
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::config(format!("theta must lie in [0, 1], got {theta}")));
        }
        Ok(GridSpec {
            step,
            steps_per_delay: aligned_count(problem.delay(), step, "tau")?,
            total_steps: aligned_count(problem.horizon(), step, "T")?,
            theta,
        })
    }

    pub fn for_level(problem: &SddeProblem, level: u32, refinement: usize, theta: f64) -> Result<Self> {
        Self::from_step(problem, level_step(problem.horizon(), refinement, level), theta)
    }

    /// Checks the step-size constraint of the problem's regularity class.
    ///
    /// Global Lipschitz: `theta h < 1 / max(alpha_bar, 6 beta)`.
    /// One-sided Lipschitz: `theta h < 2 / alpha1`.
    /// Explicit (`theta = 0`): `h < 1`.
    pub fn check_admissible(&self, problem: &SddeProblem) -> Result<()> {
        let (theta, h) = (self.theta, self.step);
        if theta == 0.0 {
            if h < 1.0 {
                return Ok(());
            }
            return Err(Error::Admissibility {
                inequality: "h < 1".into(),
                detail: format!("h = {h}"),
            });
        }
        match problem.derived_constants() {
            DerivedConstants::Global { beta, alpha_bar } => {
                let bound = 1.0 / alpha_bar.max(6.0 * beta);
                if theta * h < bound {
                    Ok(())
                } else {
                    Err(Error::Admissibility {
                        inequality: "theta*h < 1/max(alpha_bar, 6*beta)".into(),
                        detail: format!(
                            "theta*h = {} but 1/max({alpha_bar}, {}) = {bound}",
                            theta * h,
                            6.0 * beta
                        ),
                    })
                }
            }
            DerivedConstants::OneSided { alpha1, .. } => {
                let bound = 2.0 / alpha1;
                if theta * h < bound {
                    Ok(())
                } else {
                    Err(Error::Admissibility {
                        inequality: "theta*h < 2/alpha1".into(),
                        detail: format!("theta*h = {} but 2/alpha1 = {bound}", theta * h),
                    })
                }
            }
        }
    }
}

/// Taming `f -> f / (1 + h_coarse^delta |f|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TamedDrift {
    pub h_coarse: f64,
    pub delta: f64,
}

impl TamedDrift {
    /// `delta = 1/2` is accepted; convergence analysis of the coupled
    /// difference relies on `delta < 1/2`.
    pub fn new(h_coarse: f64, delta: f64) -> Result<Self> {
        if !(h_coarse > 0.0 && h_coarse.is_finite()) {
            return Err(Error::config(format!("taming step must be positive, got {h_coarse}")));
        }
        if !(delta > 0.0 && delta <= 0.5) {
            return Err(Error::config(format!("delta must lie in (0, 1/2], got {delta}")));
        }
        Ok(TamedDrift { h_coarse, delta })
    }

    /// The drift `f_{h_l}` used on level `l`: tamed with `h_{l-1}`.
    pub fn for_level(horizon: f64, refinement: usize, level: u32, delta: f64) -> Result<Self> {
        if level == 0 {
            return Err(Error::config("tamed drift needs level >= 1"));
        }
        Self::new(level_step(horizon, refinement, level - 1), delta)
    }

    #[inline]
    pub fn factor(&self) -> f64 {
        self.h_coarse.powf(self.delta)
    }
}

#[inline]
fn tame_in_place(values: &mut [f64], factor: f64) {
    let denom = 1.0 + factor * norm(values);
    values.iter_mut().for_each(|v| *v /= denom);
}

/// `f_value / (1 + h_coarse^delta |f_value|)`.
pub fn tame_drift(f_value: &[f64], h_coarse: f64, delta: f64) -> Vec<f64> {
    let mut out = f_value.to_vec();
    tame_in_place(&mut out, h_coarse.powf(delta));
    out
}

/// The drift a scheme actually steps with: raw, or tamed with a fixed factor.
#[derive(Clone, Copy)]
pub struct EffectiveDrift<'a> {
    problem: &'a SddeProblem,
    taming_factor: Option<f64>,
}

impl<'a> EffectiveDrift<'a> {
    pub fn new(problem: &'a SddeProblem, taming: Option<&TamedDrift>) -> Self {
        EffectiveDrift {
            problem,
            taming_factor: taming.map(TamedDrift::factor),
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.problem.drift(x, y, out);
        if let Some(c) = self.taming_factor {
            tame_in_place(out, c);
        }
    }

    pub fn dim(&self) -> usize {
        self.problem.dim_state()
    }

    /// A Lipschitz bound in `x` when one is known. Taming is 1-Lipschitz, so
    /// it preserves a global bound.
    pub fn lipschitz_bound(&self) -> Option<f64> {
        match self.problem.regularity() {
            Regularity::GlobalLipschitz { alpha } => Some(alpha),
            Regularity::OneSidedLipschitz { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverStrategy {
    /// Fixed-point iteration when `theta h L < 1` is certified, Newton otherwise.
    #[default]
    Auto,
    FixedPoint,
    Newton,
}

/// Solves `x - theta h F(x, delayed) = y` with reusable scratch space.
#[derive(Debug, Clone)]
pub struct ImplicitSolver {
    strategy: SolverStrategy,
    fx: Vec<f64>,
    trial: Vec<f64>,
    residual: Vec<f64>,
    step: Vec<f64>,
    probe: Vec<f64>,
    fprobe: Vec<f64>,
}

impl ImplicitSolver {
    pub fn new(dim: usize) -> Self {
        Self::with_strategy(dim, SolverStrategy::Auto)
    }

    pub fn with_strategy(dim: usize, strategy: SolverStrategy) -> Self {
        ImplicitSolver {
            strategy,
            fx: vec![0.0; dim],
            trial: vec![0.0; dim],
            residual: vec![0.0; dim],
            step: vec![0.0; dim],
            probe: vec![0.0; dim],
            fprobe: vec![0.0; dim],
        }
    }

    /// Writes the solution into `out`; returns the iteration count.
    pub fn solve(
        &mut self,
        drift: &EffectiveDrift<'_>,
        y_target: &[f64],
        delayed: &[f64],
        theta: f64,
        h: f64,
        out: &mut [f64],
    ) -> Result<usize> {
        if theta == 0.0 {
            out.copy_from_slice(y_target);
            return Ok(0);
        }
        let th = theta * h;
        let tol = SOLVER_TOL * (1.0 + norm(y_target));
        let use_fixed_point = match self.strategy {
            SolverStrategy::FixedPoint => true,
            SolverStrategy::Newton => false,
            SolverStrategy::Auto => drift.lipschitz_bound().is_some_and(|l| th * l < 1.0),
        };
        if use_fixed_point {
            self.fixed_point(drift, y_target, delayed, th, tol, out)
        } else {
            self.newton(drift, y_target, delayed, th, tol, out)
        }
    }

    fn fixed_point(
        &mut self,
        drift: &EffectiveDrift<'_>,
        y: &[f64],
        delayed: &[f64],
        th: f64,
        tol: f64,
        out: &mut [f64],
    ) -> Result<usize> {
        out.copy_from_slice(y);
        let mut change = f64::INFINITY;
        for iter in 1..=SOLVER_MAX_ITER {
            drift.eval(out, delayed, &mut self.fx);
            change = 0.0;
            for i in 0..out.len() {
                let next = y[i] + th * self.fx[i];
                change += (next - out[i]) * (next - out[i]);
                out[i] = next;
            }
            change = change.sqrt();
            // the residual of the previous iterate equals the update size
            if change <= tol {
                return Ok(iter);
            }
            if !change.is_finite() {
                break;
            }
        }
        Err(Error::NonConvergence {
            iterations: SOLVER_MAX_ITER,
            residual: change,
        })
    }

    fn residual_into(
        drift: &EffectiveDrift<'_>,
        x: &[f64],
        y: &[f64],
        delayed: &[f64],
        th: f64,
        fx: &mut [f64],
        res: &mut [f64],
    ) -> f64 {
        drift.eval(x, delayed, fx);
        for i in 0..x.len() {
            res[i] = x[i] - th * fx[i] - y[i];
        }
        norm(res)
    }

    fn newton(
        &mut self,
        drift: &EffectiveDrift<'_>,
        y: &[f64],
        delayed: &[f64],
        th: f64,
        tol: f64,
        out: &mut [f64],
    ) -> Result<usize> {
        let dim = out.len();
        out.copy_from_slice(y);
        let mut res_norm = Self::residual_into(drift, out, y, delayed, th, &mut self.fx, &mut self.residual);
        for iter in 0..SOLVER_MAX_ITER {
            if res_norm <= tol {
                return Ok(iter);
            }
            if !res_norm.is_finite() {
                break;
            }
            // Jacobian of x - th F(x, d) by central differences
            let mut jac = DMatrix::<f64>::identity(dim, dim);
            for j in 0..dim {
                let s = 1e-6 * out[j].abs().max(1.0);
                self.probe.copy_from_slice(out);
                self.probe[j] = out[j] + s;
                drift.eval(&self.probe, delayed, &mut self.fprobe);
                self.trial.copy_from_slice(&self.fprobe);
                self.probe[j] = out[j] - s;
                drift.eval(&self.probe, delayed, &mut self.fprobe);
                for i in 0..dim {
                    jac[(i, j)] -= th * (self.trial[i] - self.fprobe[i]) / (2.0 * s);
                }
            }
            if dim == 1 {
                self.step[0] = -self.residual[0] / jac[(0, 0)];
            } else {
                let rhs = DVector::from_iterator(dim, self.residual.iter().map(|r| -r));
                match jac.lu().solve(&rhs) {
                    Some(delta) => self.step.copy_from_slice(delta.as_slice()),
                    None => break,
                }
            }
            if !self.step.iter().all(|s| s.is_finite()) {
                break;
            }
            // backtracking on the residual norm
            let mut lambda = 1.0;
            loop {
                for i in 0..dim {
                    self.trial[i] = out[i] + lambda * self.step[i];
                }
                let trial_norm =
                    Self::residual_into(drift, &self.trial, y, delayed, th, &mut self.fx, &mut self.probe);
                if trial_norm <= (1.0 - 1e-4 * lambda) * res_norm || lambda < 1e-8 {
                    out.copy_from_slice(&self.trial);
                    self.residual.copy_from_slice(&self.probe);
                    let stalled = norm(&self.step) * lambda <= 4.0 * f64::EPSILON * (1.0 + norm(out));
                    res_norm = trial_norm;
                    if stalled && res_norm <= 1e3 * tol {
                        return Ok(iter + 1);
                    }
                    break;
                }
                lambda *= 0.5;
            }
        }
        Err(Error::NonConvergence {
            iterations: SOLVER_MAX_ITER,
            residual: res_norm,
        })
    }
}

/// One-shot form of [`ImplicitSolver::solve`].
pub fn implicit_step_solve(
    y_target: &[f64],
    delayed: &[f64],
    drift: &EffectiveDrift<'_>,
    theta: f64,
    h: f64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; y_target.len()];
    ImplicitSolver::new(y_target.len()).solve(drift, y_target, delayed, theta, h, &mut out)?;
    Ok(out)
}

/// Grid values `X(t_n)` for `n = -m..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayBuffer {
    dim: usize,
    history_len: usize,
    data: Vec<f64>,
    filled: usize,
}

impl DelayBuffer {
    /// Buffer with `history[-m..=0]` taken from the initial segment at `n h`.
    pub fn from_initial(problem: &SddeProblem, step: f64, steps_per_delay: usize, total_steps: usize) -> Self {
        let dim = problem.dim_state();
        let mut data = vec![0.0; (steps_per_delay + total_steps + 1) * dim];
        for (i, chunk) in data.chunks_mut(dim).take(steps_per_delay + 1).enumerate() {
            let n = i as f64 - steps_per_delay as f64;
            problem.initial(n * step, chunk);
        }
        DelayBuffer {
            dim,
            history_len: steps_per_delay,
            data,
            filled: steps_per_delay + 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps_per_delay(&self) -> usize {
        self.history_len
    }

    /// Number of forward steps the buffer can hold (`N`).
    pub fn total_steps(&self) -> usize {
        self.data.len() / self.dim - self.history_len - 1
    }

    /// Highest filled grid index.
    pub fn filled_to(&self) -> isize {
        self.filled as isize - self.history_len as isize - 1
    }

    #[inline]
    fn slot(&self, n: isize) -> usize {
        (n + self.history_len as isize) as usize
    }

    /// `X(t_n)`. Panics if `n` is outside the filled prefix.
    #[inline]
    pub fn get(&self, n: isize) -> &[f64] {
        let s = self.slot(n);
        assert!(n >= -(self.history_len as isize) && s < self.filled, "index {n} not filled");
        &self.data[s * self.dim..(s + 1) * self.dim]
    }

    pub fn try_get(&self, n: isize) -> Result<&[f64]> {
        if n < -(self.history_len as isize) || n > self.filled_to() {
            return Err(Error::OutOfRange(format!(
                "grid index {n} outside filled range {}..={}",
                -(self.history_len as isize),
                self.filled_to()
            )));
        }
        Ok(self.get(n))
    }

    /// Appends `X(t_{filled_to + 1})`.
    #[inline]
    pub fn push(&mut self, x: &[f64]) {
        let s = self.filled;
        self.data[s * self.dim..(s + 1) * self.dim].copy_from_slice(x);
        self.filled += 1;
    }

    /// Split borrow: `(X(t_n), X(t_{n-m}), X(t_{n+1-m}))` for the step out of `n`.
    #[inline]
    fn step_inputs(&self, n: usize) -> (&[f64], &[f64], &[f64]) {
        let n = n as isize;
        let m = self.history_len as isize;
        (self.get(n), self.get(n - m), self.get(n + 1 - m))
    }

    pub fn terminal(&self) -> &[f64] {
        self.get(self.filled_to())
    }

    /// Forward values `X(t_0), ..., X(t_filled)` as one vector per node.
    pub fn forward_values(&self) -> impl Iterator<Item = &[f64]> {
        self.data[self.history_len * self.dim..self.filled * self.dim].chunks(self.dim)
    }
}

/// Advances one theta step with scratch buffers held across steps.
pub(crate) struct ThetaStepper<'a> {
    problem: &'a SddeProblem,
    drift: EffectiveDrift<'a>,
    solver: ImplicitSolver,
    theta: f64,
    step: f64,
    eps: f64,
    fx: Vec<f64>,
    gx: Vec<f64>,
    rhs: Vec<f64>,
    next: Vec<f64>,
}

impl<'a> ThetaStepper<'a> {
    pub(crate) fn new(problem: &'a SddeProblem, taming: Option<&TamedDrift>, theta: f64, step: f64) -> Self {
        let (a, d) = (problem.dim_state(), problem.dim_noise());
        ThetaStepper {
            problem,
            drift: EffectiveDrift::new(problem, taming),
            solver: ImplicitSolver::new(a),
            theta,
            step,
            eps: problem.noise_scale(),
            fx: vec![0.0; a],
            gx: vec![0.0; a * d],
            rhs: vec![0.0; a],
            next: vec![0.0; a],
        }
    }

    /// Computes `X[n+1]` from the buffer (filled through `n`); `dw = None`
    /// drops the noise term entirely.
    #[inline]
    pub(crate) fn advance(&mut self, buf: &mut DelayBuffer, n: usize, dw: Option<&[f64]>) -> Result<()> {
        let (x, delayed, delayed_next) = buf.step_inputs(n);
        let (theta, h) = (self.theta, self.step);
        self.drift.eval(x, delayed, &mut self.fx);
        match dw {
            Some(dw) => {
                self.problem.diffusion(x, delayed, &mut self.gx);
                let d = dw.len();
                for i in 0..x.len() {
                    let mut noise = 0.0;
                    for j in 0..d {
                        noise += self.gx[i * d + j] * dw[j];
                    }
                    self.rhs[i] = x[i] - theta * h * self.fx[i] + h * self.fx[i] + self.eps * noise;
                }
            }
            None => {
                for i in 0..x.len() {
                    self.rhs[i] = x[i] - theta * h * self.fx[i] + h * self.fx[i];
                }
            }
        }
        self.solver
            .solve(&self.drift, &self.rhs, delayed_next, theta, h, &mut self.next)?;
        buf.push(&self.next);
        Ok(())
    }
}

fn check_path_preconditions(problem: &SddeProblem, grid: &GridSpec, taming: Option<&TamedDrift>) -> Result<()> {
    problem.validate()?;
    // re-derive alignment so hand-built GridSpecs are checked too
    let fresh = GridSpec::from_step(problem, grid.step, grid.theta)?;
    if fresh.steps_per_delay != grid.steps_per_delay || fresh.total_steps != grid.total_steps {
        return Err(Error::GridMisaligned(format!(
            "grid declares m = {}, N = {} but h = {} gives m = {}, N = {}",
            grid.steps_per_delay, grid.total_steps, grid.step, fresh.steps_per_delay, fresh.total_steps
        )));
    }
    grid.check_admissible(problem)?;
    if problem.regularity().is_one_sided() && taming.is_none() {
        return Err(Error::config(
            "one-sided Lipschitz problems must be simulated with a tamed drift",
        ));
    }
    Ok(())
}

/// Theta EM path driven by caller-supplied Brownian increments: `increment(n, dw)`
/// writes `dW_n = W(t_{n+1}) - W(t_n)` into `dw`.
pub fn theta_em_path_driven<I>(
    problem: &SddeProblem,
    grid: &GridSpec,
    taming: Option<&TamedDrift>,
    mut increment: I,
) -> Result<DelayBuffer>
where
    I: FnMut(usize, &mut [f64]) -> Result<()>,
{
    check_path_preconditions(problem, grid, taming)?;
    let mut buf = DelayBuffer::from_initial(problem, grid.step, grid.steps_per_delay, grid.total_steps);
    let mut stepper = ThetaStepper::new(problem, taming, grid.theta, grid.step);
    let mut dw = vec![0.0; problem.dim_noise()];
    for n in 0..grid.total_steps {
        increment(n, &mut dw)?;
        stepper.advance(&mut buf, n, Some(&dw))?;
    }
    Ok(buf)
}

/// Theta EM path on `noise`. With refinement `M > 1` each step consumes the
/// sum of its `M` sub-increments scaled by `sqrt(h / M)`.
pub fn theta_em_path(
    problem: &SddeProblem,
    grid: &GridSpec,
    noise: &NoiseStream,
    taming: Option<&TamedDrift>,
) -> Result<DelayBuffer> {
    if noise.dim() != problem.dim_noise() {
        return Err(Error::config(format!(
            "noise dimension {} does not match problem dimension {}",
            noise.dim(),
            problem.dim_noise()
        )));
    }
    if noise.coarse_steps() < grid.total_steps {
        return Err(Error::OutOfRange(format!(
            "noise stream holds {} steps, grid needs {}",
            noise.coarse_steps(),
            grid.total_steps
        )));
    }
    let block = noise.refinement();
    let scale = (grid.step / block as f64).sqrt();
    let mut cursor = noise.cursor();
    let mut xi = vec![0.0; problem.dim_noise()];
    theta_em_path_driven(problem, grid, taming, |_, dw| {
        cursor.next_into(dw)?;
        for _ in 1..block {
            cursor.next_into(&mut xi)?;
            dw.iter_mut().zip(&xi).for_each(|(w, x)| *w += x);
        }
        dw.iter_mut().for_each(|w| *w *= scale);
        Ok(())
    })
}

/// The noise-free recursion (`eps = 0`).
pub fn deterministic_path(problem: &SddeProblem, grid: &GridSpec, taming: Option<&TamedDrift>) -> Result<DelayBuffer> {
    check_path_preconditions(problem, grid, taming)?;
    let mut buf = DelayBuffer::from_initial(problem, grid.step, grid.steps_per_delay, grid.total_steps);
    let mut stepper = ThetaStepper::new(problem, taming, grid.theta, grid.step);
    for n in 0..grid.total_steps {
        stepper.advance(&mut buf, n, None)?;
    }
    Ok(buf)
}

/// Explicit EM with the raw drift and no admissibility or taming checks.
/// Diagnostic only: on superlinear drifts it may overflow to infinity.
pub fn untamed_explicit_path(problem: &SddeProblem, step: f64, noise: &NoiseStream) -> Result<DelayBuffer> {
    let grid = GridSpec::from_step(problem, step, 0.0)?;
    let mut buf = DelayBuffer::from_initial(problem, grid.step, grid.steps_per_delay, grid.total_steps);
    let mut stepper = ThetaStepper::new(problem, None, 0.0, grid.step);
    let scale = grid.step.sqrt();
    let mut cursor = noise.cursor();
    let mut dw = vec![0.0; problem.dim_noise()];
    for n in 0..grid.total_steps {
        cursor.next_into(&mut dw)?;
        dw.iter_mut().for_each(|w| *w *= scale);
        stepper.advance(&mut buf, n, Some(&dw))?;
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_problem, builtin_problem_with, Coefficients};
    use approx::assert_relative_eq;

    fn coefs(pairs: &[(&str, f64)]) -> Coefficients {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn tame_zero_is_zero() {
        assert_eq!(tame_drift(&[0.0, 0.0], 0.25, 0.5), vec![0.0, 0.0]);
    }

    #[test]
    fn tame_three_four() {
        let out = tame_drift(&[3.0, 4.0], 0.25, 0.5);
        // independent scalar evaluation: |f| = 5, factor 1 / (1 + 0.5 * 5)
        assert_relative_eq!(out[0], 3.0 / 3.5, max_relative = 1e-15);
        assert_relative_eq!(out[1], 4.0 / 3.5, max_relative = 1e-15);
        assert_relative_eq!(norm(&out), 10.0 / 7.0, max_relative = 1e-15);
    }

    #[test]
    fn tame_saturates_along_a_ray() {
        let h: f64 = 0.0625;
        let cap = h.powf(-0.25);
        let mut last = 0.0;
        for k in 1..12 {
            let scale = 10f64.powi(k);
            let n = norm(&tame_drift(&[scale, -2.0 * scale], h, 0.25));
            assert!(n >= last && n <= cap * (1.0 + 1e-15));
            last = n;
        }
        assert_relative_eq!(last, cap, max_relative = 1e-9);
    }

    #[test]
    fn grid_alignment() {
        let p = builtin_problem("linear_scalar").unwrap();
        let g = GridSpec::for_level(&p, 3, 2, 0.5).unwrap();
        assert_eq!((g.steps_per_delay, g.total_steps), (2, 8));
        assert!(matches!(GridSpec::from_step(&p, 0.3, 0.5), Err(Error::GridMisaligned(_))));
        // h > tau cannot align
        assert!(GridSpec::for_level(&p, 1, 2, 0.5).is_err());
    }

    #[test]
    fn admissibility_names_the_inequality() {
        let p = builtin_problem("linear_scalar").unwrap();
        // alpha = 1.1, beta = 1.1 -> 1/max(1.71, 6.6) = 0.1515
        let bad = GridSpec::for_level(&p, 2, 2, 0.8).unwrap();
        let err = bad.check_admissible(&p).unwrap_err();
        assert!(err.to_string().contains("theta*h < 1/max(alpha_bar, 6*beta)"), "{err}");
        assert!(GridSpec::for_level(&p, 3, 2, 1.0).unwrap().check_admissible(&p).is_ok());
        assert!(GridSpec::for_level(&p, 2, 2, 0.0).unwrap().check_admissible(&p).is_ok());

        let cubic = builtin_problem("cubic_onesided").unwrap();
        let ok = GridSpec::for_level(&cubic, 2, 2, 1.0).unwrap();
        assert!(ok.check_admissible(&cubic).is_ok());
        let coarse = builtin_problem_with("cubic_onesided", &coefs(&[("tau", 2.0), ("T", 4.0), ("sigma", 2.0)])).unwrap();
        let err = GridSpec::from_step(&coarse, 2.0, 1.0).unwrap().check_admissible(&coarse).unwrap_err();
        assert!(err.to_string().contains("2/alpha1"), "{err}");
    }

    #[test]
    fn one_sided_requires_taming() {
        let p = builtin_problem("cubic_onesided").unwrap();
        let g = GridSpec::for_level(&p, 4, 2, 0.5).unwrap();
        let noise = NoiseStream::new(0, 4, 0, 1).with_grid(g.total_steps, 1);
        assert!(matches!(theta_em_path(&p, &g, &noise, None), Err(Error::Config(_))));
        let tamed = TamedDrift::for_level(1.0, 2, 4, 0.5).unwrap();
        assert!(theta_em_path(&p, &g, &noise, Some(&tamed)).is_ok());
    }

    #[test]
    fn theta_zero_returns_target() {
        let p = builtin_problem("linear_scalar").unwrap();
        let drift = EffectiveDrift::new(&p, None);
        assert_eq!(implicit_step_solve(&[0.3], &[1.0], &drift, 0.0, 0.1).unwrap(), vec![0.3]);
    }

    #[test]
    fn fixed_point_and_newton_agree_on_linear_drift() {
        let p = builtin_problem("linear_scalar").unwrap();
        let drift = EffectiveDrift::new(&p, None);
        let (y, d, th) = (0.7, -0.2, 0.125);
        let exact = (y + th * 0.5 * d) / (1.0 + th);
        for strategy in [SolverStrategy::FixedPoint, SolverStrategy::Newton, SolverStrategy::Auto] {
            let mut out = [0.0];
            ImplicitSolver::with_strategy(1, strategy)
                .solve(&drift, &[y], &[d], 1.0, th, &mut out)
                .unwrap();
            assert!((out[0] - exact).abs() < 1e-12, "{strategy:?}: {}", out[0]);
        }
    }

    #[test]
    fn diverging_fixed_point_reports_nonconvergence() {
        // theta h alpha = 3 > 1: the fixed-point map expands
        let p = builtin_problem_with("linear_scalar", &coefs(&[("a1", -3.0), ("b1", 0.0)])).unwrap();
        let drift = EffectiveDrift::new(&p, None);
        let mut out = [0.0];
        let err = ImplicitSolver::with_strategy(1, SolverStrategy::FixedPoint)
            .solve(&drift, &[1.0], &[0.0], 1.0, 1.0, &mut out)
            .unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }

    #[test]
    fn zero_dynamics_path_is_constant() {
        let p = builtin_problem_with("zero_dynamics", &coefs(&[("x0", 2.5)])).unwrap();
        let g = GridSpec::for_level(&p, 5, 2, 0.7).unwrap();
        let noise = NoiseStream::new(3, 5, 0, 1).with_grid(g.total_steps, 1);
        let path = theta_em_path(&p, &g, &noise, None).unwrap();
        assert!(path.forward_values().all(|x| x == [2.5]));
        assert_eq!(path.filled_to(), 32);
    }

    #[test]
    fn history_matches_initial_segment() {
        let p = builtin_problem("linear_scalar")
            .unwrap()
            .with_initial_segment(|s, out| out[0] = 1.0 + s);
        let g = GridSpec::for_level(&p, 4, 2, 0.5).unwrap();
        let path = deterministic_path(&p, &g, None).unwrap();
        for n in -4..=0isize {
            assert_eq!(path.get(n)[0], 1.0 + n as f64 * 0.0625);
        }
        assert!(path.try_get(17).is_err());
    }

    #[test]
    fn theta_zero_is_explicit_em() {
        let p = builtin_problem_with("linear_scalar", &coefs(&[("b1", 0.4), ("b2", -0.3)])).unwrap();
        let g = GridSpec::for_level(&p, 5, 2, 0.0).unwrap();
        let noise = NoiseStream::new(8, 5, 3, 1).with_grid(g.total_steps, 1);
        let path = theta_em_path(&p, &g, &noise, None).unwrap();

        let (a1, a2, b1, b2, eps, h) = (-1.0, 0.5, 0.4, -0.3, p.noise_scale(), g.step);
        let m = g.steps_per_delay;
        let mut x = vec![1.0; m + 1];
        for n in 0..g.total_steps {
            let (xn, yn) = (x[n + m], x[n]);
            let dw = h.sqrt() * noise.gaussian_increment(n, 0).unwrap()[0];
            let f = a1 * xn + a2 * yn;
            let gv = b1 * xn + b2 * yn;
            x.push(xn + h * f + eps * (gv * dw));
        }
        for (n, v) in path.forward_values().enumerate() {
            assert_eq!(v[0], x[n + m], "step {n}");
        }
    }
}

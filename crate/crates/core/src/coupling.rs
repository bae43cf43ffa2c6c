//! Fine/coarse path pairs on shared Brownian increments.
//!
//! Level `l` pairs a fine path with step `h_l = T M^-l` and a coarse path with
//! step `h_{l-1} = M h_l`. Coarse interval `n` is split into `M` fine substeps
//! at `t_n^k = n h_{l-1} + k h_l`. The fine path consumes `sqrt(h_l) xi_n^k` on
//! each substep and the coarse path consumes `sqrt(h_l) sum_k xi_n^k` once.
//!
//! In the tamed regime the fine path uses `f_{h_l}` (tamed with `h_{l-1}`) and
//! the coarse path `f_{h_{l-1}}` (tamed with `h_{l-2}`), so tamed levels start
//! at `l = 2`.

use crate::error::{Error, Result};
use crate::model::{Payoff, SddeProblem};
use crate::rng::NoiseStream;
use crate::scheme::{theta_em_path, DelayBuffer, GridSpec, TamedDrift, ThetaStepper};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelPair {
    pub refinement: usize,
    pub level: u32,
    pub theta: f64,
    /// Taming exponent `delta`; `None` runs the raw drift.
    pub delta: Option<f64>,
    fine: GridSpec,
    coarse: GridSpec,
}

impl LevelPair {
    /// Validates delay alignment of both grids and step admissibility for both.
    pub fn new(problem: &SddeProblem, level: u32, refinement: usize, theta: f64, delta: Option<f64>) -> Result<Self> {
        if refinement < 2 {
            return Err(Error::config(format!("refinement M must be at least 2, got {refinement}")));
        }
        if level < 1 {
            return Err(Error::config("coupled levels start at l = 1"));
        }
        if problem.regularity().is_one_sided() && delta.is_none() {
            return Err(Error::config(
                "one-sided Lipschitz problems need a taming exponent delta",
            ));
        }
        if delta.is_some() && level < 2 {
            return Err(Error::config(format!(
                "tamed coupling needs level >= 2 (coarse drift is tamed with h_(l-2)), got {level}"
            )));
        }
        let fine = GridSpec::for_level(problem, level, refinement, theta)?;
        let coarse = GridSpec::for_level(problem, level - 1, refinement, theta)?;
        if fine.steps_per_delay != refinement * coarse.steps_per_delay
            || fine.total_steps != refinement * coarse.total_steps
        {
            return Err(Error::GridMisaligned(format!(
                "fine grid (m = {}, N = {}) does not refine coarse grid (m = {}, N = {}) by M = {refinement}",
                fine.steps_per_delay, fine.total_steps, coarse.steps_per_delay, coarse.total_steps
            )));
        }
        fine.check_admissible(problem)?;
        coarse.check_admissible(problem)?;
        let pair = LevelPair {
            refinement,
            level,
            theta,
            delta,
            fine,
            coarse,
        };
        pair.fine_taming(problem)?;
        Ok(pair)
    }

    pub fn fine_grid(&self) -> &GridSpec {
        &self.fine
    }

    pub fn coarse_grid(&self) -> &GridSpec {
        &self.coarse
    }

    pub fn fine_step(&self) -> f64 {
        self.fine.step
    }

    pub fn coarse_step(&self) -> f64 {
        self.coarse.step
    }

    pub fn coarse_steps(&self) -> usize {
        self.coarse.total_steps
    }

    /// `f_{h_l}`, tamed with `h_{l-1}`.
    pub fn fine_taming(&self, problem: &SddeProblem) -> Result<Option<TamedDrift>> {
        self.delta
            .map(|d| TamedDrift::for_level(problem.horizon(), self.refinement, self.level, d))
            .transpose()
    }

    /// `f_{h_{l-1}}`, tamed with `h_{l-2}`.
    pub fn coarse_taming(&self, problem: &SddeProblem) -> Result<Option<TamedDrift>> {
        self.delta
            .map(|d| TamedDrift::for_level(problem.horizon(), self.refinement, self.level - 1, d))
            .transpose()
    }

    /// The noise stream for path `path` of this level.
    pub fn noise(&self, problem: &SddeProblem, seed: u64, path: u64) -> NoiseStream {
        NoiseStream::new(seed, self.level, path, problem.dim_noise()).with_grid(self.coarse.total_steps, self.refinement)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPair {
    refinement: usize,
    /// Full fine path on its own grid.
    pub fine: DelayBuffer,
    pub coarse: DelayBuffer,
}

impl CoupledPair {
    /// Number of coarse nodes, `N_c + 1`.
    pub fn node_count(&self) -> usize {
        self.coarse.filled_to() as usize + 1
    }

    /// `X_{h_l}(t_n)` at coarse node `n`.
    pub fn fine_at(&self, n: usize) -> &[f64] {
        self.fine.get((n * self.refinement) as isize)
    }

    pub fn coarse_at(&self, n: usize) -> &[f64] {
        self.coarse.get(n as isize)
    }

    /// The fine path restricted to the coarse grid.
    pub fn fine_on_coarse_grid(&self) -> Vec<&[f64]> {
        (0..self.node_count()).map(|n| self.fine_at(n)).collect()
    }

    /// `|X_{h_l}(t_n) - X_{h_{l-1}}(t_n)|^2` for every coarse node.
    pub fn squared_gaps(&self) -> Vec<f64> {
        (0..self.node_count())
            .map(|n| {
                self.fine_at(n)
                    .iter()
                    .zip(self.coarse_at(n))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect()
    }

    /// `Psi(fine(t_n)) - Psi(coarse(t_n))` for every coarse node.
    pub fn node_payoff_deltas(&self, psi: &Payoff) -> Vec<f64> {
        (0..self.node_count())
            .map(|n| psi.eval(self.fine_at(n)) - psi.eval(self.coarse_at(n)))
            .collect()
    }
}

/// Simulates one coupled pair. `noise` must have refinement `M` and cover the
/// coarse grid.
pub fn simulate_coupled(problem: &SddeProblem, pair: &LevelPair, noise: &NoiseStream) -> Result<CoupledPair> {
    problem.validate()?;
    let m = pair.refinement;
    if noise.refinement() != m || noise.coarse_steps() < pair.coarse.total_steps {
        return Err(Error::config(format!(
            "noise stream grid ({} x {}) does not cover the coupled grid ({} x {m})",
            noise.coarse_steps(),
            noise.refinement(),
            pair.coarse.total_steps
        )));
    }
    if noise.dim() != problem.dim_noise() {
        return Err(Error::config("noise dimension does not match the problem"));
    }
    let fine_taming = pair.fine_taming(problem)?;
    let coarse_taming = pair.coarse_taming(problem)?;
    let (fine_grid, coarse_grid) = (&pair.fine, &pair.coarse);

    let mut fine = DelayBuffer::from_initial(problem, fine_grid.step, fine_grid.steps_per_delay, fine_grid.total_steps);
    let mut coarse = DelayBuffer::from_initial(
        problem,
        coarse_grid.step,
        coarse_grid.steps_per_delay,
        coarse_grid.total_steps,
    );
    let mut fine_stepper = ThetaStepper::new(problem, fine_taming.as_ref(), pair.theta, fine_grid.step);
    let mut coarse_stepper = ThetaStepper::new(problem, coarse_taming.as_ref(), pair.theta, coarse_grid.step);

    let d = problem.dim_noise();
    let sqrt_h = fine_grid.step.sqrt();
    let mut cursor = noise.cursor();
    let (mut xi, mut sum, mut dw) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for n in 0..coarse_grid.total_steps {
        sum.fill(0.0);
        for k in 0..m {
            cursor.next_into(&mut xi)?;
            for j in 0..d {
                sum[j] += xi[j];
                dw[j] = sqrt_h * xi[j];
            }
            fine_stepper.advance(&mut fine, n * m + k, Some(&dw))?;
        }
        for j in 0..d {
            dw[j] = sqrt_h * sum[j];
        }
        coarse_stepper.advance(&mut coarse, n, Some(&dw))?;
    }
    Ok(CoupledPair {
        refinement: m,
        fine,
        coarse,
    })
}

/// Fine and coarse paths of `pair` driven by independent noise. Both streams
/// use refinement 1: `fine_noise` holds one increment per fine step and
/// `coarse_noise` one per coarse step.
pub fn simulate_independent(
    problem: &SddeProblem,
    pair: &LevelPair,
    fine_noise: &NoiseStream,
    coarse_noise: &NoiseStream,
) -> Result<CoupledPair> {
    let fine = theta_em_path(problem, &pair.fine, fine_noise, pair.fine_taming(problem)?.as_ref())?;
    let coarse = theta_em_path(problem, &pair.coarse, coarse_noise, pair.coarse_taming(problem)?.as_ref())?;
    Ok(CoupledPair {
        refinement: pair.refinement,
        fine,
        coarse,
    })
}

/// `Psi(X_{h_l}(T)) - Psi(X_{h_{l-1}}(T))`.
pub fn coupled_payoff_delta(pair: &CoupledPair, psi: &Payoff) -> f64 {
    psi.eval(pair.fine.terminal()) - psi.eval(pair.coarse.terminal())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_problem, builtin_problem_with, Coefficients};
    use crate::scheme::theta_em_path_driven;

    fn coefs(pairs: &[(&str, f64)]) -> Coefficients {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn zero_dynamics_pair_is_constant() {
        let p = builtin_problem_with("zero_dynamics", &coefs(&[("x0", -0.75)])).unwrap();
        let pair = LevelPair::new(&p, 4, 2, 0.5, None).unwrap();
        let cp = simulate_coupled(&p, &pair, &pair.noise(&p, 1, 0)).unwrap();
        assert!(cp.fine.forward_values().all(|x| x == [-0.75]));
        assert!(cp.coarse.forward_values().all(|x| x == [-0.75]));
        assert_eq!(coupled_payoff_delta(&cp, &Payoff::builtin("sigmoid").unwrap()), 0.0);
    }

    #[test]
    fn additive_noise_zero_drift_agrees_at_coarse_nodes() {
        let p = builtin_problem_with(
            "additive_noise",
            &coefs(&[("a1", 0.0), ("a2", 0.0), ("sigma", 1.3), ("eps", 0.6)]),
        )
        .unwrap();
        for m in [2, 3, 4] {
            let tau_level = if m == 3 { 2 } else { 4 };
            let p = if m == 3 {
                builtin_problem_with(
                    "additive_noise",
                    &coefs(&[("a1", 0.0), ("a2", 0.0), ("sigma", 1.3), ("eps", 0.6), ("tau", 1.0 / 9.0)]),
                )
                .unwrap()
            } else {
                p.clone()
            };
            let pair = LevelPair::new(&p, tau_level + 1, m, 0.0, None).unwrap();
            let cp = simulate_coupled(&p, &pair, &pair.noise(&p, 5, 9)).unwrap();
            for n in 0..cp.node_count() {
                let (f, c) = (cp.fine_at(n)[0], cp.coarse_at(n)[0]);
                assert!((f - c).abs() <= 1e-12 * f.abs().max(1.0), "M={m} n={n}: {f} vs {c}");
            }
        }
    }

    #[test]
    fn fine_path_equals_single_level_path() {
        let p = builtin_problem("linear_scalar").unwrap();
        let pair = LevelPair::new(&p, 5, 2, 0.5, None).unwrap();
        let noise = pair.noise(&p, 3, 14);
        let cp = simulate_coupled(&p, &pair, &noise).unwrap();
        let single_noise = NoiseStream::new(3, 5, 14, 1).with_grid(pair.fine_grid().total_steps, 1);
        let single = theta_em_path(&p, pair.fine_grid(), &single_noise, None).unwrap();
        assert_eq!(cp.fine, single);
    }

    fn telescoping_check(problem: &SddeProblem, level: u32, delta: Option<f64>) {
        let upper = LevelPair::new(problem, level + 1, 2, 0.5, delta).unwrap();
        let noise = upper.noise(problem, 21, 4);
        let cp = simulate_coupled(problem, &upper, &noise).unwrap();

        // the fine path of level `level` driven by the aggregated increments
        let lower = LevelPair::new(problem, level, 2, 0.5, delta).unwrap();
        let sqrt_h = upper.fine_step().sqrt();
        let mut cursor = noise.cursor();
        let mut xi = [0.0];
        let fine = theta_em_path_driven(problem, lower.fine_grid(), lower.fine_taming(problem).unwrap().as_ref(), |_, dw| {
            let mut sum = 0.0;
            for _ in 0..2 {
                cursor.next_into(&mut xi)?;
                sum += xi[0];
            }
            dw[0] = sqrt_h * sum;
            Ok(())
        })
        .unwrap();
        assert_eq!(fine, cp.coarse);
    }

    #[test]
    fn coarse_of_next_level_is_fine_of_this_level() {
        telescoping_check(&builtin_problem("linear_scalar").unwrap(), 4, None);
        // the tamed drifts also line up: both use h_(l-1) in the taming factor
        telescoping_check(&builtin_problem("cubic_onesided").unwrap(), 4, Some(0.25));
    }

    #[test]
    fn level_pair_validation() {
        let p = builtin_problem("linear_scalar").unwrap();
        assert!(LevelPair::new(&p, 3, 1, 0.5, None).is_err());
        // coarse h = 0.5 exceeds tau = 0.25
        assert!(matches!(LevelPair::new(&p, 2, 2, 0.5, None), Err(Error::GridMisaligned(_))));
        // theta h_(l-1) = 0.25 > 0.1515
        assert!(matches!(LevelPair::new(&p, 3, 2, 1.0, None), Err(Error::Admissibility { .. })));
        let cubic = builtin_problem("cubic_onesided").unwrap();
        assert!(LevelPair::new(&cubic, 3, 2, 0.5, None).is_err());
        let tau_one = builtin_problem_with("cubic_onesided", &coefs(&[("tau", 1.0)])).unwrap();
        assert!(LevelPair::new(&tau_one, 1, 2, 0.5, Some(0.25)).is_err());
        assert!(LevelPair::new(&tau_one, 2, 2, 0.5, Some(0.25)).is_ok());
    }

    #[test]
    fn constant_payoff_delta_vanishes() {
        let p = builtin_problem("linear_scalar").unwrap();
        let pair = LevelPair::new(&p, 4, 2, 0.5, None).unwrap();
        let cp = simulate_coupled(&p, &pair, &pair.noise(&p, 0, 0)).unwrap();
        assert_eq!(coupled_payoff_delta(&cp, &Payoff::builtin("constant").unwrap()), 0.0);
        assert!(coupled_payoff_delta(&cp, &Payoff::builtin("identity").unwrap()) != 0.0);
    }
}

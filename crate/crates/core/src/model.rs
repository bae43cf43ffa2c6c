//! SDDE problem definitions.
//!
//! A problem is `dX = f(X(t), X(t-tau)) dt + eps * g(X(t), X(t-tau)) dW` on `[0, T]`
//! with initial segment `X(s) = xi(s)` for `s` in `[-tau, 0]`, together with
//! the regularity class its coefficients belong to. The regularity class
//! decides which step-size constraint applies and whether the drift is tamed.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// `(x, y, out)`: evaluates a coefficient at current state `x` and delayed state `y`.
///
/// Drifts write `a` values. Diffusions write an `a x d` matrix in row-major order.
pub type CoefficientFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// `(s, out)`: the initial segment at `s` in `[-tau, 0]`.
pub type SegmentFn = dyn Fn(f64, &mut [f64]) + Send + Sync;

/// Smallest Lipschitz-type constant stored for builtins. The assumptions need
/// constants strictly above one, and any larger constant remains valid.
const MIN_CONSTANT: f64 = 1.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularity {
    /// `|f(x,y) - f(x',y')| + |g(x,y) - g(x',y')| <= alpha (|x-x'| + |y-y'|)`.
    GlobalLipschitz { alpha: f64 },
    /// One-sided Lipschitz drift with polynomial growth of order `growth_r`
    /// and linear-growth diffusion. `moment_p` is the exponent the one-sided
    /// condition is stated for (defaults to 2).
    OneSidedLipschitz {
        alpha1: f64,
        alpha2: f64,
        alpha3: f64,
        growth_r: f64,
        moment_p: f64,
    },
}

impl Regularity {
    pub fn one_sided(alpha1: f64, alpha2: f64, alpha3: f64, growth_r: f64) -> Self {
        Regularity::OneSidedLipschitz {
            alpha1,
            alpha2,
            alpha3,
            growth_r,
            moment_p: 2.0,
        }
    }

    pub fn is_one_sided(&self) -> bool {
        matches!(self, Regularity::OneSidedLipschitz { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivedConstants {
    /// `beta = max{alpha, |f(0,0)|, |g(0,0)|}` and `alpha_bar = 1/2 + alpha^2`.
    Global { beta: f64, alpha_bar: f64 },
    OneSided {
        alpha1: f64,
        alpha2: f64,
        alpha3: f64,
        growth_r: f64,
    },
}

#[derive(Clone)]
pub struct SddeProblem {
    name: String,
    dim_state: usize,
    dim_noise: usize,
    drift: Arc<CoefficientFn>,
    diffusion: Arc<CoefficientFn>,
    delay: f64,
    horizon: f64,
    noise_scale: f64,
    initial_segment: Arc<SegmentFn>,
    regularity: Regularity,
}

impl fmt::Debug for SddeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SddeProblem")
            .field("name", &self.name)
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("delay", &self.delay)
            .field("horizon", &self.horizon)
            .field("noise_scale", &self.noise_scale)
            .field("regularity", &self.regularity)
            .finish_non_exhaustive()
    }
}

impl SddeProblem {
    /// New problem with `tau = T = 1`, `eps = 0.1` and the zero initial segment.
    pub fn new<F, G>(
        name: impl Into<String>,
        dim_state: usize,
        dim_noise: usize,
        drift: F,
        diffusion: G,
        regularity: Regularity,
    ) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        G: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        SddeProblem {
            name: name.into(),
            dim_state,
            dim_noise,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            delay: 1.0,
            horizon: 1.0,
            noise_scale: 0.1,
            initial_segment: Arc::new(|_, out: &mut [f64]| out.fill(0.0)),
            regularity,
        }
    }

    pub fn with_delay(mut self, delay: f64) -> Self {
        self.delay = delay;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_noise_scale(mut self, eps: f64) -> Self {
        self.noise_scale = eps;
        self
    }

    /// Constant initial segment `xi(s) = x0`.
    pub fn with_initial_value(mut self, x0: Vec<f64>) -> Self {
        self.initial_segment = Arc::new(move |_, out: &mut [f64]| out.copy_from_slice(&x0));
        self
    }

    pub fn with_initial_segment<S>(mut self, segment: S) -> Self
    where
        S: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        self.initial_segment = Arc::new(segment);
        self
    }

    pub fn with_regularity(mut self, regularity: Regularity) -> Self {
        self.regularity = regularity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_state == 0 || self.dim_noise == 0 {
            return Err(Error::config("state and noise dimensions must be positive"));
        }
        if !(self.delay > 0.0 && self.delay.is_finite()) {
            return Err(Error::config(format!("delay must be positive, got {}", self.delay)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        // eps = 0 (deterministic skeleton) and eps = 1 (unit noise) are the
        // limits used by the rate experiments, so the closed interval is accepted.
        if !(0.0..=1.0).contains(&self.noise_scale) {
            return Err(Error::config(format!(
                "noise scale must lie in [0, 1], got {}",
                self.noise_scale
            )));
        }
        match self.regularity {
            Regularity::GlobalLipschitz { alpha } if !(alpha > 1.0) => {
                Err(Error::config(format!("Lipschitz constant must exceed 1, got {alpha}")))
            }
            Regularity::OneSidedLipschitz {
                alpha1,
                alpha2,
                alpha3,
                growth_r,
                moment_p,
            } if !(alpha1 > 1.0 && alpha2 > 1.0 && alpha3 > 0.0 && growth_r >= 1.0 && moment_p >= 2.0) => {
                Err(Error::config(format!(
                    "one-sided constants out of range: alpha1={alpha1}, alpha2={alpha2}, alpha3={alpha3}, r={growth_r}, p={moment_p}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    pub fn regularity(&self) -> Regularity {
        self.regularity
    }

    #[inline]
    pub fn drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.drift)(x, y, out)
    }

    #[inline]
    pub fn diffusion(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, y, out)
    }

    #[inline]
    pub fn initial(&self, s: f64, out: &mut [f64]) {
        (self.initial_segment)(s, out)
    }

    pub fn initial_value(&self) -> Vec<f64> {
        let mut x0 = vec![0.0; self.dim_state];
        self.initial(0.0, &mut x0);
        x0
    }

    pub fn drift_at(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_state];
        self.drift(x, y, &mut out);
        out
    }

    pub fn diffusion_at(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_state * self.dim_noise];
        self.diffusion(x, y, &mut out);
        out
    }

    pub fn derived_constants(&self) -> DerivedConstants {
        match self.regularity {
            Regularity::GlobalLipschitz { alpha } => {
                let origin = vec![0.0; self.dim_state];
                let f0 = norm(&self.drift_at(&origin, &origin));
                let g0 = norm(&self.diffusion_at(&origin, &origin));
                DerivedConstants::Global {
                    beta: alpha.max(f0).max(g0),
                    alpha_bar: 0.5 + alpha * alpha,
                }
            }
            Regularity::OneSidedLipschitz {
                alpha1,
                alpha2,
                alpha3,
                growth_r,
                ..
            } => DerivedConstants::OneSided {
                alpha1,
                alpha2,
                alpha3,
                growth_r,
            },
        }
    }
}

/// Euclidean norm (Frobenius for matrices stored flat).
#[inline]
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Coefficient overrides for builtin problems, keyed by name.
pub type Coefficients = BTreeMap<String, f64>;

pub const BUILTIN_NAMES: [&str; 4] = [
    "linear_scalar",
    "additive_noise",
    "cubic_onesided",
    "zero_dynamics",
];

const COMMON_KEYS: [&str; 4] = ["tau", "T", "eps", "x0"];

fn builtin_keys(name: &str) -> &'static [&'static str] {
    match name {
        "linear_scalar" => &["a1", "a2", "b1", "b2"],
        "additive_noise" => &["a1", "a2", "sigma"],
        "cubic_onesided" => &["c", "sigma"],
        _ => &[],
    }
}

/// The documented default for each coefficient key of a builtin.
pub fn builtin_defaults(name: &str) -> Result<Coefficients> {
    let specific: &[(&str, f64)] = match name {
        "linear_scalar" => &[("a1", -1.0), ("a2", 0.5), ("b1", 0.1), ("b2", 0.1)],
        "additive_noise" => &[("a1", -1.0), ("a2", 0.5), ("sigma", 1.0)],
        "cubic_onesided" => &[("c", 0.5), ("sigma", 1.0)],
        "zero_dynamics" => &[],
        other => return Err(unknown_problem(other)),
    };
    let mut out: Coefficients = [("tau", 0.25), ("T", 1.0), ("eps", 0.1), ("x0", 1.0)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    for (k, v) in specific {
        out.insert(k.to_string(), *v);
    }
    Ok(out)
}

fn unknown_problem(name: &str) -> Error {
    Error::UnknownProblem {
        name: name.to_string(),
        available: BUILTIN_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

/// A builtin problem with its default coefficients.
pub fn builtin_problem(name: &str) -> Result<SddeProblem> {
    builtin_problem_with(name, &Coefficients::new())
}

/// A builtin problem with some coefficients overridden.
///
/// All builtins are scalar (`a = d = 1`):
///
/// * `linear_scalar`: `f = a1 x + a2 y`, `g = b1 x + b2 y`, global Lipschitz with
///   `alpha = max(|a1| + |b1|, |a2| + |b2|)`.
/// * `additive_noise`: `f = a1 x + a2 y`, `g = sigma`, global Lipschitz with
///   `alpha = max(|a1|, |a2|)`.
/// * `cubic_onesided`: `f = -x^3 + c y`, `g = sigma sqrt(1 + x^2)`, one-sided
///   Lipschitz with `alpha1 = c + sigma^2`, `alpha2 = max(3/2, c)`,
///   `alpha3 = sigma^2`, `r = 2`.
/// * `zero_dynamics`: `f = g = 0`.
///
/// Every builtin takes `tau`, `T`, `eps` and `x0` (constant initial segment).
pub fn builtin_problem_with(name: &str, overrides: &Coefficients) -> Result<SddeProblem> {
    let mut coef = builtin_defaults(name)?;
    let allowed = builtin_keys(name);
    for (key, value) in overrides {
        if !COMMON_KEYS.contains(&key.as_str()) && !allowed.contains(&key.as_str()) {
            let mut keys: Vec<&str> = COMMON_KEYS.to_vec();
            keys.extend_from_slice(allowed);
            return Err(Error::config(format!(
                "unknown coefficient `{key}` for problem `{name}`; accepted: {}",
                keys.join(", ")
            )));
        }
        if !value.is_finite() {
            return Err(Error::config(format!("coefficient `{key}` must be finite")));
        }
        coef.insert(key.clone(), *value);
    }
    let c = |k: &str| coef[k];

    let problem = match name {
        "linear_scalar" => {
            let (a1, a2, b1, b2) = (c("a1"), c("a2"), c("b1"), c("b2"));
            let alpha = (a1.abs() + b1.abs()).max(a2.abs() + b2.abs()).max(MIN_CONSTANT);
            SddeProblem::new(
                name,
                1,
                1,
                move |x, y, out| out[0] = a1 * x[0] + a2 * y[0],
                move |x, y, out| out[0] = b1 * x[0] + b2 * y[0],
                Regularity::GlobalLipschitz { alpha },
            )
        }
        "additive_noise" => {
            let (a1, a2, sigma) = (c("a1"), c("a2"), c("sigma"));
            let alpha = a1.abs().max(a2.abs()).max(MIN_CONSTANT);
            SddeProblem::new(
                name,
                1,
                1,
                move |x, y, out| out[0] = a1 * x[0] + a2 * y[0],
                move |_, _, out| out[0] = sigma,
                Regularity::GlobalLipschitz { alpha },
            )
        }
        "cubic_onesided" => {
            let (cy, sigma) = (c("c"), c("sigma"));
            let alpha1 = (cy.abs() + sigma * sigma).max(MIN_CONSTANT);
            let alpha2 = 1.5f64.max(cy.abs()).max(MIN_CONSTANT);
            let alpha3 = (sigma * sigma).max(f64::MIN_POSITIVE);
            SddeProblem::new(
                name,
                1,
                1,
                move |x, y, out| out[0] = -x[0] * x[0] * x[0] + cy * y[0],
                move |x, _, out| out[0] = sigma * (1.0 + x[0] * x[0]).sqrt(),
                Regularity::one_sided(alpha1, alpha2, alpha3, 2.0),
            )
        }
        "zero_dynamics" => SddeProblem::new(
            name,
            1,
            1,
            |_, _, out| out[0] = 0.0,
            |_, _, out| out[0] = 0.0,
            Regularity::GlobalLipschitz {
                alpha: MIN_CONSTANT,
            },
        ),
        other => return Err(unknown_problem(other)),
    };

    let problem = problem
        .with_delay(c("tau"))
        .with_horizon(c("T"))
        .with_noise_scale(c("eps"))
        .with_initial_value(vec![c("x0")]);
    problem.validate()?;
    Ok(problem)
}

/// A smooth test functional `Psi` with bounded first and second derivatives.
#[derive(Clone)]
pub struct Payoff {
    name: String,
    eval: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    derivative_bound: f64,
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Payoff")
            .field("name", &self.name)
            .field("derivative_bound", &self.derivative_bound)
            .finish_non_exhaustive()
    }
}

pub const PAYOFF_NAMES: [&str; 4] = ["identity", "sigmoid", "tanh", "constant"];

impl Payoff {
    pub fn new<F>(name: impl Into<String>, derivative_bound: f64, eval: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Payoff {
            name: name.into(),
            eval: Arc::new(eval),
            derivative_bound,
        }
    }

    /// Builtin payoffs act on the first state component.
    pub fn builtin(name: &str) -> Result<Payoff> {
        Ok(match name {
            "identity" => Payoff::new(name, 1.0, |x| x[0]),
            "sigmoid" => Payoff::new(name, 0.25, |x| 1.0 / (1.0 + (-x[0]).exp())),
            // sup |tanh''| = 4 / (3 sqrt 3) < 1
            "tanh" => Payoff::new(name, 1.0, |x| x[0].tanh()),
            "constant" => Payoff::new(name, 0.0, |_| 1.0),
            other => {
                return Err(Error::UnknownPayoff {
                    name: other.to_string(),
                    available: PAYOFF_NAMES.iter().map(|s| s.to_string()).collect(),
                })
            }
        })
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn derivative_bound(&self) -> f64 {
        self.derivative_bound
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear(a1: f64, a2: f64, b1: f64, b2: f64) -> SddeProblem {
        let coef: Coefficients = [("a1", a1), ("a2", a2), ("b1", b1), ("b2", b2)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        builtin_problem_with("linear_scalar", &coef).unwrap()
    }

    #[test]
    fn derived_constants_alpha_two() {
        let p = linear(-1.5, 0.5, 0.5, 0.1);
        match p.derived_constants() {
            DerivedConstants::Global { beta, alpha_bar } => {
                assert_eq!(beta, 2.0);
                assert_eq!(alpha_bar, 4.5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn derived_constants_beta_from_origin_values() {
        let p = SddeProblem::new(
            "affine",
            1,
            1,
            |x, _, out| out[0] = 3.0 - x[0],
            |_, _, out| out[0] = 0.5,
            Regularity::GlobalLipschitz { alpha: 1.5 },
        );
        match p.derived_constants() {
            DerivedConstants::Global { beta, alpha_bar } => {
                assert_eq!(beta, 3.0);
                assert_eq!(alpha_bar, 2.75);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn derived_constants_one_sided_passthrough() {
        let p = builtin_problem("cubic_onesided").unwrap();
        assert_eq!(
            p.derived_constants(),
            DerivedConstants::OneSided {
                alpha1: 1.5,
                alpha2: 1.5,
                alpha3: 1.0,
                growth_r: 2.0
            }
        );
    }

    #[test]
    fn zero_dynamics_is_zero() {
        let p = builtin_problem("zero_dynamics").unwrap();
        for &(x, y) in &[(0.0, 0.0), (3.0, -7.0), (-1e6, 2.5)] {
            assert_eq!(p.drift_at(&[x], &[y]), vec![0.0]);
            assert_eq!(p.diffusion_at(&[x], &[y]), vec![0.0]);
        }
    }

    #[test]
    fn linear_scalar_alpha_from_coefficients() {
        let p = linear(-1.0, 0.5, 0.1, 0.1);
        let alpha = match p.regularity() {
            Regularity::GlobalLipschitz { alpha } => alpha,
            _ => unreachable!(),
        };
        assert_relative_eq!(alpha, 1.1, max_relative = 1e-15);
    }

    #[test]
    fn unknown_names_are_reported() {
        let err = builtin_problem("nope").unwrap_err();
        let msg = err.to_string();
        for name in BUILTIN_NAMES {
            assert!(msg.contains(name), "{msg}");
        }
        let mut coef = Coefficients::new();
        coef.insert("zeta".into(), 1.0);
        assert!(matches!(
            builtin_problem_with("linear_scalar", &coef),
            Err(Error::Config(_))
        ));
        assert!(Payoff::builtin("cosine").is_err());
    }

    #[test]
    fn noise_scale_out_of_range_rejected() {
        let mut coef = Coefficients::new();
        coef.insert("eps".into(), 1.5);
        assert!(builtin_problem_with("linear_scalar", &coef).is_err());
    }

    fn sample_pair(rng: &mut ChaCha8Rng) -> [f64; 4] {
        [
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        ]
    }

    #[test]
    fn global_builtins_satisfy_lipschitz_and_growth_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for name in ["linear_scalar", "additive_noise", "zero_dynamics"] {
            let p = builtin_problem(name).unwrap();
            let alpha = match p.regularity() {
                Regularity::GlobalLipschitz { alpha } => alpha,
                _ => unreachable!(),
            };
            let beta = match p.derived_constants() {
                DerivedConstants::Global { beta, .. } => beta,
                _ => unreachable!(),
            };
            for _ in 0..100_000 {
                let [x, y, xb, yb] = sample_pair(&mut rng);
                let df = (p.drift_at(&[x], &[y])[0] - p.drift_at(&[xb], &[yb])[0]).abs();
                let dg = (p.diffusion_at(&[x], &[y])[0] - p.diffusion_at(&[xb], &[yb])[0]).abs();
                let rhs = alpha * ((x - xb).abs() + (y - yb).abs());
                assert!(df + dg <= rhs * (1.0 + 1e-12) + 1e-12, "{name}: {x} {y} {xb} {yb}");
                let growth = p.drift_at(&[x], &[y])[0].abs() + p.diffusion_at(&[x], &[y])[0].abs();
                assert!(growth <= beta * (1.0 + x.abs() + y.abs()) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn cubic_satisfies_one_sided_conditions() {
        let p = builtin_problem("cubic_onesided").unwrap();
        let (alpha1, alpha2, alpha3, r, moment_p) = match p.regularity() {
            Regularity::OneSidedLipschitz {
                alpha1,
                alpha2,
                alpha3,
                growth_r,
                moment_p,
            } => (alpha1, alpha2, alpha3, growth_r, moment_p),
            _ => unreachable!(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let [x, y, xb, yb] = sample_pair(&mut rng);
            let f = p.drift_at(&[x], &[y])[0];
            let fb = p.drift_at(&[xb], &[yb])[0];
            let g = p.diffusion_at(&[x], &[y])[0];
            let gb = p.diffusion_at(&[xb], &[yb])[0];
            let dist2 = (x - xb).powi(2) + (y - yb).powi(2);
            // worst case over eps in (0, 1) is eps -> 1
            let lhs = 2.0 * (x - xb) * (f - fb) + (moment_p - 1.0) * (g - gb).powi(2);
            assert!(lhs <= alpha1 * dist2 * (1.0 + 1e-12) + 1e-9, "{x} {y} {xb} {yb}");
            let poly = 1.0 + x.abs().powf(r) + xb.abs().powf(r) + y.abs().powf(r) + yb.abs().powf(r);
            let lip = alpha2 * poly * ((x - xb).abs() + (y - yb).abs());
            assert!((f - fb).abs() <= lip * (1.0 + 1e-12) + 1e-9);
            assert!(g * g <= alpha3 * (1.0 + x * x + y * y) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn payoffs_evaluate() {
        assert_eq!(Payoff::builtin("identity").unwrap().eval(&[2.5]), 2.5);
        assert_eq!(Payoff::builtin("constant").unwrap().eval(&[2.5]), 1.0);
        assert_relative_eq!(Payoff::builtin("sigmoid").unwrap().eval(&[0.0]), 0.5);
    }
}

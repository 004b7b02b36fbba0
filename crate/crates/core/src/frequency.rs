//! Frequency functionals along trajectories and the checks run against
//! them.
//!
//! Linear kinds use `I = Σ μ u²`, `D = −E_T(u, u)`; p kinds use
//! `I_p = Σ μ |u|^p`, `D_p = −Σ w c |∇u|^p`. In both cases `U = D / I`.
//!
//! Differential inequalities are checked in integrated form over each
//! step: the increment of the left side is compared with `dt` times the
//! less favourable endpoint value of the right side.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::check::CheckResult;
use crate::domain::{abs_pow, WeightedDomain};
use crate::error::{Error, Result};
use crate::flow::{EquationKind, EquationSpec, TimeGrid, Trajectory};
use crate::operators::{apply_operator, apply_p_operator, dirichlet_form, p_energy, validate_p};
use crate::timefn::TimeFunction;

pub const ANCHOR_INVARIANTS: &str = "frequency-nonpositivity";
pub const ANCHOR_MONOTONICITY: &str = "frequency-monotonicity";
pub const ANCHOR_LOG_DERIVATIVE: &str = "log-norm-derivative";
pub const ANCHOR_LOG_CONVEXITY: &str = "log-convexity";
pub const ANCHOR_GROWTH: &str = "growth-bound";
pub const ANCHOR_RIGIDITY: &str = "eigenfunction-rigidity";
pub const ANCHOR_PERTURBED: &str = "perturbed-frequency-inequality";
pub const ANCHOR_PERTURBED_GROWTH: &str = "perturbed-growth-bound";
pub const ANCHOR_PERTURBED_P: &str = "perturbed-p-frequency-inequality";
pub const ANCHOR_PERTURBED_P_LOG: &str = "perturbed-p-log-frequency";
pub const ANCHOR_PERTURBED_P_NORM: &str = "perturbed-p-log-norm";
pub const ANCHOR_PERTURBED_P_GROWTH: &str = "perturbed-p-growth-bound";
pub const ANCHOR_BACKWARD_UNIQUENESS: &str = "backward-uniqueness";

/// Relative slack granted to terminal growth bounds.
pub const GROWTH_SLACK: f64 = 1e-8;

/// `(I, D, U)` of a single field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Functionals {
    pub i: f64,
    pub d: f64,
    pub u: f64,
}

pub fn functionals_linear(domain: &WeightedDomain, u: &[f64]) -> Result<Functionals> {
    domain.check_field(u)?;
    let i = domain.inner(u, u);
    if !(i > 0.0) {
        return Err(Error::UndefinedFrequency);
    }
    let d = -dirichlet_form(domain, u, u)?;
    Ok(Functionals { i, d, u: d / i })
}

pub fn functionals_p(domain: &WeightedDomain, u: &[f64], p: f64) -> Result<Functionals> {
    validate_p(p)?;
    if p == 2.0 {
        return functionals_linear(domain, u);
    }
    domain.check_field(u)?;
    let i: f64 = domain.mu().iter().zip(u).map(|(m, x)| m * abs_pow(*x, p)).sum();
    if !(i > 0.0) {
        return Err(Error::UndefinedFrequency);
    }
    let d = -p_energy(domain, u, p)?;
    Ok(Functionals { i, d, u: d / i })
}

#[derive(Debug, Clone)]
pub struct FrequencySeries {
    pub grid: TimeGrid,
    pub times: Vec<f64>,
    pub i: Vec<f64>,
    pub d: Vec<f64>,
    pub u: Vec<f64>,
    pub p: f64,
    /// φ or η at each node (zero for perturbed kinds).
    pub coefficient: Vec<f64>,
    /// ψ at each node (zero for unperturbed kinds).
    pub psi: Vec<f64>,
    pub equation: EquationSpec,
}

impl FrequencySeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn a(&self) -> f64 {
        self.grid.a
    }

    pub fn b(&self) -> f64 {
        self.grid.b
    }

    pub fn is_perturbed(&self) -> bool {
        self.equation.is_perturbed()
    }

    /// Builds a series from raw samples, e.g. to exercise the checks on
    /// constructed data.
    pub fn from_samples(equation: EquationSpec, grid: TimeGrid, i: Vec<f64>, d: Vec<f64>) -> Result<Self> {
        let times = grid.times();
        if i.len() != times.len() || d.len() != times.len() {
            return Err(Error::Shape {
                expected: times.len(),
                got: i.len().min(d.len()),
            });
        }
        if let Some(k) = i.iter().position(|x| !(*x > 0.0)) {
            return Err(Error::UndefinedFrequency.at_step(k));
        }
        let u = i.iter().zip(&d).map(|(a, b)| b / a).collect();
        let coefficient_fn = equation.coefficient();
        let coefficient = times.iter().map(|&t| coefficient_fn.eval(t)).collect();
        let psi = match equation.psi() {
            Some(f) => times.iter().map(|&t| f.eval(t)).collect(),
            None => vec![0.0; times.len()],
        };
        Ok(FrequencySeries {
            grid,
            times,
            i,
            d,
            u,
            p: equation.p(),
            coefficient,
            psi,
            equation,
        })
    }

    /// Replaces the frequency values, keeping `I`; used by the self-test
    /// path to inject counterexamples.
    pub fn with_frequencies(mut self, u: Vec<f64>) -> Result<Self> {
        if u.len() != self.len() {
            return Err(Error::Shape {
                expected: self.len(),
                got: u.len(),
            });
        }
        self.d = u.iter().zip(&self.i).map(|(x, i)| x * i).collect();
        self.u = u;
        Ok(self)
    }

    /// CSV `t,I,D,U,phi_or_eta,psi`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,I,D,U,phi_or_eta,psi")?;
        for k in 0..self.len() {
            writeln!(
                out,
                "{:e},{:e},{:e},{:e},{:e},{:e}",
                self.times[k], self.i[k], self.d[k], self.u[k], self.coefficient[k], self.psi[k]
            )?;
        }
        Ok(())
    }

    fn require_len(&self, min: usize) -> Result<()> {
        if self.len() < min {
            return Err(Error::Input(format!(
                "series has {} samples, need at least {min}",
                self.len()
            )));
        }
        Ok(())
    }

    fn require_unperturbed(&self, what: &str) -> Result<()> {
        if self.is_perturbed() {
            return Err(Error::Precondition(format!("{what} applies to unperturbed runs only")));
        }
        Ok(())
    }

    fn integral_coefficient(&self) -> f64 {
        self.equation.coefficient().integral(self.a(), self.b())
    }
}

pub fn frequency_series(domain: &WeightedDomain, traj: &Trajectory) -> Result<FrequencySeries> {
    let p = traj.equation.p();
    let mut i = Vec::with_capacity(traj.states.len());
    let mut d = Vec::with_capacity(traj.states.len());
    for (k, state) in traj.states.iter().enumerate() {
        let f = functionals_p(domain, state, p).map_err(|e| e.at_step(k))?;
        i.push(f.i);
        d.push(f.d);
    }
    FrequencySeries::from_samples(traj.equation.clone(), traj.grid, i, d)
}

/// `I_k > 0`, `D_k ≤ 1e−14`, `U_k ≤ 1e−14` at every node.
pub fn check_invariants(series: &FrequencySeries) -> CheckResult {
    let violations = (0..series.len()).map(|k| {
        let positivity = if series.i[k] > 0.0 {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        };
        (k, series.d[k].max(series.u[k]).max(positivity))
    });
    CheckResult::from_violations("frequency_invariants", ANCHOR_INVARIANTS, violations, 1e-14)
}

/// `max_k (U_k − U_{k+1}) ≤ tol`.
pub fn check_monotonicity(series: &FrequencySeries, tol: f64) -> Result<CheckResult> {
    series.require_len(2)?;
    if !(tol >= 0.0) {
        return Err(Error::Parameter(format!("tolerance {tol} must be >= 0")));
    }
    Ok(CheckResult::from_violations(
        "monotonicity",
        ANCHOR_MONOTONICITY,
        series.u.windows(2).enumerate().map(|(k, w)| (k, w[0] - w[1])),
        tol,
    ))
}

/// Central-difference error of `(log I)' = c·coef + c·U` with `c = p`
/// at interior nodes, paired with its reference-bound scale.
fn log_derivative_errors(series: &FrequencySeries) -> (Vec<f64>, f64) {
    let dt = series.dt();
    let c = series.p;
    let rhs: Vec<f64> = (0..series.len())
        .map(|k| c * series.coefficient[k] + c * series.u[k])
        .collect();
    let errors = (1..series.len() - 1)
        .map(|k| {
            let cd = (series.i[k + 1].ln() - series.i[k - 1].ln()) / (2.0 * dt);
            (cd - rhs[k]).abs()
        })
        .collect();
    // (log I)''' = rhs'', estimated from second differences
    let third = (1..series.len() - 1)
        .map(|k| ((rhs[k + 1] - 2.0 * rhs[k] + rhs[k - 1]) / (dt * dt)).abs())
        .fold(0.0, f64::max);
    (errors, 1.0 + third)
}

/// Central differences of `log I` against `2φ + 2U` (`pη + pU_p` for p
/// kinds), with bound `tol_factor · dt² · (1 + max |(log I)'''|)`.
///
/// With a companion run on the halved step, also reports the ratio of
/// the largest errors at shared nodes, which must lie in `[3, 5]`.
pub fn check_log_derivative(
    series: &FrequencySeries,
    tol_factor: f64,
    companion: Option<&FrequencySeries>,
) -> Result<Vec<CheckResult>> {
    series.require_unperturbed("the log-derivative identity")?;
    series.require_len(3)?;
    let dt = series.dt();
    let (errors, scale) = log_derivative_errors(series);
    let tol = tol_factor * dt * dt * scale;
    let mut out = vec![CheckResult::from_violations(
        "log_derivative",
        ANCHOR_LOG_DERIVATIVE,
        errors.iter().enumerate().map(|(k, e)| (k + 1, *e)),
        tol,
    )];
    if let Some(fine) = companion {
        fine.require_unperturbed("the log-derivative identity")?;
        if fine.len() != 2 * series.len() - 1 || fine.a() != series.a() || fine.b() != series.b() {
            return Err(Error::Input(
                "companion series must use the halved step on the same interval".into(),
            ));
        }
        let (fine_errors, _) = log_derivative_errors(fine);
        // coarse interior node k sits at fine node 2k, i.e. fine_errors[2k − 1]
        let coarse_max = errors.iter().cloned().fold(0.0, f64::max);
        let fine_max = (1..series.len() - 1)
            .map(|k| fine_errors[2 * k - 1])
            .fold(0.0, f64::max);
        let ratio = coarse_max / fine_max;
        let violation = if ratio.is_nan() {
            f64::NAN
        } else {
            (3.0 - ratio).max(ratio - 5.0)
        };
        out.push(CheckResult::new(
            "log_derivative_ratio",
            ANCHOR_LOG_DERIVATIVE,
            violation,
            0.0,
            None,
        ));
    }
    Ok(out)
}

/// Log-derivative errors at interior nodes, exposed for order studies.
pub fn log_derivative_error(series: &FrequencySeries) -> Result<f64> {
    series.require_len(3)?;
    Ok(log_derivative_errors(series).0.into_iter().fold(0.0, f64::max))
}

/// Second differences of `log I` must be `≥ −tol`. Refuses to run when
/// φ (or η) is not nondecreasing on `[a, b]`.
pub fn check_log_convexity(series: &FrequencySeries, tol: f64) -> Result<CheckResult> {
    series.require_unperturbed("log-convexity")?;
    series.require_len(3)?;
    if !series.equation.coefficient().is_nondecreasing(series.a(), series.b()) {
        return Err(Error::Hypothesis(
            "log-convexity needs a nondecreasing zeroth-order coefficient".into(),
        ));
    }
    let g: Vec<f64> = series.i.iter().map(|x| x.ln()).collect();
    Ok(CheckResult::from_violations(
        "log_convexity",
        ANCHOR_LOG_CONVEXITY,
        (1..g.len() - 1).map(|k| (k, -(g[k + 1] - 2.0 * g[k] + g[k - 1]))),
        tol,
    ))
}

/// Terminal bound as `(log I(b), log bound)`.
fn growth_logs(series: &FrequencySeries) -> (f64, f64) {
    let c = series.p;
    let (i_a, i_b) = (series.i[0], series.i[series.len() - 1]);
    let log_bound = i_a.ln() + c * series.integral_coefficient() + c * series.u[0] * (series.b() - series.a());
    (i_b.ln(), log_bound)
}

/// `1 − I(b)/bound`, computed in log space.
fn relative_deficit(log_i: f64, log_bound: f64) -> f64 {
    if log_bound == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    -(log_i - log_bound).exp_m1()
}

/// `I(b) ≥ I(a) exp(c ∫ coef + c U(a)(b − a))` with `c = 2` (linear) or
/// `c = p`; the violation is the relative deficit `1 − I(b)/bound`.
pub fn check_growth_bound(series: &FrequencySeries) -> Result<CheckResult> {
    series.require_unperturbed("the growth bound")?;
    let (log_i, log_bound) = growth_logs(series);
    Ok(CheckResult::new(
        "growth_bound",
        ANCHOR_GROWTH,
        relative_deficit(log_i, log_bound),
        GROWTH_SLACK,
        Some(series.len() - 1),
    ))
}

/// Relative gap `I(b)/bound − 1` of the unperturbed growth bound.
pub fn growth_gap(series: &FrequencySeries) -> Result<f64> {
    series.require_unperturbed("the growth bound")?;
    let (log_i, log_bound) = growth_logs(series);
    Ok((log_i - log_bound).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidityTolerances {
    pub frequency: f64,
    pub field: f64,
    /// Relative eigen-residual admitted for the initial data.
    pub eigen_residual: f64,
}

impl RigidityTolerances {
    pub fn linear() -> Self {
        RigidityTolerances {
            frequency: 1e-9,
            field: 1e-8,
            eigen_residual: 1e-8,
        }
    }

    pub fn p() -> Self {
        RigidityTolerances {
            frequency: 1e-3,
            field: 1e-3,
            eigen_residual: 1e-6,
        }
    }
}

fn signed_pow(x: f64, q: f64) -> f64 {
    if q == 1.0 {
        x
    } else if x == 0.0 {
        0.0
    } else {
        x.abs().powf(q) * x.signum()
    }
}

/// Constant-frequency rigidity for eigenfunction initial data:
/// `U_k ≡ −λ` and `u|u|^{p−2}(t) = e^{(p−1)(−λ(t−a) + ∫_a^t coef)} u|u|^{p−2}(a)`.
pub fn check_rigidity(
    domain: &WeightedDomain,
    series: &FrequencySeries,
    traj: &Trajectory,
    lambda: f64,
    tol: RigidityTolerances,
) -> Result<Vec<CheckResult>> {
    series.require_unperturbed("rigidity")?;
    if traj.states.len() != series.len() {
        return Err(Error::Shape {
            expected: series.len(),
            got: traj.states.len(),
        });
    }
    let p = series.p;
    let u0 = traj.initial();
    let q = p - 1.0;
    let phi0: Vec<f64> = u0.iter().map(|x| signed_pow(*x, q)).collect();
    let residual = if p == 2.0 {
        let lu = apply_operator(domain, u0)?;
        let r: Vec<f64> = lu.iter().zip(u0).map(|(a, b)| a + lambda * b).collect();
        domain.norm(&r) / domain.norm(u0)
    } else {
        let lu = apply_p_operator(domain, u0, p, 0.0)?;
        let r: Vec<f64> = lu.iter().zip(&phi0).map(|(a, b)| a + lambda * b).collect();
        domain.norm(&r) / domain.norm(&phi0).max(f64::MIN_POSITIVE)
    };
    if !(residual <= tol.eigen_residual) {
        return Err(Error::Precondition(format!(
            "initial data is not an eigenfunction: relative residual {residual:e} > {:e}",
            tol.eigen_residual
        )));
    }
    let coef = series.equation.coefficient();
    let scale = phi0.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let frequency = CheckResult::from_violations(
        "rigidity_frequency",
        ANCHOR_RIGIDITY,
        series.u.iter().enumerate().map(|(k, x)| (k, (x + lambda).abs())),
        tol.frequency,
    );
    let field = CheckResult::from_violations(
        "rigidity_field",
        ANCHOR_RIGIDITY,
        traj.states.iter().zip(&traj.times).enumerate().map(|(k, (u, &t))| {
            let factor = (q * (-lambda * (t - series.a()) + coef.integral(series.a(), t))).exp();
            let worst = u
                .iter()
                .zip(&phi0)
                .map(|(x, w)| (signed_pow(*x, q) - factor * w).abs())
                .fold(0.0, f64::max);
            (k, worst / scale)
        }),
        tol.field,
    );
    Ok(vec![frequency, field])
}

/// Tolerance `c · dt + floor` for the discrete perturbed inequalities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTolerance {
    pub c: f64,
    pub floor: f64,
}

impl Default for StepTolerance {
    fn default() -> Self {
        StepTolerance { c: 10.0, floor: 1e-8 }
    }
}

impl StepTolerance {
    pub fn at(&self, dt: f64) -> f64 {
        self.c * dt + self.floor
    }
}

fn psi_of(series: &FrequencySeries) -> TimeFunction {
    series.equation.psi().cloned().unwrap_or_else(TimeFunction::zero)
}

/// Per-step violation of `Δ_k lhs ≥ dt · min(rhs_k, rhs_{k+1})`, divided
/// by `dt`.
fn lower_step_violations<'a>(lhs: &'a [f64], rhs: &'a [f64], dt: f64) -> impl Iterator<Item = (usize, f64)> + 'a {
    (0..lhs.len() - 1).map(move |k| (k, rhs[k].min(rhs[k + 1]) - (lhs[k + 1] - lhs[k]) / dt))
}

fn guard_frequency(series: &FrequencySeries) -> Result<()> {
    if let Some(k) = series.u.iter().position(|u| !(1.0 - u >= 1.0 - 1e-14)) {
        return Err(Error::Hypothesis(format!("U_{k} = {} > 0 breaks 1 − U ≥ 1", series.u[k])).at_step(k));
    }
    Ok(())
}

/// Linear perturbed inequality `U' ≥ ψ²(U − 1)` at every step plus the
/// terminal bound
/// `I(b) ≥ I(a) exp{(b−a)[(2 + sup ψ) e^{∫ψ²}(U(a) − 1) + 2 − sup ψ]}`.
pub fn check_perturbed_linear(series: &FrequencySeries, tol: StepTolerance) -> Result<Vec<CheckResult>> {
    if !series.equation.is_linear() {
        return Err(Error::Precondition("linear perturbed checks need a linear run".into()));
    }
    series.require_len(2)?;
    guard_frequency(series)?;
    let rhs: Vec<f64> = series
        .u
        .iter()
        .zip(&series.psi)
        .map(|(u, s)| s * s * (u - 1.0))
        .collect();
    let differential = CheckResult::from_violations(
        "perturbed_linear",
        ANCHOR_PERTURBED,
        lower_step_violations(&series.u, &rhs, series.dt()),
        tol.at(series.dt()),
    );
    let growth = CheckResult::new(
        "perturbed_linear_growth",
        ANCHOR_PERTURBED_GROWTH,
        relative_deficit(series.i[series.len() - 1].ln(), perturbed_linear_log_bound(series)),
        GROWTH_SLACK,
        Some(series.len() - 1),
    );
    Ok(vec![differential, growth])
}

fn perturbed_linear_log_bound(series: &FrequencySeries) -> f64 {
    let psi = psi_of(series);
    let (a, b) = (series.a(), series.b());
    let sup = psi.sup(a, b);
    let e = psi.integral_sq(a, b).exp();
    series.i[0].ln() + (b - a) * ((2.0 + sup) * e * (series.u[0] - 1.0) + 2.0 - sup)
}

/// `Λ = (U_p(a) − 1) exp{(2 + sup ψ)(p/2) ∫ψ²} + 1 − 3 sup ψ`.
pub fn perturbed_p_lambda(series: &FrequencySeries) -> f64 {
    let psi = psi_of(series);
    let (a, b) = (series.a(), series.b());
    let sup = psi.sup(a, b);
    let p = series.p;
    (series.u[0] - 1.0) * ((2.0 + sup) * 0.5 * p * psi.integral_sq(a, b)).exp() + 1.0 - 3.0 * sup
}

fn perturbed_p_log_bound(series: &FrequencySeries) -> f64 {
    series.i[0].ln() + 0.5 * series.p * (series.b() - series.a()) * perturbed_p_lambda(series)
}

/// The three p-perturbed differential inequalities and the terminal
/// bound `I_p(b) ≥ I_p(a) exp{p(b − a)Λ / 2}`, each reported separately:
///
/// * `U_p' ≥ (p/2) ψ² (U_p − 1)`
/// * `(2/p) [log(1 − U_p)]' ≤ ψ²`
/// * `[log I_p]' ≥ p(1 + ψ/2) U_p − (3p/2) ψ`
pub fn check_perturbed_p(series: &FrequencySeries, tol: StepTolerance) -> Result<Vec<CheckResult>> {
    if series.equation.is_linear() {
        return Err(Error::Precondition("p perturbed checks need a p run".into()));
    }
    series.require_len(2)?;
    guard_frequency(series)?;
    let p = series.p;
    let dt = series.dt();
    let t = tol.at(dt);

    let rhs: Vec<f64> = series
        .u
        .iter()
        .zip(&series.psi)
        .map(|(u, s)| 0.5 * p * s * s * (u - 1.0))
        .collect();
    let frequency = CheckResult::from_violations(
        "perturbed_p_frequency",
        ANCHOR_PERTURBED_P,
        lower_step_violations(&series.u, &rhs, dt),
        t,
    );

    let log_gap: Vec<f64> = series.u.iter().map(|u| (2.0 / p) * (1.0 - u).ln()).collect();
    let log_frequency = CheckResult::from_violations(
        "perturbed_p_log_frequency",
        ANCHOR_PERTURBED_P_LOG,
        (0..series.len() - 1).map(|k| {
            let bound = series.psi[k].powi(2).max(series.psi[k + 1].powi(2));
            (k, (log_gap[k + 1] - log_gap[k]) / dt - bound)
        }),
        t,
    );

    let log_i: Vec<f64> = series.i.iter().map(|x| x.ln()).collect();
    let rhs: Vec<f64> = series
        .u
        .iter()
        .zip(&series.psi)
        .map(|(u, s)| p * (1.0 + 0.5 * s) * u - 1.5 * p * s)
        .collect();
    let log_norm = CheckResult::from_violations(
        "perturbed_p_log_norm",
        ANCHOR_PERTURBED_P_NORM,
        lower_step_violations(&log_i, &rhs, dt),
        t,
    );

    let growth = CheckResult::new(
        "perturbed_p_growth",
        ANCHOR_PERTURBED_P_GROWTH,
        relative_deficit(log_i[log_i.len() - 1], perturbed_p_log_bound(series)),
        GROWTH_SLACK,
        Some(series.len() - 1),
    );
    Ok(vec![frequency, log_frequency, log_norm, growth])
}

/// Lower bound on `I(b)` from the growth estimate matching the equation
/// kind, as `(log I(b), log bound)`.
pub fn terminal_bound(series: &FrequencySeries) -> (f64, f64) {
    let log_i = series.i[series.len() - 1].ln();
    let log_bound = match series.equation.kind {
        EquationKind::Linear { .. } | EquationKind::PHeat { .. } => growth_logs(series).1,
        EquationKind::LinearPerturbed { .. } => perturbed_linear_log_bound(series),
        EquationKind::PPerturbed { .. } => perturbed_p_log_bound(series),
    };
    (log_i, log_bound)
}

/// Contrapositive backward uniqueness: `I(b)` is at least a strictly
/// positive bound, so the terminal state cannot vanish.
pub fn check_backward_uniqueness(series: &FrequencySeries) -> CheckResult {
    let (log_i, log_bound) = terminal_bound(series);
    let bound_positive = log_bound.exp() > 0.0;
    let violation = if bound_positive {
        relative_deficit(log_i, log_bound)
    } else {
        f64::INFINITY
    };
    CheckResult::new(
        "backward_uniqueness",
        ANCHOR_BACKWARD_UNIQUENESS,
        violation,
        GROWTH_SLACK,
        Some(series.len() - 1),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, DomainSpec, Edge, MeasureSpec};
    use crate::flow::{run_flow, Integrator, RunOptions};
    use crate::spectrum::{p_eigenpair, PEigenOptions};
    use rand::Rng;

    fn c4() -> WeightedDomain {
        build_domain(&DomainSpec::Cycle {
            n: 4,
            weight: 1.0,
            conductance: 1.0,
            measure: MeasureSpec::Unit,
        })
        .unwrap()
    }

    fn two_vertex() -> WeightedDomain {
        WeightedDomain::new(vec![1.0, 1.0], vec![Edge::new(0, 1, 1.0, 1.0)], "pair").unwrap()
    }

    fn graph(n: usize, seed: u64) -> WeightedDomain {
        build_domain(&DomainSpec::RandomGraph {
            n,
            edge_probability: None,
            target_degree: Some(4.0),
            seed,
            weight_range: (0.5, 1.5),
            conductance_range: (0.5, 1.5),
            measure: MeasureSpec::Unit,
        })
        .unwrap()
    }

    fn positive_field(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::seed::rng_from(seed, &[]);
        (0..n).map(|_| 1.0 + 0.5 * rng.random_range(-1.0..=1.0)).collect()
    }

    fn linear_series(
        d: &WeightedDomain,
        u0: &[f64],
        phi: TimeFunction,
        grid: TimeGrid,
    ) -> (Trajectory, FrequencySeries) {
        let traj = run_flow(d, &EquationSpec::linear(phi), u0, grid, &RunOptions::default()).unwrap();
        let series = frequency_series(d, &traj).unwrap();
        (traj, series)
    }

    const EIGENMODE: [f64; 4] = [1.0, 0.0, -1.0, 0.0];
    const MIXED: [f64; 4] = [2.0, -1.0, 0.0, -1.0];

    fn unit_grid(k: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, k).unwrap()
    }

    #[test]
    fn linear_functional_examples() {
        let f = functionals_linear(&c4(), &EIGENMODE).unwrap();
        assert_eq!((f.i, f.d, f.u), (2.0, -4.0, -2.0));
        let f = functionals_linear(&c4(), &[1.5; 4]).unwrap();
        assert_eq!((f.i, f.d, f.u), (9.0, 0.0, 0.0));
        let u: Vec<f64> = MIXED.iter().map(|x| 3.0 * x).collect();
        let (a, b) = (
            functionals_linear(&c4(), &MIXED).unwrap(),
            functionals_linear(&c4(), &u).unwrap(),
        );
        assert_eq!((b.i, b.d), (9.0 * a.i, 9.0 * a.d));
        assert!((a.u - b.u).abs() < 1e-15);
        assert!(matches!(
            functionals_linear(&c4(), &[0.0; 4]),
            Err(Error::UndefinedFrequency)
        ));
    }

    #[test]
    fn p_functional_examples() {
        let f = functionals_p(&two_vertex(), &[1.0, -1.0], 3.0).unwrap();
        assert_eq!((f.i, f.d, f.u), (2.0, -8.0, -4.0));
        let d = graph(12, 1);
        let u = positive_field(12, 2);
        assert_eq!(functionals_p(&d, &u, 2.0).unwrap(), functionals_linear(&d, &u).unwrap());
        assert_eq!(functionals_p(&d, &[2.0; 12], 1.5).unwrap().u, 0.0);
        assert!(matches!(
            functionals_p(&d, &[0.0; 12], 3.0),
            Err(Error::UndefinedFrequency)
        ));
    }

    #[test]
    fn series_examples() {
        let (_, s) = linear_series(&c4(), &EIGENMODE, TimeFunction::zero(), unit_grid(100));
        assert!(s.u.iter().all(|u| (u + 2.0).abs() <= 1e-12));
        let (_, s) = linear_series(&c4(), &MIXED, TimeFunction::zero(), unit_grid(100));
        assert!((s.u[0] + 10.0 / 3.0).abs() < 1e-12);
        for (t, u) in s.times.iter().zip(&s.u) {
            let (a, b) = ((-4.0 * t).exp(), (-8.0 * t).exp());
            let exact = -(4.0 * a + 16.0 * b) / (2.0 * a + 4.0 * b);
            assert!((u - exact).abs() < 1e-12);
        }
        let (_, s) = linear_series(&c4(), &[0.7; 4], TimeFunction::zero(), unit_grid(10));
        assert!(s.u.iter().all(|u| u.abs() <= 1e-14));
        assert!(check_invariants(&s).pass);
    }

    #[test]
    fn monotonicity_examples() {
        let (_, s) = linear_series(&c4(), &MIXED, TimeFunction::zero(), unit_grid(100));
        assert!(check_monotonicity(&s, 1e-10).unwrap().pass);
        let s = FrequencySeries::from_samples(
            EquationSpec::linear(TimeFunction::zero()),
            unit_grid(3),
            vec![2.0; 4],
            vec![-1.0; 4],
        )
        .unwrap();
        let r = check_monotonicity(&s, 0.0).unwrap();
        assert!(r.pass && r.worst_violation <= 0.0);
        let fake = FrequencySeries::from_samples(
            EquationSpec::linear(TimeFunction::zero()),
            unit_grid(1),
            vec![1.0, 1.0],
            vec![0.0, -0.1],
        )
        .unwrap();
        let r = check_monotonicity(&fake, 1e-10).unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst_violation, 0.1);
        assert_eq!(r.location, Some(0));
    }

    #[test]
    fn log_derivative_examples() {
        let (_, s) = linear_series(&c4(), &EIGENMODE, TimeFunction::zero(), unit_grid(1000));
        assert!(log_derivative_error(&s).unwrap() <= 1e-12);
        let (_, s) = linear_series(&c4(), &[0.5; 4], TimeFunction::constant(0.8), unit_grid(1000));
        assert!(log_derivative_error(&s).unwrap() <= 1e-12);
        let (_, coarse) = linear_series(&c4(), &MIXED, TimeFunction::zero(), unit_grid(1000));
        let (_, fine) = linear_series(&c4(), &MIXED, TimeFunction::zero(), unit_grid(2000));
        let r = check_log_derivative(&coarse, 1.0, Some(&fine)).unwrap();
        assert!(r.iter().all(|c| c.pass), "{r:?}");
        let ratio = log_derivative_error(&coarse).unwrap() / log_derivative_error(&fine).unwrap();
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
        let (_, wrong) = linear_series(&c4(), &MIXED, TimeFunction::zero(), unit_grid(1500));
        assert!(matches!(
            check_log_derivative(&coarse, 1.0, Some(&wrong)),
            Err(Error::Input(_))
        ));
        let tight = check_log_derivative(&coarse, 0.0, None).unwrap();
        assert!(!tight[0].pass);
    }

    #[test]
    fn log_convexity_examples() {
        for (u0, phi) in [
            (EIGENMODE, TimeFunction::zero()),
            (MIXED, TimeFunction::zero()),
            (
                MIXED,
                TimeFunction::Linear {
                    slope: 1.0,
                    intercept: 0.0,
                },
            ),
        ] {
            let (_, s) = linear_series(&c4(), &u0, phi, unit_grid(200));
            assert!(check_log_convexity(&s, 1e-8).unwrap().pass);
        }
        let wavy = TimeFunction::Sinusoid {
            amplitude: 1.0,
            omega: 6.0,
            phase: 0.0,
            offset: 0.0,
        };
        let (_, s) = linear_series(&c4(), &MIXED, wavy, unit_grid(50));
        assert!(matches!(check_log_convexity(&s, 1e-8), Err(Error::Hypothesis(_))));
    }

    #[test]
    fn growth_bound_examples() {
        let (_, s) = linear_series(&c4(), &EIGENMODE, TimeFunction::zero(), unit_grid(100));
        assert!(check_growth_bound(&s).unwrap().pass);
        assert!(growth_gap(&s).unwrap().abs() <= 1e-8);
        assert!((s.i[100] - 2.0 * (-4.0f64).exp()).abs() < 1e-14);
        let (_, s) = linear_series(&c4(), &[0.3; 4], TimeFunction::zero(), unit_grid(10));
        assert!(growth_gap(&s).unwrap().abs() <= 1e-12);
        let (_, s) = linear_series(&c4(), &MIXED, TimeFunction::constant(0.4), unit_grid(100));
        assert!(check_growth_bound(&s).unwrap().pass);
        assert!(growth_gap(&s).unwrap() > 1e-3);
    }

    #[test]
    fn linear_rigidity_examples() {
        let (traj, s) = linear_series(&c4(), &EIGENMODE, TimeFunction::zero(), unit_grid(100));
        let r = check_rigidity(&c4(), &s, &traj, 2.0, RigidityTolerances::linear()).unwrap();
        assert!(r.iter().all(|c| c.pass), "{r:?}");
        let (traj, s) = linear_series(&c4(), &[2.0; 4], TimeFunction::constant(0.5), unit_grid(100));
        let r = check_rigidity(&c4(), &s, &traj, 0.0, RigidityTolerances::linear()).unwrap();
        assert!(r.iter().all(|c| c.pass), "{r:?}");
        let (traj, s) = linear_series(&c4(), &MIXED, TimeFunction::zero(), unit_grid(10));
        let err = check_rigidity(&c4(), &s, &traj, 2.0, RigidityTolerances::linear()).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn p_rigidity_on_two_vertices() {
        let d = two_vertex();
        let pair = p_eigenpair(&d, 3.0, &PEigenOptions::default()).unwrap();
        let traj = run_flow(
            &d,
            &EquationSpec::p_heat(3.0, TimeFunction::zero()),
            &pair.w,
            unit_grid(1000),
            &RunOptions::with_integrator(Integrator::Extrapolated),
        )
        .unwrap();
        let s = frequency_series(&d, &traj).unwrap();
        let r = check_rigidity(&d, &s, &traj, pair.lambda, RigidityTolerances::p()).unwrap();
        assert!(r.iter().all(|c| c.pass), "{r:?}");
    }

    #[test]
    fn perturbed_linear_examples() {
        let (_, s) = linear_series(&c4(), &MIXED, TimeFunction::zero(), unit_grid(100));
        let r = check_perturbed_linear(&s, StepTolerance::default()).unwrap();
        assert!(r.iter().all(|c| c.pass));
        let traj = run_flow(
            &c4(),
            &EquationSpec::linear_perturbed(TimeFunction::constant(0.1), 5),
            &MIXED,
            unit_grid(200),
            &RunOptions::default(),
        )
        .unwrap();
        let s = frequency_series(&c4(), &traj).unwrap();
        let r = check_perturbed_linear(&s, StepTolerance::default()).unwrap();
        assert!(r.iter().all(|c| c.pass), "{r:?}");
        // U drops by one unit per unit time while ψ = 0
        let fake = FrequencySeries::from_samples(
            EquationSpec::linear_perturbed(TimeFunction::zero(), 0),
            unit_grid(100),
            vec![1.0; 101],
            (0..=100).map(|k| -1.0 - 0.01 * k as f64).collect(),
        )
        .unwrap();
        let r = check_perturbed_linear(&fake, StepTolerance::default()).unwrap();
        assert!(!r[0].pass);
        assert!((r[0].worst_violation - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perturbed_p_examples() {
        let d = graph(20, 3);
        let u0 = positive_field(20, 4);
        for (p, psi) in [(3.0, 0.0), (1.5, 0.2)] {
            let traj = run_flow(
                &d,
                &EquationSpec::p_perturbed(p, TimeFunction::constant(psi), 8),
                &u0,
                TimeGrid::new(0.0, 0.5, 100).unwrap(),
                &RunOptions::default(),
            )
            .unwrap();
            let s = frequency_series(&d, &traj).unwrap();
            let r = check_perturbed_p(&s, StepTolerance::default()).unwrap();
            assert_eq!(r.len(), 4);
            assert!(r.iter().all(|c| c.pass), "p={p}: {r:?}");
            assert!(check_backward_uniqueness(&s).pass);
        }
        // log I_p flat while U_p = −1 and ψ = 0: right side −p, left side 0 is fine;
        // log I_p dropping at rate p + 1 undershoots by one unit
        let grid = unit_grid(100);
        let i: Vec<f64> = grid.times().iter().map(|t| (-4.0 * t).exp()).collect();
        let d_vals: Vec<f64> = i.iter().map(|x| -x).collect();
        let fake =
            FrequencySeries::from_samples(EquationSpec::p_perturbed(3.0, TimeFunction::zero(), 0), grid, i, d_vals)
                .unwrap();
        let r = check_perturbed_p(&fake, StepTolerance::default()).unwrap();
        let norm = r.iter().find(|c| c.name == "perturbed_p_log_norm").unwrap();
        assert!(!norm.pass);
        assert!((norm.worst_violation - 1.0).abs() < 1e-12);
    }

    // Known defect of the stated terminal bound: with ψ = 0 it demands
    // log I_p(b) − log I_p(a) ≥ (p/2)(b−a)U_p(a), yet an eigen-like run with
    // constant U_p < 0 decays at rate p·U_p and satisfies every differential
    // inequality. Kept as an oracle so a silent change to the bound shows up.
    #[test]
    fn terminal_p_bound_fails_on_constant_frequency() {
        let p = 3.0;
        let grid = unit_grid(100);
        let i: Vec<f64> = grid.times().iter().map(|t| (-p * t).exp()).collect();
        let d_vals: Vec<f64> = i.iter().map(|x| -x).collect();
        let s = FrequencySeries::from_samples(EquationSpec::p_perturbed(p, TimeFunction::zero(), 0), grid, i, d_vals)
            .unwrap();
        let r = check_perturbed_p(&s, StepTolerance::default()).unwrap();
        for c in &r[..3] {
            assert!(c.pass, "{c:?}");
        }
        assert_eq!(r[3].name, "perturbed_p_growth");
        assert!(!r[3].pass);
        let (log_i, log_bound) = terminal_bound(&s);
        assert!((log_i + 3.0).abs() < 1e-12);
        assert!((log_bound + 1.5).abs() < 1e-12);
        assert!(!check_backward_uniqueness(&s).pass);
    }

    #[test]
    fn backward_uniqueness_examples() {
        let (_, s) = linear_series(&c4(), &EIGENMODE, TimeFunction::zero(), unit_grid(100));
        assert!(check_backward_uniqueness(&s).pass);
        let (_, s) = linear_series(&c4(), &[0.4; 4], TimeFunction::zero(), unit_grid(10));
        let r = check_backward_uniqueness(&s);
        assert!(r.pass && r.worst_violation.abs() < 1e-12);
    }

    #[test]
    fn csv_header_and_rows() {
        let (_, s) = linear_series(&c4(), &EIGENMODE, TimeFunction::zero(), unit_grid(4));
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,I,D,U,phi_or_eta,psi\n"));
        assert_eq!(text.lines().count(), 6);
    }
}

//! Time integration of the linear heat-type flow `u_t = L u + φ(t) u`,
//! the p-heat-type flow `|u|^{p−2} u_t = Δ_{f,p} u + η(t) |u|^{p−2} u`,
//! and their perturbed variants whose defect is bounded pointwise by
//! `ψ(t)` times an envelope built from `u` and its gradient.
//!
//! Time-dependent coefficients are sampled at the left endpoint of each
//! step.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{vertex_energy_density, WeightedDomain};
use crate::error::{Error, Result};
use crate::operators::{p_flux, p_flux_derivative, validate_p};
use crate::seed;
use crate::spectrum::{eigendecompose_with_cap, EigenCount, Spectrum, DEFAULT_DENSE_CAP};
use crate::timefn::TimeFunction;

/// Trajectories abort when `I(t)` drops below this.
pub const UNDERFLOW_GUARD: f64 = 1e-280;

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EquationKind {
    Linear {
        phi: TimeFunction,
    },
    PHeat {
        p: f64,
        eta: TimeFunction,
    },
    LinearPerturbed {
        psi: TimeFunction,
        perturbation_seed: u64,
    },
    PPerturbed {
        p: f64,
        psi: TimeFunction,
        perturbation_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationSpec {
    pub kind: EquationKind,
    pub eps: f64,
}

impl EquationSpec {
    pub fn linear(phi: TimeFunction) -> Self {
        EquationSpec {
            kind: EquationKind::Linear { phi },
            eps: DEFAULT_EPS,
        }
    }

    pub fn p_heat(p: f64, eta: TimeFunction) -> Self {
        EquationSpec {
            kind: EquationKind::PHeat { p, eta },
            eps: DEFAULT_EPS,
        }
    }

    pub fn linear_perturbed(psi: TimeFunction, perturbation_seed: u64) -> Self {
        EquationSpec {
            kind: EquationKind::LinearPerturbed { psi, perturbation_seed },
            eps: DEFAULT_EPS,
        }
    }

    pub fn p_perturbed(p: f64, psi: TimeFunction, perturbation_seed: u64) -> Self {
        EquationSpec {
            kind: EquationKind::PPerturbed {
                p,
                psi,
                perturbation_seed,
            },
            eps: DEFAULT_EPS,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// Exponent of the frequency functionals (2 for the linear kinds).
    pub fn p(&self) -> f64 {
        match &self.kind {
            EquationKind::Linear { .. } | EquationKind::LinearPerturbed { .. } => 2.0,
            EquationKind::PHeat { p, .. } | EquationKind::PPerturbed { p, .. } => *p,
        }
    }

    /// The zeroth-order coefficient φ or η; zero for the perturbed kinds.
    pub fn coefficient(&self) -> TimeFunction {
        match &self.kind {
            EquationKind::Linear { phi } => phi.clone(),
            EquationKind::PHeat { eta, .. } => eta.clone(),
            _ => TimeFunction::zero(),
        }
    }

    pub fn psi(&self) -> Option<&TimeFunction> {
        match &self.kind {
            EquationKind::LinearPerturbed { psi, .. } | EquationKind::PPerturbed { psi, .. } => Some(psi),
            _ => None,
        }
    }

    pub fn is_perturbed(&self) -> bool {
        self.psi().is_some()
    }

    pub fn is_linear(&self) -> bool {
        matches!(
            self.kind,
            EquationKind::Linear { .. } | EquationKind::LinearPerturbed { .. }
        )
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Parameter(format!("eps = {} must be finite and >= 0", self.eps)));
        }
        match &self.kind {
            EquationKind::Linear { phi } => phi.validate(),
            EquationKind::PHeat { p, eta } => {
                validate_p(*p)?;
                self.require_eps(*p)?;
                eta.validate()
            }
            EquationKind::LinearPerturbed { psi, .. } => validate_psi(psi, grid),
            EquationKind::PPerturbed { p, psi, .. } => {
                validate_p(*p)?;
                self.require_eps(*p)?;
                validate_psi(psi, grid)
            }
        }
    }

    fn require_eps(&self, p: f64) -> Result<()> {
        if p != 2.0 && self.eps <= 0.0 {
            return Err(Error::Parameter(format!("p = {p} != 2 requires eps > 0")));
        }
        Ok(())
    }
}

fn validate_psi(psi: &TimeFunction, grid: &TimeGrid) -> Result<()> {
    psi.validate()?;
    let low = psi.inf(grid.a, grid.b);
    if low < 0.0 {
        return Err(Error::Parameter(format!(
            "psi must be nonnegative on [a, b], minimum is {low}"
        )));
    }
    Ok(())
}

/// Uniform grid `a = t_0 < … < t_K = b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub a: f64,
    pub b: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(a: f64, b: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("time grid needs K >= 1".into()));
        }
        if !(b > a && a.is_finite() && b.is_finite()) {
            return Err(Error::Parameter(format!("time interval [{a}, {b}] must satisfy b > a")));
        }
        Ok(TimeGrid { a, b, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.b - self.a) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.b
        } else {
            self.a + (self.b - self.a) * (k as f64 / self.steps as f64)
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Same interval with `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        TimeGrid {
            steps: self.steps * factor,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Exact propagation through the dense eigenbasis.
    Spectral,
    /// Backward Euler with one SPD solve per step.
    ImplicitEuler,
    /// Backward Euler on the nonlinear system via damped Newton.
    NewtonImplicit,
    /// Two-level Richardson extrapolation of backward Euler (second order).
    Extrapolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Bound on the relative μ-norm of the scaled residual.
    pub newton_tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
    pub fixed_point_iters: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            newton_tol: 1e-12,
            max_iters: 50,
            max_halvings: 30,
            fixed_point_iters: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// `None` picks the default integrator for the equation kind.
    pub integrator: Option<Integrator>,
    pub newton: NewtonOptions,
    pub dense_cap: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            integrator: None,
            newton: NewtonOptions::default(),
            dense_cap: DEFAULT_DENSE_CAP,
        }
    }
}

impl RunOptions {
    pub fn with_integrator(integrator: Integrator) -> Self {
        RunOptions {
            integrator: Some(integrator),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub equation: EquationSpec,
    pub integrator: Integrator,
    /// Solver residual of each step (zero for spectral propagation).
    pub step_residuals: Vec<f64>,
    /// `ρ_k` applied over step `k` (perturbed kinds only).
    pub perturbations: Vec<Vec<f64>>,
    /// Envelope of `ρ_k`, i.e. `|ρ_k| ≤ ψ(t_k) · envelope_k`.
    pub envelopes: Vec<Vec<f64>>,
    pub psi_samples: Vec<f64>,
}

impl Trajectory {
    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn last(&self) -> &[f64] {
        &self.states[self.states.len() - 1]
    }

    /// Largest excess of `|ρ_{k,i}|` over `ψ(t_k) · envelope_{k,i}`.
    pub fn perturbation_bound_excess(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for ((rho, env), psi) in self.perturbations.iter().zip(&self.envelopes).zip(&self.psi_samples) {
            for (r, e) in rho.iter().zip(env) {
                worst = worst.max(r.abs() - psi * e);
            }
        }
        worst
    }

    pub fn max_step_residual(&self) -> f64 {
        self.step_residuals.iter().cloned().fold(0.0, f64::max)
    }

    /// CSV `t,vertex_0,…,vertex_{n−1}`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.states[0].len();
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("vertex_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (t, u) in self.times.iter().zip(&self.states) {
            let mut row = vec![format!("{t:e}")];
            row.extend(u.iter().map(|x| format!("{x:e}")));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn metadata(&self) -> TrajectoryMetadata {
        TrajectoryMetadata {
            equation: self.equation.clone(),
            integrator: self.integrator,
            grid: self.grid,
            max_step_residual: self.max_step_residual(),
            max_perturbation_excess: if self.perturbations.is_empty() {
                None
            } else {
                Some(self.perturbation_bound_excess())
            },
        }
    }
}

/// Sidecar written next to a trajectory CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryMetadata {
    pub equation: EquationSpec,
    pub integrator: Integrator,
    pub grid: TimeGrid,
    pub max_step_residual: f64,
    pub max_perturbation_excess: Option<f64>,
}

// ---------------------------------------------------------------------------
// spectral propagation

/// `u(t) = e^{∫_a^t φ} Σ_m e^{−λ_m (t−a)} ⟨u0, φ_m⟩_μ φ_m` at each time.
pub fn spectral_states(
    domain: &WeightedDomain,
    spectrum: &Spectrum,
    u0: &[f64],
    phi: &TimeFunction,
    a: f64,
    times: &[f64],
) -> Result<Vec<Vec<f64>>> {
    domain.check_field(u0)?;
    if spectrum.eigenvectors.len() != domain.n() {
        return Err(Error::Precondition(
            "spectral propagation needs the full eigenbasis".into(),
        ));
    }
    let coeffs = spectrum.coefficients(domain, u0);
    let n = domain.n();
    Ok(times
        .iter()
        .map(|&t| {
            let growth = phi.integral(a, t).exp();
            let mut u = vec![0.0; n];
            for ((c, lambda), mode) in coeffs.iter().zip(&spectrum.eigenvalues).zip(&spectrum.eigenvectors) {
                let amp = growth * c * (-lambda * (t - a)).exp();
                for (x, m) in u.iter_mut().zip(mode) {
                    *x += amp * m;
                }
            }
            u
        })
        .collect())
}

pub fn propagate_spectral(
    domain: &WeightedDomain,
    u0: &[f64],
    phi: &TimeFunction,
    grid: TimeGrid,
) -> Result<Trajectory> {
    run_flow(
        domain,
        &EquationSpec::linear(phi.clone()),
        u0,
        grid,
        &RunOptions::with_integrator(Integrator::Spectral),
    )
}

/// Reference propagation through the dense step propagator `exp(dt L)`
/// (scaling and squaring), independent of the eigendecomposition.
pub fn propagate_matrix_exponential(
    domain: &WeightedDomain,
    u0: &[f64],
    phi: &TimeFunction,
    grid: TimeGrid,
) -> Result<Vec<Vec<f64>>> {
    domain.check_field(u0)?;
    let propagator = (crate::operators::assemble_operator(domain).to_dense() * grid.dt()).exp();
    let times = grid.times();
    let mut out = vec![u0.to_vec()];
    let mut state = DVector::from_column_slice(u0);
    for k in 0..grid.steps {
        state = &propagator * state * phi.integral(times[k], times[k + 1]).exp();
        out.push(state.iter().copied().collect());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// linear implicit steps

/// Cached factorization of `(Id − dt L − dt φ Id)` in μ-symmetric form
/// `M (1 − dt φ) + dt K`, where `K` is the stiffness matrix.
pub struct LinearStepper {
    mu: Vec<f64>,
    matrix: DMatrix<f64>,
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl LinearStepper {
    pub fn new(domain: &WeightedDomain, dt: f64, phi_val: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Parameter(format!("dt = {dt} must be positive")));
        }
        let shift = 1.0 - dt * phi_val;
        if !(shift > 0.0) {
            return Err(Error::StepSize(format!(
                "dt * phi = {} >= 1 makes the implicit system indefinite; reduce dt",
                dt * phi_val
            )));
        }
        let n = domain.n();
        let mut a = DMatrix::<f64>::zeros(n, n);
        for (i, m) in domain.mu().iter().enumerate() {
            a[(i, i)] = m * shift;
        }
        for e in domain.edges() {
            let k = dt * e.coupling();
            a[(e.i, e.i)] += k;
            a[(e.j, e.j)] += k;
            a[(e.i, e.j)] -= k;
            a[(e.j, e.i)] -= k;
        }
        let factor = nalgebra::Cholesky::new(a.clone())
            .ok_or_else(|| Error::StepSize("implicit system lost positive definiteness; reduce dt".into()))?;
        Ok(LinearStepper {
            mu: domain.mu().to_vec(),
            matrix: a,
            factor,
        })
    }

    /// Solves for the next state; returns it with the relative residual.
    pub fn solve(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let rhs = DVector::from_iterator(u.len(), self.mu.iter().zip(u).map(|(m, x)| m * x));
        let mut x = self.factor.solve(&rhs);
        let mut r = &rhs - &self.matrix * &x;
        let scale = rhs.norm().max(f64::MIN_POSITIVE);
        if r.norm() > 1e-14 * scale {
            // one round of iterative refinement
            x += self.factor.solve(&r);
            r = &rhs - &self.matrix * &x;
        }
        (x.iter().copied().collect(), r.norm() / scale)
    }
}

/// One backward Euler step of `u_t = L u + φ u`.
pub fn step_linear_implicit(domain: &WeightedDomain, u: &[f64], dt: f64, phi_val: f64) -> Result<Vec<f64>> {
    domain.check_field(u)?;
    let (next, residual) = LinearStepper::new(domain, dt, phi_val)?.solve(u);
    if residual > 1e-12 {
        return Err(Error::Convergence {
            what: "implicit linear solve",
            iterations: 1,
            residual,
            best: next,
        });
    }
    Ok(next)
}

// ---------------------------------------------------------------------------
// nonlinear implicit steps

/// `(x² + ε²)^{(p−2)/2}`, exactly 1 for `p = 2`.
#[inline]
fn mass(x: f64, p: f64, eps: f64) -> f64 {
    if p == 2.0 {
        1.0
    } else {
        (x * x + eps * eps).powf(0.5 * (p - 2.0))
    }
}

#[inline]
fn mass_derivative(x: f64, p: f64, eps: f64) -> f64 {
    if p == 2.0 {
        0.0
    } else {
        (p - 2.0) * x * (x * x + eps * eps).powf(0.5 * (p - 4.0))
    }
}

struct PStep<'a> {
    domain: &'a WeightedDomain,
    u: &'a [f64],
    dt: f64,
    p: f64,
    eta: f64,
    eps: f64,
    rho: Option<&'a [f64]>,
    scale: f64,
}

impl PStep<'_> {
    /// `dt · F(v) = m(v)(v − u) − dt Δ_{f,p} v − dt η m(v) v − dt ρ`.
    fn residual(&self, v: &[f64]) -> Vec<f64> {
        let d = self.domain;
        let mut lap = vec![0.0; d.n()];
        for e in d.edges() {
            let flux = e.coupling() * p_flux(v[e.j] - v[e.i], self.p, self.eps);
            lap[e.i] += flux;
            lap[e.j] -= flux;
        }
        (0..d.n())
            .map(|i| {
                let m = mass(v[i], self.p, self.eps);
                let mut g = m * (v[i] - self.u[i]) - self.dt * (lap[i] / d.mu()[i]) - self.dt * self.eta * m * v[i];
                if let Some(rho) = self.rho {
                    g -= self.dt * rho[i];
                }
                g
            })
            .collect()
    }

    fn norm(&self, g: &[f64]) -> f64 {
        self.domain.norm(g) / self.scale
    }

    fn jacobian(&self, v: &[f64]) -> DMatrix<f64> {
        let d = self.domain;
        let n = d.n();
        let mut j = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let m = mass(v[i], self.p, self.eps);
            let dm = mass_derivative(v[i], self.p, self.eps);
            j[(i, i)] = dm * (v[i] - self.u[i]) + m - self.dt * self.eta * (dm * v[i] + m);
        }
        for e in d.edges() {
            let g = e.coupling() * p_flux_derivative(v[e.j] - v[e.i], self.p, self.eps);
            let (mi, mj) = (d.mu()[e.i], d.mu()[e.j]);
            j[(e.i, e.j)] -= self.dt * g / mi;
            j[(e.i, e.i)] += self.dt * g / mi;
            j[(e.j, e.i)] -= self.dt * g / mj;
            j[(e.j, e.j)] += self.dt * g / mj;
        }
        j
    }

    fn newton(&self, opts: &NewtonOptions, best: &mut (Vec<f64>, f64)) -> Option<(Vec<f64>, f64)> {
        let mut v = self.u.to_vec();
        let mut g = self.residual(&v);
        let mut r = self.norm(&g);
        for _ in 0..opts.max_iters {
            if r < best.1 {
                *best = (v.clone(), r);
            }
            if r <= opts.newton_tol {
                return Some((v, r));
            }
            let jac = self.jacobian(&v);
            let rhs = DVector::from_iterator(g.len(), g.iter().map(|x| -x));
            let delta = jac.lu().solve(&rhs)?;
            let mut damping = 1.0;
            let mut accepted = false;
            for _ in 0..=opts.max_halvings {
                let trial: Vec<f64> = v.iter().zip(delta.iter()).map(|(x, d)| x + damping * d).collect();
                let tg = self.residual(&trial);
                let tr = self.norm(&tg);
                if tr.is_finite() && tr < r {
                    v = trial;
                    g = tg;
                    r = tr;
                    accepted = true;
                    break;
                }
                damping *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if r < best.1 {
            *best = (v.clone(), r);
        }
        (r <= opts.newton_tol).then_some((v, r))
    }

    /// Lagged-coefficient iteration: freezes `m(v)` and the edge factors,
    /// then solves the resulting SPD system.
    fn fixed_point(&self, opts: &NewtonOptions, best: &mut (Vec<f64>, f64)) -> Option<(Vec<f64>, f64)> {
        let d = self.domain;
        let n = d.n();
        let shift = 1.0 - self.dt * self.eta;
        if !(shift > 0.0) {
            return None;
        }
        let floor = self.eps.max(1e-12);
        let mut v = best.0.clone();
        for _ in 0..opts.fixed_point_iters {
            let mut a = DMatrix::<f64>::zeros(n, n);
            let mut rhs = DVector::<f64>::zeros(n);
            for i in 0..n {
                let m = mass(v[i], self.p, floor);
                a[(i, i)] = d.mu()[i] * m * shift;
                rhs[i] = d.mu()[i] * (m * self.u[i] + self.rho.map_or(0.0, |r| self.dt * r[i]));
            }
            for e in d.edges() {
                let delta = v[e.j] - v[e.i];
                let factor = if self.p == 2.0 {
                    1.0
                } else {
                    (delta * delta + floor * floor).powf(0.5 * (self.p - 2.0))
                };
                let k = self.dt * e.coupling() * factor;
                a[(e.i, e.i)] += k;
                a[(e.j, e.j)] += k;
                a[(e.i, e.j)] -= k;
                a[(e.j, e.i)] -= k;
            }
            let next = nalgebra::Cholesky::new(a)?.solve(&rhs);
            v = next.iter().copied().collect();
            let r = self.norm(&self.residual(&v));
            if r < best.1 {
                *best = (v.clone(), r);
            }
            if r <= opts.newton_tol {
                return Some((v, r));
            }
        }
        None
    }
}

/// One backward Euler step of the p-heat-type flow, optionally with a
/// frozen source `ρ`.
///
/// The reported residual is `‖dt · F(v)‖_μ / ‖m(u) u‖_μ`, the residual of
/// the step equation multiplied through by `dt` and made relative to the
/// size of the time-derivative term.
#[allow(clippy::too_many_arguments)]
pub fn step_p_implicit(
    domain: &WeightedDomain,
    u: &[f64],
    dt: f64,
    p: f64,
    eta_val: f64,
    eps: f64,
    rho: Option<&[f64]>,
    opts: &NewtonOptions,
) -> Result<(Vec<f64>, f64)> {
    domain.check_field(u)?;
    validate_p(p)?;
    if p != 2.0 && !(eps > 0.0) {
        return Err(Error::Parameter(format!("p = {p} != 2 requires eps > 0")));
    }
    if !(dt > 0.0) {
        return Err(Error::Parameter(format!("dt = {dt} must be positive")));
    }
    if let Some(r) = rho {
        domain.check_field(r)?;
    }
    let mu_norm_mass: f64 = {
        let w: Vec<f64> = u.iter().map(|x| mass(*x, p, eps) * x).collect();
        domain.norm(&w)
    };
    let step = PStep {
        domain,
        u,
        dt,
        p,
        eta: eta_val,
        eps,
        rho,
        scale: if mu_norm_mass > 0.0 { mu_norm_mass } else { 1.0 },
    };
    let mut best = (u.to_vec(), f64::INFINITY);
    if let Some(done) = step.newton(opts, &mut best) {
        return Ok(done);
    }
    if let Some(done) = step.fixed_point(opts, &mut best) {
        return Ok(done);
    }
    Err(Error::Convergence {
        what: "implicit p-step (Newton and fixed point)",
        iterations: opts.max_iters + opts.fixed_point_iters,
        residual: best.1,
        best: best.0,
    })
}

// ---------------------------------------------------------------------------
// perturbations

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PerturbationKind {
    Linear,
    P(f64),
}

#[derive(Debug, Clone)]
pub struct Perturbation {
    pub rho: Vec<f64>,
    pub envelope: Vec<f64>,
}

/// `ρ_i = ψ θ_i · envelope_i` with seeded `θ_i ∈ [−1, 1]`.
///
/// Linear envelope: `|u_i| + sqrt(e_i)` with `e` the p = 2 energy density.
/// p envelope: `|u_i|^{p−1} + |u_i|^{p/2−1} sqrt(e_i)` with the p-energy
/// density, taking `|u_i|^{p/2−1} = 0` at `u_i = 0`.
pub fn make_perturbation(
    domain: &WeightedDomain,
    u: &[f64],
    psi_val: f64,
    seed: u64,
    kind: PerturbationKind,
) -> Result<Perturbation> {
    domain.check_field(u)?;
    if !(psi_val >= 0.0) {
        return Err(Error::Parameter(format!("psi = {psi_val} must be nonnegative")));
    }
    let envelope: Vec<f64> = match kind {
        PerturbationKind::Linear => {
            let e = vertex_energy_density(domain, u, 2.0)?;
            u.iter().zip(&e).map(|(x, ei)| x.abs() + ei.sqrt()).collect()
        }
        PerturbationKind::P(p) => {
            validate_p(p)?;
            let e = vertex_energy_density(domain, u, p)?;
            u.iter()
                .zip(&e)
                .map(|(x, ei)| {
                    let a = x.abs();
                    let grad_weight = if a == 0.0 && p != 2.0 {
                        0.0
                    } else {
                        a.powf(0.5 * p - 1.0)
                    };
                    a.powf(p - 1.0) + grad_weight * ei.sqrt()
                })
                .collect()
        }
    };
    let mut rng = seed::rng_from(seed, &[0x7268]);
    let rho = envelope
        .iter()
        .map(|env| {
            let theta: f64 = rng.random_range(-1.0..=1.0);
            psi_val * theta * env
        })
        .collect();
    Ok(Perturbation { rho, envelope })
}

// ---------------------------------------------------------------------------
// driver

fn default_integrator(eq: &EquationSpec, n: usize, cap: usize) -> Integrator {
    match eq.kind {
        EquationKind::Linear { .. } if n <= cap => Integrator::Spectral,
        EquationKind::Linear { .. } | EquationKind::LinearPerturbed { .. } => Integrator::ImplicitEuler,
        EquationKind::PHeat { .. } | EquationKind::PPerturbed { .. } => Integrator::NewtonImplicit,
    }
}

fn supported(eq: &EquationSpec, integrator: Integrator) -> bool {
    use Integrator::*;
    match eq.kind {
        EquationKind::Linear { .. } => matches!(integrator, Spectral | ImplicitEuler | Extrapolated),
        EquationKind::PHeat { .. } => matches!(integrator, NewtonImplicit | Extrapolated),
        EquationKind::LinearPerturbed { .. } => integrator == ImplicitEuler,
        EquationKind::PPerturbed { .. } => integrator == NewtonImplicit,
    }
}

fn mass_integral(domain: &WeightedDomain, u: &[f64]) -> f64 {
    domain.inner(u, u)
}

/// Evolves `u0` over `grid` and records the trajectory.
pub fn run_flow(
    domain: &WeightedDomain,
    eq: &EquationSpec,
    u0: &[f64],
    grid: TimeGrid,
    opts: &RunOptions,
) -> Result<Trajectory> {
    let grid = TimeGrid::new(grid.a, grid.b, grid.steps)?;
    eq.validate(&grid)?;
    domain.check_field(u0)?;
    if u0.iter().all(|&x| x == 0.0) {
        return Err(Error::Precondition("initial field is identically zero".into()));
    }
    let integrator = opts
        .integrator
        .unwrap_or_else(|| default_integrator(eq, domain.n(), opts.dense_cap));
    if !supported(eq, integrator) {
        return Err(Error::Parameter(format!(
            "integrator {integrator:?} does not apply to {:?}",
            eq.kind
        )));
    }
    let times = grid.times();
    let dt = grid.dt();
    let coeff = eq.coefficient();
    let mut traj = Trajectory {
        grid,
        times: times.clone(),
        states: Vec::with_capacity(grid.steps + 1),
        equation: eq.clone(),
        integrator,
        step_residuals: Vec::with_capacity(grid.steps),
        perturbations: Vec::new(),
        envelopes: Vec::new(),
        psi_samples: Vec::new(),
    };

    if integrator == Integrator::Spectral {
        let spectrum = eigendecompose_with_cap(domain, EigenCount::All, opts.dense_cap)?;
        traj.states = spectral_states(domain, &spectrum, u0, &coeff, grid.a, &times)?;
        traj.step_residuals = vec![0.0; grid.steps];
        for (k, u) in traj.states.iter().enumerate() {
            guard(domain, u).map_err(|e| e.at_step(k))?;
        }
        return Ok(traj);
    }

    traj.states.push(u0.to_vec());
    let mut linear_cache: Option<(f64, LinearStepper)> = None;
    let mut linear_step = |u: &[f64], h: f64, phi_val: f64| -> Result<(Vec<f64>, f64)> {
        let key = phi_val * h;
        let reuse = matches!(&linear_cache, Some((k, _)) if k.to_bits() == key.to_bits() && h == dt);
        if reuse {
            return Ok(linear_cache.as_ref().unwrap().1.solve(u));
        }
        let stepper = LinearStepper::new(domain, h, phi_val)?;
        let out = stepper.solve(u);
        if h == dt {
            linear_cache = Some((key, stepper));
        }
        Ok(out)
    };

    for (k, &t) in times.iter().enumerate().take(grid.steps) {
        let u = traj.states[k].clone();
        let result: Result<(Vec<f64>, f64)> = (|| match (&eq.kind, integrator) {
            (EquationKind::Linear { phi }, Integrator::ImplicitEuler) => linear_step(&u, dt, phi.eval(t)),
            (EquationKind::Linear { phi }, Integrator::Extrapolated) => {
                let (full, r0) = linear_step(&u, dt, phi.eval(t))?;
                let (half, r1) = linear_step(&u, 0.5 * dt, phi.eval(t))?;
                let (half2, r2) = linear_step(&half, 0.5 * dt, phi.eval(t + 0.5 * dt))?;
                let next = half2.iter().zip(&full).map(|(h, f)| 2.0 * h - f).collect();
                Ok((next, r0.max(r1).max(r2)))
            }
            (EquationKind::PHeat { p, eta }, Integrator::NewtonImplicit) => {
                step_p_implicit(domain, &u, dt, *p, eta.eval(t), eq.eps, None, &opts.newton)
            }
            (EquationKind::PHeat { p, eta }, Integrator::Extrapolated) => {
                let (full, r0) = step_p_implicit(domain, &u, dt, *p, eta.eval(t), eq.eps, None, &opts.newton)?;
                let (half, r1) = step_p_implicit(domain, &u, 0.5 * dt, *p, eta.eval(t), eq.eps, None, &opts.newton)?;
                let (half2, r2) = step_p_implicit(
                    domain,
                    &half,
                    0.5 * dt,
                    *p,
                    eta.eval(t + 0.5 * dt),
                    eq.eps,
                    None,
                    &opts.newton,
                )?;
                let next = half2.iter().zip(&full).map(|(h, f)| 2.0 * h - f).collect();
                Ok((next, r0.max(r1).max(r2)))
            }
            (EquationKind::LinearPerturbed { psi, perturbation_seed }, _) => {
                let psi_val = psi.eval(t);
                let pert = make_perturbation(
                    domain,
                    &u,
                    psi_val,
                    seed::derive_seed(*perturbation_seed, &[k as u64]),
                    PerturbationKind::Linear,
                )?;
                let (mut next, r) = linear_step(&u, dt, 0.0)?;
                if psi_val != 0.0 {
                    for (x, rho) in next.iter_mut().zip(&pert.rho) {
                        *x += dt * rho;
                    }
                }
                traj.psi_samples.push(psi_val);
                traj.perturbations.push(pert.rho);
                traj.envelopes.push(pert.envelope);
                Ok((next, r))
            }
            (
                EquationKind::PPerturbed {
                    p,
                    psi,
                    perturbation_seed,
                },
                _,
            ) => {
                let psi_val = psi.eval(t);
                let pert = make_perturbation(
                    domain,
                    &u,
                    psi_val,
                    seed::derive_seed(*perturbation_seed, &[k as u64]),
                    PerturbationKind::P(*p),
                )?;
                let out = step_p_implicit(domain, &u, dt, *p, 0.0, eq.eps, Some(&pert.rho), &opts.newton)?;
                traj.psi_samples.push(psi_val);
                traj.perturbations.push(pert.rho);
                traj.envelopes.push(pert.envelope);
                Ok(out)
            }
            _ => unreachable!("integrator support is validated above"),
        })();
        let (next, residual) = result.map_err(|e| e.at_step(k))?;
        guard(domain, &next).map_err(|e| e.at_step(k + 1))?;
        traj.step_residuals.push(residual);
        traj.states.push(next);
    }
    Ok(traj)
}

fn guard(domain: &WeightedDomain, u: &[f64]) -> Result<()> {
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parameter("state became non-finite".into()));
    }
    let i = mass_integral(domain, u);
    if i < UNDERFLOW_GUARD {
        return Err(Error::Underflow { value: i });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, DomainSpec, Edge, MeasureSpec};
    use crate::spectrum::eigendecompose;

    fn cycle(n: usize) -> WeightedDomain {
        build_domain(&DomainSpec::Cycle {
            n,
            weight: 1.0,
            conductance: 1.0,
            measure: MeasureSpec::Unit,
        })
        .unwrap()
    }

    fn two_vertex() -> WeightedDomain {
        WeightedDomain::new(vec![1.0, 1.0], vec![Edge::new(0, 1, 1.0, 1.0)], "pair").unwrap()
    }

    fn graph(seed: u64) -> WeightedDomain {
        build_domain(&DomainSpec::RandomGraph {
            n: 16,
            edge_probability: None,
            target_degree: Some(4.0),
            seed,
            weight_range: (0.5, 1.5),
            conductance_range: (0.5, 1.5),
            measure: MeasureSpec::UniformPotential {
                lo: -0.5,
                hi: 0.5,
                seed,
            },
        })
        .unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn spectral_eigenmode_decays_exactly() {
        let d = cycle(6);
        let s = eigendecompose(&d, EigenCount::All).unwrap();
        let mode = s.eigenvectors[1].clone();
        let lambda = s.eigenvalues[1];
        let phi = TimeFunction::constant(0.3);
        let traj = propagate_spectral(&d, &mode, &phi, TimeGrid::new(0.0, 1.0, 10).unwrap()).unwrap();
        for (t, u) in traj.times.iter().zip(&traj.states) {
            let expected: Vec<f64> = mode.iter().map(|x| x * ((0.3 - lambda) * t).exp()).collect();
            assert!(max_diff(u, &expected) < 1e-12);
        }
    }

    #[test]
    fn matrix_exponential_matches_spectral_path() {
        let d = graph(3);
        let mut rng = seed::rng_from(3, &[]);
        let u0: Vec<f64> = (0..d.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let phi = TimeFunction::Sinusoid {
            amplitude: 0.4,
            omega: 2.0,
            phase: 0.3,
            offset: 0.1,
        };
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let spectral = propagate_spectral(&d, &u0, &phi, grid).unwrap();
        let oracle = propagate_matrix_exponential(&d, &u0, &phi, grid).unwrap();
        for (a, b) in spectral.states.iter().zip(&oracle) {
            assert!(max_diff(a, b) < 1e-12);
        }
        let c4 = cycle(4);
        let mixed = propagate_matrix_exponential(&c4, &[2.0, -1.0, 0.0, -1.0], &TimeFunction::zero(), grid).unwrap();
        let t: f64 = 1.0;
        let (a, b) = ((-2.0 * t).exp(), (-4.0 * t).exp());
        assert!(max_diff(&mixed[20], &[a + b, -b, -a + b, -b]) < 1e-13);
    }

    #[test]
    fn implicit_linear_two_vertex_step() {
        let next = step_linear_implicit(&two_vertex(), &[1.0, -1.0], 0.1, 0.0).unwrap();
        let s = 1.0 / 1.2;
        assert!(max_diff(&next, &[s, -s]) < 1e-15);
        let err = step_linear_implicit(&two_vertex(), &[1.0, -1.0], 0.5, 2.0).unwrap_err();
        assert!(matches!(err, Error::StepSize(_)));
    }

    #[test]
    fn p_step_two_vertex_closed_form() {
        let dt = 0.01;
        let (next, res) = step_p_implicit(
            &two_vertex(),
            &[1.0, -1.0],
            dt,
            3.0,
            0.0,
            1e-8,
            None,
            &NewtonOptions::default(),
        )
        .unwrap();
        let s = 1.0 / (1.0 + 4.0 * dt);
        assert!(max_diff(&next, &[s, -s]) < 1e-12, "{next:?}");
        assert!(res <= 1e-12);
    }

    #[test]
    fn p_step_at_two_matches_linear_step() {
        let d = graph(4);
        let mut rng = seed::rng_from(4, &[]);
        let u: Vec<f64> = (0..d.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lin = step_linear_implicit(&d, &u, 0.05, 0.7).unwrap();
        let (p2, _) = step_p_implicit(&d, &u, 0.05, 2.0, 0.7, 0.0, None, &NewtonOptions::default()).unwrap();
        assert!(max_diff(&lin, &p2) < 1e-10);
    }

    #[test]
    fn p_step_converges_on_graph() {
        let d = graph(5);
        let mut rng = seed::rng_from(5, &[]);
        let u: Vec<f64> = (0..d.n()).map(|_| 1.0 + 0.5 * rng.random_range(-1.0..1.0)).collect();
        for p in [1.5, 3.0, 4.0] {
            let (_, res) = step_p_implicit(&d, &u, 0.02, p, 0.1, 1e-8, None, &NewtonOptions::default()).unwrap();
            assert!(res <= 1e-12, "p={p}: {res}");
        }
    }

    fn convergence_error(integrator: Integrator, steps: usize) -> f64 {
        let d = graph(7);
        let mut rng = seed::rng_from(7, &[1]);
        let u0: Vec<f64> = (0..d.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eq = EquationSpec::linear(TimeFunction::Linear {
            slope: 0.5,
            intercept: -0.2,
        });
        let grid = TimeGrid::new(0.0, 0.5, steps).unwrap();
        let exact = run_flow(&d, &eq, &u0, grid, &RunOptions::with_integrator(Integrator::Spectral)).unwrap();
        let approx = run_flow(&d, &eq, &u0, grid, &RunOptions::with_integrator(integrator)).unwrap();
        max_diff(exact.last(), approx.last())
    }

    #[test]
    fn implicit_euler_is_first_order() {
        let ratio = convergence_error(Integrator::ImplicitEuler, 40) / convergence_error(Integrator::ImplicitEuler, 80);
        assert!((1.7..2.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn extrapolation_is_second_order() {
        let ratio = convergence_error(Integrator::Extrapolated, 40) / convergence_error(Integrator::Extrapolated, 80);
        assert!((3.4..4.6).contains(&ratio), "{ratio}");
    }

    #[test]
    fn perturbation_respects_envelope() {
        let d = graph(9);
        let mut rng = seed::rng_from(9, &[]);
        let u: Vec<f64> = (0..d.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for kind in [
            PerturbationKind::Linear,
            PerturbationKind::P(3.0),
            PerturbationKind::P(1.5),
        ] {
            let pert = make_perturbation(&d, &u, 0.4, 11, kind).unwrap();
            for (r, e) in pert.rho.iter().zip(&pert.envelope) {
                assert!(r.abs() <= 0.4 * e);
            }
            let again = make_perturbation(&d, &u, 0.4, 11, kind).unwrap();
            assert_eq!(pert.rho, again.rho);
        }
        assert!(make_perturbation(&d, &u, -0.1, 1, PerturbationKind::Linear).is_err());
    }

    #[test]
    fn zero_psi_reproduces_unperturbed_runs_bitwise() {
        let d = graph(10);
        let mut rng = seed::rng_from(10, &[]);
        let u0: Vec<f64> = (0..d.n()).map(|_| 1.0 + 0.5 * rng.random_range(-1.0..1.0)).collect();
        let grid = TimeGrid::new(0.0, 0.2, 8).unwrap();
        let zero = TimeFunction::zero();
        let plain = run_flow(
            &d,
            &EquationSpec::linear(zero.clone()),
            &u0,
            grid,
            &RunOptions::with_integrator(Integrator::ImplicitEuler),
        )
        .unwrap();
        let pert = run_flow(
            &d,
            &EquationSpec::linear_perturbed(zero.clone(), 3),
            &u0,
            grid,
            &RunOptions::default(),
        )
        .unwrap();
        assert_eq!(plain.states, pert.states);
        let plain = run_flow(
            &d,
            &EquationSpec::p_heat(3.0, zero.clone()),
            &u0,
            grid,
            &RunOptions::default(),
        )
        .unwrap();
        let pert = run_flow(
            &d,
            &EquationSpec::p_perturbed(3.0, zero, 3),
            &u0,
            grid,
            &RunOptions::default(),
        )
        .unwrap();
        assert_eq!(plain.states, pert.states);
    }

    #[test]
    fn perturbed_runs_record_bounded_defects() {
        let d = graph(12);
        let mut rng = seed::rng_from(12, &[]);
        let u0: Vec<f64> = (0..d.n()).map(|_| 1.0 + 0.5 * rng.random_range(-1.0..1.0)).collect();
        let grid = TimeGrid::new(0.0, 0.2, 8).unwrap();
        let psi = TimeFunction::constant(0.3);
        for eq in [
            EquationSpec::linear_perturbed(psi.clone(), 1),
            EquationSpec::p_perturbed(3.0, psi.clone(), 1),
        ] {
            let traj = run_flow(&d, &eq, &u0, grid, &RunOptions::default()).unwrap();
            assert_eq!(traj.perturbations.len(), 8);
            assert!(traj.perturbation_bound_excess() <= 0.0);
            let again = run_flow(&d, &eq, &u0, grid, &RunOptions::default()).unwrap();
            assert_eq!(traj.states, again.states);
        }
    }

    #[test]
    fn run_flow_rejects_bad_inputs() {
        let d = cycle(5);
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let zero = TimeFunction::zero();
        let err = run_flow(
            &d,
            &EquationSpec::linear(zero.clone()),
            &[0.0; 5],
            grid,
            &RunOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        let neg = TimeFunction::Linear {
            slope: 1.0,
            intercept: -0.5,
        };
        assert!(run_flow(
            &d,
            &EquationSpec::linear_perturbed(neg, 0),
            &[1.0; 5],
            grid,
            &RunOptions::default()
        )
        .is_err());
        let bad = RunOptions::with_integrator(Integrator::Spectral);
        assert!(run_flow(&d, &EquationSpec::p_heat(3.0, zero.clone()), &[1.0; 5], grid, &bad).is_err());
        assert!(run_flow(
            &d,
            &EquationSpec::p_heat(3.0, zero).with_eps(0.0),
            &[1.0; 5],
            grid,
            &RunOptions::default()
        )
        .is_err());
        assert!(TimeGrid::new(1.0, 1.0, 3).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn underflow_is_reported_with_step() {
        let d = cycle(5);
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let err = run_flow(
            &d,
            &EquationSpec::linear(TimeFunction::constant(-2000.0)),
            &[1.0, 2.0, 3.0, 4.0, 5.0],
            grid,
            &RunOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::AtStep { source, .. } => assert!(matches!(*source, Error::Underflow { .. })),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trajectory_csv_layout() {
        let d = cycle(3);
        let traj = run_flow(
            &d,
            &EquationSpec::linear(TimeFunction::zero()),
            &[1.0, 0.0, 0.0],
            TimeGrid::new(0.0, 1.0, 2).unwrap(),
            &RunOptions::default(),
        )
        .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,vertex_0,vertex_1,vertex_2");
        assert_eq!(lines.len(), 4);
        let first: Vec<f64> = lines[1].split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(first[0], 0.0);
        assert!((first[1] - 1.0).abs() < 1e-12);
    }
}

//! Strict JSON scenario configuration.
//!
//! Unknown keys are rejected everywhere. Defaults: `eps = 1e-8`,
//! `newton_tol = 1e-12`, `refinement_levels = 1`, `dt = (b − a) / K`.

use std::fmt;

use parafreq_core::flow::{NewtonOptions, DEFAULT_EPS};
use parafreq_core::seed::derive_seed;
use parafreq_core::spectrum::{eigendecompose, p_eigenpair, EigenCount, PEigenOptions};
use parafreq_core::{build_domain, DomainSpec, EquationSpec, Integrator, TimeFunction, TimeGrid, WeightedDomain};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stream tags in the seed path `(master, scenario, trajectory, stream)`.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_PERTURBATION: u64 = 2;
pub const STREAM_EIGEN: u64 = 3;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed JSON at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid configuration at `{path}`: {message}")]
    Validation { path: String, message: String },
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl fmt::Display) -> Self {
        ConfigError::Validation {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Validation { path, .. } => Some(path),
            ConfigError::Parse { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub domain: DomainSpec,
    pub equation: EquationConfig,
    pub time: TimeConfig,
    pub init: InitSpec,
    #[serde(default)]
    pub checks: Vec<CheckRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<Integrator>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_test: Option<SelfTest>,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EquationConfig {
    Linear {
        phi: TimeFunction,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    PHeat {
        p: f64,
        eta: TimeFunction,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    LinearPerturbed {
        psi: TimeFunction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        perturbation_seed: Option<u64>,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    PPerturbed {
        p: f64,
        psi: TimeFunction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        perturbation_seed: Option<u64>,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl EquationConfig {
    /// Resolves the perturbation seed from the master seed when absent.
    pub fn resolve(&self, master: u64) -> EquationSpec {
        let derived = |s: &Option<u64>| s.unwrap_or_else(|| derive_seed(master, &[0, 0, STREAM_PERTURBATION]));
        match self {
            EquationConfig::Linear { phi, eps } => EquationSpec::linear(phi.clone()).with_eps(*eps),
            EquationConfig::PHeat { p, eta, eps } => EquationSpec::p_heat(*p, eta.clone()).with_eps(*eps),
            EquationConfig::LinearPerturbed {
                psi,
                perturbation_seed,
                eps,
            } => EquationSpec::linear_perturbed(psi.clone(), derived(perturbation_seed)).with_eps(*eps),
            EquationConfig::PPerturbed {
                p,
                psi,
                perturbation_seed,
                eps,
            } => EquationSpec::p_perturbed(*p, psi.clone(), derived(perturbation_seed)).with_eps(*eps),
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub a: f64,
    pub b: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default = "one")]
    pub refinement_levels: usize,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// `k`-th μ-orthonormal eigenvector of `−L`, ascending, `k = 0` constant.
    Eigenmode {
        k: usize,
    },
    /// `offset + amplitude · U(−1, 1)` per vertex.
    Random {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default)]
        offset: f64,
        #[serde(default = "unit")]
        amplitude: f64,
    },
    Constant {
        c: f64,
    },
    Explicit {
        values: Vec<f64>,
    },
    PEigenpair {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

impl InitSpec {
    /// Whether the initial data is an eigenfunction of the flow's operator.
    fn is_eigen(&self, p: f64) -> bool {
        match self {
            InitSpec::Eigenmode { .. } => p == 2.0,
            InitSpec::Constant { .. } | InitSpec::PEigenpair { .. } => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub max_iters: usize,
    pub max_halvings: usize,
    pub fixed_point_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let n = NewtonOptions::default();
        SolverConfig {
            newton_tol: n.newton_tol,
            max_iters: n.max_iters,
            max_halvings: n.max_halvings,
            fixed_point_iters: n.fixed_point_iters,
        }
    }
}

impl From<SolverConfig> for NewtonOptions {
    fn from(s: SolverConfig) -> Self {
        NewtonOptions {
            newton_tol: s.newton_tol,
            max_iters: s.max_iters,
            max_halvings: s.max_halvings,
            fixed_point_iters: s.fixed_point_iters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfTest {
    pub inject: Injection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Replaces the computed frequencies with a strictly decreasing series.
    DecreasingFrequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    Invariants,
    Monotonicity,
    LogDerivative,
    LogConvexity,
    GrowthBound,
    Rigidity,
    PerturbedLinear,
    PerturbedP,
    BackwardUniqueness,
}

impl CheckName {
    pub const ALL: [CheckName; 9] = [
        CheckName::Invariants,
        CheckName::Monotonicity,
        CheckName::LogDerivative,
        CheckName::LogConvexity,
        CheckName::GrowthBound,
        CheckName::Rigidity,
        CheckName::PerturbedLinear,
        CheckName::PerturbedP,
        CheckName::BackwardUniqueness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckName::Invariants => "invariants",
            CheckName::Monotonicity => "monotonicity",
            CheckName::LogDerivative => "log_derivative",
            CheckName::LogConvexity => "log_convexity",
            CheckName::GrowthBound => "growth_bound",
            CheckName::Rigidity => "rigidity",
            CheckName::PerturbedLinear => "perturbed_linear",
            CheckName::PerturbedP => "perturbed_p",
            CheckName::BackwardUniqueness => "backward_uniqueness",
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        CheckName::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| {
            let known: Vec<&str> = CheckName::ALL.iter().map(|c| c.as_str()).collect();
            format!("unknown check `{s}`, expected one of {}", known.join(", "))
        })
    }
}

/// A check by name, optionally with a tolerance override.
///
/// The override replaces the check's principal tolerance: the absolute
/// bound for threshold checks, the `tol_factor` of `log_derivative` and
/// the per-step constant `c` of the perturbed checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCheck", into = "RawCheck")]
pub struct CheckRequest {
    pub name: CheckName,
    pub tol: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawCheck {
    Name(String),
    Detailed(DetailedCheck),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetailedCheck {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
}

impl TryFrom<RawCheck> for CheckRequest {
    type Error = String;

    fn try_from(raw: RawCheck) -> Result<Self, String> {
        let (name, tol) = match raw {
            RawCheck::Name(n) => (n, None),
            RawCheck::Detailed(d) => (d.name, d.tol),
        };
        if let Some(t) = tol {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(format!("tolerance for `{name}` must be finite and >= 0"));
            }
        }
        Ok(CheckRequest {
            name: CheckName::parse(&name)?,
            tol,
        })
    }
}

impl From<CheckRequest> for RawCheck {
    fn from(c: CheckRequest) -> Self {
        match c.tol {
            None => RawCheck::Name(c.name.as_str().to_string()),
            Some(t) => RawCheck::Detailed(DetailedCheck {
                name: c.name.as_str().to_string(),
                tol: Some(t),
            }),
        }
    }
}

/// Initial data realized on a domain, with its eigenvalue when known.
#[derive(Debug, Clone)]
pub struct InitialData {
    pub u0: Vec<f64>,
    pub lambda: Option<f64>,
}

/// A validated scenario with its domain, equation and grid built.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub domain: WeightedDomain,
    pub equation: EquationSpec,
    pub grid: TimeGrid,
}

impl Scenario {
    /// Validates `config`; `seed` overrides the configured master seed.
    pub fn from_config(config: ScenarioConfig, seed: Option<u64>) -> Result<Self, ConfigError> {
        let seed = seed.or(config.seed).unwrap_or(0);
        let t = config.time;
        if !(t.a.is_finite() && t.b.is_finite()) {
            return Err(ConfigError::at("time", "a and b must be finite"));
        }
        if t.k < 1 {
            return Err(ConfigError::at("time.K", "K must be at least 1"));
        }
        if t.b <= t.a {
            return Err(ConfigError::at(
                "time.b",
                format!("b = {} must exceed a = {}", t.b, t.a),
            ));
        }
        if t.refinement_levels < 1 {
            return Err(ConfigError::at("time.refinement_levels", "must be at least 1"));
        }
        let grid = TimeGrid::new(t.a, t.b, t.k).map_err(|e| ConfigError::at("time", e))?;
        let domain = build_domain(&config.domain).map_err(|e| ConfigError::at("domain", e))?;
        let equation = config.equation.resolve(seed);
        validate_equation(&config.equation, &equation, &grid)?;
        validate_init(&config.init, domain.n())?;
        validate_checks(&config, &equation, &grid)?;
        validate_solver(&config.solver)?;
        if let Some(integrator) = config.integrator {
            let ok = match equation.kind {
                parafreq_core::EquationKind::Linear { .. } => {
                    matches!(
                        integrator,
                        Integrator::Spectral | Integrator::ImplicitEuler | Integrator::Extrapolated
                    )
                }
                parafreq_core::EquationKind::PHeat { .. } => {
                    matches!(integrator, Integrator::NewtonImplicit | Integrator::Extrapolated)
                }
                parafreq_core::EquationKind::LinearPerturbed { .. } => integrator == Integrator::ImplicitEuler,
                parafreq_core::EquationKind::PPerturbed { .. } => integrator == Integrator::NewtonImplicit,
            };
            if !ok {
                return Err(ConfigError::at(
                    "integrator",
                    format!("{integrator:?} does not support this equation kind"),
                ));
            }
        }
        Ok(Scenario {
            config,
            seed,
            domain,
            equation,
            grid,
        })
    }

    /// Builds the initial field (and eigenvalue for eigen-type data).
    pub fn initial_data(&self) -> parafreq_core::Result<InitialData> {
        let n = self.domain.n();
        match &self.config.init {
            InitSpec::Eigenmode { k } => {
                let spec = eigendecompose(&self.domain, EigenCount::All)?;
                Ok(InitialData {
                    u0: spec.eigenvectors[*k].clone(),
                    lambda: Some(spec.eigenvalues[*k]),
                })
            }
            InitSpec::Random {
                seed,
                offset,
                amplitude,
            } => {
                use rand::Rng;
                let s = seed.unwrap_or_else(|| derive_seed(self.seed, &[0, 0, STREAM_INIT]));
                let mut rng = parafreq_core::seed::rng_from(s, &[]);
                let u0 = (0..n)
                    .map(|_| offset + amplitude * rng.random_range(-1.0..=1.0))
                    .collect();
                Ok(InitialData { u0, lambda: None })
            }
            InitSpec::Constant { c } => Ok(InitialData {
                u0: vec![*c; n],
                lambda: Some(0.0),
            }),
            InitSpec::Explicit { values } => Ok(InitialData {
                u0: values.clone(),
                lambda: None,
            }),
            InitSpec::PEigenpair { seed } => {
                let opts = PEigenOptions {
                    seed: seed.unwrap_or_else(|| derive_seed(self.seed, &[0, 0, STREAM_EIGEN])),
                    ..Default::default()
                };
                let pair = p_eigenpair(&self.domain, self.equation.p(), &opts)?;
                Ok(InitialData {
                    u0: pair.w,
                    lambda: Some(pair.lambda),
                })
            }
        }
    }
}

fn validate_equation(cfg: &EquationConfig, eq: &EquationSpec, grid: &TimeGrid) -> Result<(), ConfigError> {
    let (p, field) = match cfg {
        EquationConfig::Linear { .. } => (None, "phi"),
        EquationConfig::PHeat { p, .. } => (Some(*p), "eta"),
        EquationConfig::LinearPerturbed { .. } => (None, "psi"),
        EquationConfig::PPerturbed { p, .. } => (Some(*p), "psi"),
    };
    if let Some(p) = p {
        if !(p > 1.0 && p.is_finite()) {
            return Err(ConfigError::at("equation.p", format!("p = {p} must be finite and > 1")));
        }
    }
    if !(eq.eps >= 0.0 && eq.eps.is_finite()) {
        return Err(ConfigError::at("equation.eps", "eps must be finite and >= 0"));
    }
    if eq.p() != 2.0 && eq.eps <= 0.0 {
        return Err(ConfigError::at("equation.eps", "p != 2 requires eps > 0"));
    }
    eq.validate(grid)
        .map_err(|e| ConfigError::at(format!("equation.{field}"), e))
}

fn validate_init(init: &InitSpec, n: usize) -> Result<(), ConfigError> {
    match init {
        InitSpec::Eigenmode { k } if *k >= n => Err(ConfigError::at(
            "init.k",
            format!("mode index {k} out of range for {n} vertices"),
        )),
        InitSpec::Random { offset, amplitude, .. } if !(offset.is_finite() && amplitude.is_finite()) => {
            Err(ConfigError::at("init", "offset and amplitude must be finite"))
        }
        InitSpec::Random { offset, amplitude, .. } if *offset == 0.0 && *amplitude == 0.0 => Err(ConfigError::at(
            "init.amplitude",
            "initial data would be identically zero",
        )),
        InitSpec::Constant { c } if *c == 0.0 || !c.is_finite() => {
            Err(ConfigError::at("init.c", "constant must be finite and nonzero"))
        }
        InitSpec::Explicit { values } if values.len() != n => Err(ConfigError::at(
            "init.values",
            format!("expected {n} values, got {}", values.len()),
        )),
        InitSpec::Explicit { values } if values.iter().any(|v| !v.is_finite()) => {
            Err(ConfigError::at("init.values", "values must be finite"))
        }
        InitSpec::Explicit { values } if values.iter().all(|v| *v == 0.0) => {
            Err(ConfigError::at("init.values", "initial data is identically zero"))
        }
        _ => Ok(()),
    }
}

fn validate_checks(cfg: &ScenarioConfig, eq: &EquationSpec, grid: &TimeGrid) -> Result<(), ConfigError> {
    let perturbed = eq.is_perturbed();
    for (i, c) in cfg.checks.iter().enumerate() {
        let path = format!("checks[{i}]");
        let name = c.name.as_str();
        if cfg.checks[..i].iter().any(|d| d.name == c.name) {
            return Err(ConfigError::at(path, format!("duplicate check `{name}`")));
        }
        let reason = match c.name {
            CheckName::LogDerivative | CheckName::LogConvexity | CheckName::GrowthBound | CheckName::Rigidity
                if perturbed =>
            {
                Some("requires an unperturbed equation")
            }
            CheckName::PerturbedLinear if !(perturbed && eq.is_linear()) => Some("requires kind linear_perturbed"),
            CheckName::PerturbedP if !(perturbed && !eq.is_linear()) => Some("requires kind p_perturbed"),
            CheckName::LogDerivative if grid.steps < 2 => Some("requires K >= 2"),
            CheckName::LogConvexity if grid.steps < 2 => Some("requires K >= 2"),
            CheckName::LogConvexity if !eq.coefficient().is_nondecreasing(grid.a, grid.b) => {
                Some("requires a nondecreasing phi or eta")
            }
            CheckName::Rigidity if !cfg.init.is_eigen(eq.p()) => {
                Some("requires eigenfunction initial data (eigenmode with p = 2, constant or p_eigenpair)")
            }
            _ => None,
        };
        if let Some(r) = reason {
            return Err(ConfigError::at(path, format!("`{name}` {r}")));
        }
    }
    Ok(())
}

fn validate_solver(s: &SolverConfig) -> Result<(), ConfigError> {
    if !(s.newton_tol > 0.0 && s.newton_tol.is_finite()) {
        return Err(ConfigError::at("solver.newton_tol", "must be finite and > 0"));
    }
    if s.max_iters == 0 {
        return Err(ConfigError::at("solver.max_iters", "must be at least 1"));
    }
    Ok(())
}

/// Byte offset of a 1-based `(line, column)` position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Deserializes strictly, with path-qualified schema errors.
pub fn parse_scenario_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let parsed: Result<ScenarioConfig, _> = serde_path_to_error::deserialize(&mut de);
    let config = parsed.map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            return ConfigError::Parse {
                offset: byte_offset(text, inner.line(), inner.column()),
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            };
        }
        let message = inner.to_string();
        let path = match missing_field(&message) {
            Some(field) if path == "." => field.to_string(),
            Some(field) => format!("{path}.{field}"),
            None => path,
        };
        ConfigError::Validation { path, message }
    })?;
    de.end().map_err(|e| ConfigError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Ok(config)
}

fn missing_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}

/// Parses and validates a scenario from JSON text.
pub fn parse_config(text: &str) -> Result<Scenario, ConfigError> {
    Scenario::from_config(parse_scenario_config(text)?, None)
}

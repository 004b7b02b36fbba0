//! The generalized drift operator `L u = div_f(T ∇u)` and the weighted
//! p-diffusion operator on a [`WeightedDomain`].
//!
//! With the edge difference `(∇u)_e = u_j − u_i`,
//!
//! ```text
//! (L u)_i       = (1/μ_i) Σ_{e∋i} w_e c_e (u_j − u_i)
//! (Δ_{f,p} u)_i = (1/μ_i) Σ_{e∋i} w_e c_e ((u_j−u_i)² + ε²)^{(p−2)/2} (u_j − u_i)
//! ```
//!
//! Summation by parts `⟨v, L u⟩_μ = −E_T(u, v)` holds exactly up to
//! rounding, which is what [`check_identities`] measures.

use rand::Rng;

use crate::check::CheckResult;
use crate::domain::{abs_pow, GridScalar, PeriodicGrid, WeightedDomain};
use crate::error::{check_len, Error, Result};
use crate::seed;

/// Sparse (CSR) matrix of `L`, diagonal included.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftOperator {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl DriftOperator {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Nonzeros of row `i` as `(column, value)`, columns ascending.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    /// Entry `L_ij` (zero if structurally absent).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n, u.len())?;
        Ok((0..self.n).map(|i| self.row(i).map(|(j, v)| v * u[j]).sum()).collect())
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// Assembles `L` from the edge list.
///
/// The diagonal is the negated sum of the row's off-diagonal entries, so
/// constants lie in the kernel by construction.
pub fn assemble_operator(domain: &WeightedDomain) -> DriftOperator {
    let n = domain.n();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for e in domain.edges() {
        let wc = e.coupling();
        rows[e.i].push((e.j, wc / domain.mu()[e.i]));
        rows[e.j].push((e.i, wc / domain.mu()[e.j]));
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for (i, mut row) in rows.into_iter().enumerate() {
        let diag: f64 = -row.iter().map(|&(_, v)| v).sum::<f64>();
        row.push((i, diag));
        row.sort_by_key(|&(j, _)| j);
        for (j, v) in row {
            cols.push(j);
            vals.push(v);
        }
        row_ptr.push(cols.len());
    }
    DriftOperator { n, row_ptr, cols, vals }
}

/// Matrix-free `L u`.
pub fn apply_operator(domain: &WeightedDomain, u: &[f64]) -> Result<Vec<f64>> {
    check_len(domain.n(), u.len())?;
    let mut acc = vec![0.0; domain.n()];
    for e in domain.edges() {
        let flux = e.coupling() * (u[e.j] - u[e.i]);
        acc[e.i] += flux;
        acc[e.j] -= flux;
    }
    for (a, m) in acc.iter_mut().zip(domain.mu()) {
        *a /= m;
    }
    Ok(acc)
}

/// Regularized edge flux `((δ)² + ε²)^{(p−2)/2} δ`, with the limit value 0
/// at `δ = 0` when `ε = 0`.
#[inline]
pub(crate) fn p_flux(delta: f64, p: f64, eps: f64) -> f64 {
    if p == 2.0 {
        return delta;
    }
    if eps == 0.0 {
        if delta == 0.0 {
            return 0.0;
        }
        return delta.abs().powf(p - 2.0) * delta;
    }
    (delta * delta + eps * eps).powf(0.5 * (p - 2.0)) * delta
}

/// Derivative of [`p_flux`] in `δ`:
/// `((δ)² + ε²)^{(p−4)/2} ((p−1) δ² + ε²)`.
#[inline]
pub(crate) fn p_flux_derivative(delta: f64, p: f64, eps: f64) -> f64 {
    if p == 2.0 {
        return 1.0;
    }
    let s = delta * delta + eps * eps;
    if s == 0.0 {
        // p > 2: the flux is flat at 0; p < 2: unbounded, clamp to a large slope.
        return if p > 2.0 { 0.0 } else { f64::MAX.sqrt() };
    }
    s.powf(0.5 * (p - 4.0)) * ((p - 1.0) * delta * delta + eps * eps)
}

pub(crate) fn validate_p(p: f64) -> Result<()> {
    if p.is_finite() && p > 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("p = {p} must satisfy p > 1")))
    }
}

/// `Δ_{f,p} u` with regularization `eps`.
pub fn apply_p_operator(domain: &WeightedDomain, u: &[f64], p: f64, eps: f64) -> Result<Vec<f64>> {
    check_len(domain.n(), u.len())?;
    validate_p(p)?;
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("eps = {eps} must be finite and >= 0")));
    }
    let mut acc = vec![0.0; domain.n()];
    for e in domain.edges() {
        let flux = e.coupling() * p_flux(u[e.j] - u[e.i], p, eps);
        acc[e.i] += flux;
        acc[e.j] -= flux;
    }
    for (a, m) in acc.iter_mut().zip(domain.mu()) {
        *a /= m;
    }
    Ok(acc)
}

/// `E_T(u, v) = Σ_e w_e c_e (u_j − u_i)(v_j − v_i)`.
pub fn dirichlet_form(domain: &WeightedDomain, u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(domain.n(), u.len())?;
    check_len(domain.n(), v.len())?;
    Ok(domain
        .edges()
        .iter()
        .map(|e| e.coupling() * (u[e.j] - u[e.i]) * (v[e.j] - v[e.i]))
        .sum())
}

/// `Σ_e w_e c_e |u_j − u_i|^p`.
pub fn p_energy(domain: &WeightedDomain, u: &[f64], p: f64) -> Result<f64> {
    check_len(domain.n(), u.len())?;
    if !(p >= 1.0) {
        return Err(Error::Parameter(format!("energy exponent p = {p} must be >= 1")));
    }
    Ok(domain
        .edges()
        .iter()
        .map(|e| e.coupling() * abs_pow(u[e.j] - u[e.i], p))
        .sum())
}

fn relative(residual: f64, scale: f64) -> f64 {
    if residual == 0.0 {
        0.0
    } else {
        residual / scale.max(f64::MIN_POSITIVE)
    }
}

pub const ANCHOR_SELF_ADJOINT: &str = "operator-self-adjointness";
pub const ANCHOR_DIVERGENCE: &str = "operator-divergence-theorem";
pub const ANCHOR_PARTS: &str = "operator-integration-by-parts";
pub const ANCHOR_P2: &str = "p-operator-reduction";
pub const ANCHOR_PRODUCT: &str = "operator-product-rule";

/// Residuals of the exact discrete identities for one pair of fields:
/// `(self-adjointness, divergence, summation by parts, p=2 mismatch)`,
/// each relative to the sum of absolute values of the terms involved.
pub fn identity_residuals(domain: &WeightedDomain, u: &[f64], v: &[f64]) -> Result<[f64; 4]> {
    let lu = apply_operator(domain, u)?;
    let lv = apply_operator(domain, v)?;
    let mu = domain.mu();
    let abs_inner =
        |a: &[f64], b: &[f64]| -> f64 { mu.iter().zip(a).zip(b).map(|((m, x), y)| (m * x * y).abs()).sum() };

    let sa = (domain.inner(&lu, v) - domain.inner(u, &lv)).abs();
    let sa_scale = abs_inner(&lu, v) + abs_inner(u, &lv);

    let div = domain.integrate(&lu).abs();
    let div_scale: f64 = mu.iter().zip(&lu).map(|(m, x)| (m * x).abs()).sum();

    let energy = dirichlet_form(domain, u, v)?;
    let parts = (domain.inner(v, &lu) + energy).abs();
    let energy_abs: f64 = domain
        .edges()
        .iter()
        .map(|e| (e.coupling() * (u[e.j] - u[e.i]) * (v[e.j] - v[e.i])).abs())
        .sum();
    let parts_scale = abs_inner(v, &lu) + energy_abs;

    let lpu = apply_p_operator(domain, u, 2.0, 0.0)?;
    let p2 = lpu
        .iter()
        .zip(&lu)
        .map(|(a, b)| {
            if a.to_bits() == b.to_bits() {
                0.0
            } else {
                (a - b).abs().max(f64::MIN_POSITIVE)
            }
        })
        .fold(0.0, f64::max);

    Ok([
        relative(sa, sa_scale),
        relative(div, div_scale),
        relative(parts, parts_scale),
        p2,
    ])
}

/// Self-adjointness, discrete divergence theorem, summation by parts and
/// the bitwise `p = 2` reduction over `trials` seeded random field pairs.
pub fn check_identities(domain: &WeightedDomain, trials: usize, seed: u64, tol: f64) -> Result<Vec<CheckResult>> {
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!("tolerance {tol} must be positive")));
    }
    let n = domain.n();
    let mut worst = [(f64::NEG_INFINITY, None); 4];
    for t in 0..trials {
        let mut rng = seed::rng_from(seed, &[t as u64]);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let res = identity_residuals(domain, &u, &v)?;
        for (w, r) in worst.iter_mut().zip(res) {
            if r > w.0 || r.is_nan() {
                *w = (r, Some(t));
            }
        }
    }
    let names = [
        ("self_adjointness", ANCHOR_SELF_ADJOINT, tol),
        ("divergence", ANCHOR_DIVERGENCE, tol),
        ("summation_by_parts", ANCHOR_PARTS, tol),
        ("p2_reduction", ANCHOR_P2, 0.0),
    ];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(&(name, anchor, tol), (w, at))| CheckResult::new(name, anchor, w.max(0.0), tol, at))
        .collect())
}

/// A smooth test function on the torus with its analytic gradient.
pub type SmoothField = fn(f64, f64) -> (f64, f64, f64);

/// `sin(2π(x + y))`.
pub fn trig_u(x: f64, y: f64) -> (f64, f64, f64) {
    let tau = std::f64::consts::TAU;
    let arg = tau * (x + y);
    (arg.sin(), tau * arg.cos(), tau * arg.cos())
}

/// `cos(2π(x − 2y))`.
pub fn trig_v(x: f64, y: f64) -> (f64, f64, f64) {
    let tau = std::f64::consts::TAU;
    let arg = tau * (x - 2.0 * y);
    (arg.cos(), -tau * arg.sin(), 2.0 * tau * arg.sin())
}

/// Max over vertices of `|L(uv) − v Lu − u Lv − 2 T(∇u, ∇v)|`, with the
/// last term evaluated from the analytic gradients.
pub fn product_rule_residual(grid: &PeriodicGrid, u: SmoothField, v: SmoothField) -> Result<f64> {
    let d = &grid.domain;
    let uu = grid.sample(|x, y| u(x, y).0);
    let vv = grid.sample(|x, y| v(x, y).0);
    let uv: Vec<f64> = uu.iter().zip(&vv).map(|(a, b)| a * b).collect();
    let l_uv = apply_operator(d, &uv)?;
    let l_u = apply_operator(d, &uu)?;
    let l_v = apply_operator(d, &vv)?;
    let mut worst: f64 = 0.0;
    for k in 0..d.n() {
        let (x, y) = grid.coords(k);
        let (_, ux, uy) = u(x, y);
        let (_, vx, vy) = v(x, y);
        let t_uv = grid.txx.eval(x, y) * ux * vx + grid.tyy.eval(x, y) * uy * vy;
        let r = l_uv[k] - vv[k] * l_u[k] - uu[k] * l_v[k] - 2.0 * t_uv;
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

/// Product-rule residuals across square grid refinements. Passes when the
/// residual strictly decreases at every refinement; the reported violation
/// is the largest ratio between consecutive residuals.
pub fn check_product_rule_trend(
    levels: &[usize],
    txx: GridScalar,
    tyy: GridScalar,
    potential: GridScalar,
    u: SmoothField,
    v: SmoothField,
) -> Result<(CheckResult, Vec<f64>)> {
    if levels.len() < 2 {
        return Err(Error::Input("product-rule trend needs at least two grid levels".into()));
    }
    let residuals = levels
        .iter()
        .map(|&nx| {
            let grid = PeriodicGrid::new(nx, nx, txx, tyy, potential)?;
            product_rule_residual(&grid, u, v)
        })
        .collect::<Result<Vec<_>>>()?;
    let ratios = residuals.windows(2).enumerate().map(|(k, w)| (k + 1, w[1] / w[0]));
    // strictly below 1
    let tol = 1.0 - f64::EPSILON;
    let check = CheckResult::from_violations("product_rule_trend", ANCHOR_PRODUCT, ratios, tol);
    Ok((check, residuals))
}

//! Eigenpairs of `−L` in the μ-inner product, and approximate
//! eigenpairs of the weighted p-Laplacian.
//!
//! The generalized problem `−L φ = λ φ` is symmetrized with
//! `y = μ^{1/2} φ`, giving the symmetric matrix
//! `S_ij = −w_e c_e / sqrt(μ_i μ_j)` off the diagonal.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::domain::WeightedDomain;
use crate::error::{Error, Result};
use crate::operators::{apply_operator, apply_p_operator, p_energy, p_flux_derivative, validate_p};
use crate::seed;

pub const DEFAULT_DENSE_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenCount {
    All,
    Lowest(usize),
}

/// μ-orthonormal eigenpairs of `−L`, ascending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
    /// `max_k ‖L φ_k + λ_k φ_k‖_μ`.
    pub residual_norm: f64,
}

impl Spectrum {
    /// `⟨u, φ_k⟩_μ` for every stored mode.
    pub fn coefficients(&self, domain: &WeightedDomain, u: &[f64]) -> Vec<f64> {
        self.eigenvectors.iter().map(|phi| domain.inner(u, phi)).collect()
    }

    /// CSV with header `k,lambda`.
    pub fn write_eigenvalues_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,lambda")?;
        for (k, l) in self.eigenvalues.iter().enumerate() {
            writeln!(out, "{k},{l:e}")?;
        }
        Ok(())
    }

    /// One row per vertex, one column per mode.
    pub fn write_eigenvectors_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.eigenvectors.first().map_or(0, |v| v.len());
        let header: Vec<String> = (0..self.eigenvectors.len()).map(|k| format!("phi_{k}")).collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..n {
            let row: Vec<String> = self.eigenvectors.iter().map(|v| format!("{:e}", v[i])).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub fn eigendecompose(domain: &WeightedDomain, count: EigenCount) -> Result<Spectrum> {
    eigendecompose_with_cap(domain, count, DEFAULT_DENSE_CAP)
}

pub fn eigendecompose_with_cap(domain: &WeightedDomain, count: EigenCount, cap: usize) -> Result<Spectrum> {
    let n = domain.n();
    if n > cap {
        return Err(Error::Capacity { n, cap });
    }
    let keep = match count {
        EigenCount::All => n,
        EigenCount::Lowest(k) if k >= 1 && k <= n => k,
        EigenCount::Lowest(k) => return Err(Error::Parameter(format!("requested {k} eigenpairs on {n} vertices"))),
    };
    let mu = domain.mu();
    let sqrt_mu: Vec<f64> = mu.iter().map(|m| m.sqrt()).collect();
    // -S, positive semidefinite
    let mut s = DMatrix::<f64>::zeros(n, n);
    for e in domain.edges() {
        let wc = e.coupling();
        let off = -wc / (sqrt_mu[e.i] * sqrt_mu[e.j]);
        s[(e.i, e.j)] = off;
        s[(e.j, e.i)] = off;
        s[(e.i, e.i)] += wc / mu[e.i];
        s[(e.j, e.j)] += wc / mu[e.j];
    }
    let eig = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut eigenvalues = Vec::with_capacity(keep);
    let mut eigenvectors = Vec::with_capacity(keep);
    for &k in order.iter().take(keep) {
        let mut phi: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(i, k)] / sqrt_mu[i]).collect();
        // renormalize in μ and fix the sign: largest-magnitude entry positive
        let norm = domain.norm(&phi);
        let pivot = phi
            .iter()
            .enumerate()
            .fold(
                (0, 0.0f64),
                |acc, (i, &x)| if x.abs() > acc.1.abs() { (i, x) } else { acc },
            )
            .1;
        let scale = if pivot < 0.0 { -1.0 / norm } else { 1.0 / norm };
        phi.iter_mut().for_each(|x| *x *= scale);
        eigenvalues.push(eig.eigenvalues[k]);
        eigenvectors.push(phi);
    }

    let mut residual_norm: f64 = 0.0;
    for (lambda, phi) in eigenvalues.iter().zip(&eigenvectors) {
        let lphi = apply_operator(domain, phi)?;
        let r: Vec<f64> = lphi.iter().zip(phi).map(|(a, b)| a + lambda * b).collect();
        residual_norm = residual_norm.max(domain.norm(&r));
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
        residual_norm,
    })
}

#[derive(Debug, Clone)]
pub struct PEigenOptions {
    pub seed: u64,
    pub max_iters: usize,
    /// Target for `‖Δ_{f,p} w + λ w|w|^{p−2}‖_μ`.
    pub step_tol: f64,
    pub initial: Option<Vec<f64>>,
}

impl Default for PEigenOptions {
    fn default() -> Self {
        PEigenOptions {
            seed: 0,
            max_iters: 50_000,
            step_tol: 1e-10,
            initial: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PEigenpair {
    pub lambda: f64,
    /// Normalized so that `Σ μ_i |w_i|^p = 1`.
    pub w: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn signed_pow(x: f64, q: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.abs().powf(q) * x.signum()
    }
}

/// The shift `c` with `Σ μ_i |u_i − c|^{p−2} (u_i − c) = 0`; for `p = 2`
/// this is the μ-weighted mean.
pub fn p_mean(domain: &WeightedDomain, u: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        return domain.integrate(u) / domain.total_measure();
    }
    let g = |c: f64| -> f64 {
        domain
            .mu()
            .iter()
            .zip(u)
            .map(|(m, x)| m * signed_pow(x - c, p - 1.0))
            .sum()
    };
    let mut lo = u.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // g is decreasing in c, g(lo) >= 0 >= g(hi)
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct Iterate {
    w: Vec<f64>,
    lambda: f64,
    residual_field: Vec<f64>,
    residual: f64,
}

fn normalize_iterate(domain: &WeightedDomain, u: &[f64], p: f64) -> Result<Option<Iterate>> {
    let c = p_mean(domain, u, p);
    let mut w: Vec<f64> = u.iter().map(|x| x - c).collect();
    let norm: f64 = domain.mu().iter().zip(&w).map(|(m, x)| m * x.abs().powf(p)).sum();
    if !(norm > 0.0) || !norm.is_finite() {
        return Ok(None);
    }
    let s = norm.powf(-1.0 / p);
    w.iter_mut().for_each(|x| *x *= s);
    let lambda = p_energy(domain, &w, p)?;
    let lw = apply_p_operator(domain, &w, p, 0.0)?;
    let residual_field: Vec<f64> = lw
        .iter()
        .zip(&w)
        .map(|(a, x)| a + lambda * signed_pow(*x, p - 1.0))
        .collect();
    let residual = domain.norm(&residual_field);
    Ok(Some(Iterate {
        w,
        lambda,
        residual_field,
        residual,
    }))
}

/// Newton on `Δ_{f,p} w + λ |w|^{p−2} w = 0`, `Σ μ_i |w_i|^p = 1` from a
/// nearby iterate. Returns `None` if it does not improve the residual.
fn newton_polish(domain: &WeightedDomain, start: &Iterate, p: f64, tol: f64) -> Result<Option<Iterate>> {
    let n = domain.n();
    let mu = domain.mu();
    let mut w = start.w.clone();
    let mut lambda = start.lambda;
    let mut best: Option<Iterate> = None;
    let mut best_res = start.residual;
    for _ in 0..30 {
        let lw = apply_p_operator(domain, &w, p, 0.0)?;
        let mut f = DVector::<f64>::zeros(n + 1);
        for i in 0..n {
            f[i] = lw[i] + lambda * signed_pow(w[i], p - 1.0);
        }
        f[n] = mu.iter().zip(&w).map(|(m, x)| m * x.abs().powf(p)).sum::<f64>() - 1.0;
        let mut jac = DMatrix::<f64>::zeros(n + 1, n + 1);
        for e in domain.edges() {
            let g = e.coupling() * p_flux_derivative(w[e.j] - w[e.i], p, 0.0);
            jac[(e.i, e.j)] += g / mu[e.i];
            jac[(e.i, e.i)] -= g / mu[e.i];
            jac[(e.j, e.i)] += g / mu[e.j];
            jac[(e.j, e.j)] -= g / mu[e.j];
        }
        for i in 0..n {
            jac[(i, i)] += lambda * (p - 1.0) * w[i].abs().powf(p - 2.0);
            jac[(i, n)] = signed_pow(w[i], p - 1.0);
            jac[(n, i)] = p * mu[i] * signed_pow(w[i], p - 1.0);
        }
        let Some(delta) = jac.lu().solve(&(-f)) else { break };
        if delta.iter().any(|x| !x.is_finite()) {
            break;
        }
        for i in 0..n {
            w[i] += delta[i];
        }
        let Some(next) = normalize_iterate(domain, &w, p)? else {
            break;
        };
        if !(next.residual < best_res) {
            break;
        }
        best_res = next.residual;
        w = next.w.clone();
        lambda = next.lambda;
        let done = next.residual <= tol;
        best = Some(next);
        if done {
            break;
        }
    }
    Ok(best)
}

/// Approximate critical pair of the p-Rayleigh quotient
/// `R_p(u) = Σ_e w_e c_e |∇u|^p / Σ μ_i |u_i|^p` over nonconstant `u`.
///
/// Iterates are shifted to zero p-mean and renormalized every step, so
/// the quotient is evaluated on the shift-invariant problem; descent uses
/// the μ-gradient `−p (Δ_{f,p} w + λ w|w|^{p−2})` with Armijo backtracking.
pub fn p_eigenpair(domain: &WeightedDomain, p: f64, opts: &PEigenOptions) -> Result<PEigenpair> {
    validate_p(p)?;
    let n = domain.n();
    if n < 2 {
        return Err(Error::Precondition("p-eigenpair needs at least two vertices".into()));
    }
    let mut start = opts.initial.clone().unwrap_or_else(|| {
        let mut rng = seed::rng_from(opts.seed, &[0x7065]);
        (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()
    });
    domain.check_field(&start)?;
    let mut current = normalize_iterate(domain, &start, p)?;
    if current.is_none() {
        // constant start: deflation leaves nothing, fall back to a seeded draw
        let mut rng = seed::rng_from(opts.seed, &[0x7065, 1]);
        start = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        current = normalize_iterate(domain, &start, p)?;
    }
    let mut it = current.ok_or_else(|| Error::Precondition("could not form a nonconstant start".into()))?;
    let mut step = 1.0 / (1.0 + it.lambda);
    let mut polish_below = 1e-4;
    for iter in 0..opts.max_iters {
        if it.residual <= opts.step_tol {
            return Ok(PEigenpair {
                lambda: it.lambda,
                w: it.w,
                residual: it.residual,
                iterations: iter,
            });
        }
        if it.residual < polish_below {
            match newton_polish(domain, &it, p, opts.step_tol)? {
                Some(next) if next.residual <= opts.step_tol => {
                    return Ok(PEigenpair {
                        lambda: next.lambda,
                        w: next.w,
                        residual: next.residual,
                        iterations: iter,
                    })
                }
                Some(next) => it = next,
                None => {}
            }
            polish_below = it.residual * 1e-2;
        }
        let g2 = it.residual * it.residual;
        let mut accepted = None;
        let mut trial_step = step * 2.0;
        for _ in 0..60 {
            let trial: Vec<f64> =
                it.w.iter()
                    .zip(&it.residual_field)
                    .map(|(x, r)| x + trial_step * r)
                    .collect();
            if let Some(next) = normalize_iterate(domain, &trial, p)? {
                let flat = next.lambda <= it.lambda + 1e-13 * it.lambda.abs().max(1.0);
                if next.lambda <= it.lambda - 1e-4 * trial_step * g2 || (flat && next.residual < it.residual) {
                    accepted = Some(next);
                    break;
                }
            }
            trial_step *= 0.5;
        }
        match accepted {
            Some(next) => {
                step = trial_step;
                it = next;
            }
            None => {
                return Err(Error::Convergence {
                    what: "p-eigenpair line search",
                    iterations: iter,
                    residual: it.residual,
                    best: it.w,
                })
            }
        }
    }
    if it.residual <= opts.step_tol {
        return Ok(PEigenpair {
            lambda: it.lambda,
            w: it.w,
            residual: it.residual,
            iterations: opts.max_iters,
        });
    }
    Err(Error::Convergence {
        what: "p-eigenpair descent",
        iterations: opts.max_iters,
        residual: it.residual,
        best: it.w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, DomainSpec, Edge, MeasureSpec};

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

    #[test]
    fn cycle_spectrum_matches_closed_form() {
        for n in [4usize, 7, 12] {
            let d = build_domain(&DomainSpec::Cycle {
                n,
                weight: 1.0,
                conductance: 1.0,
                measure: MeasureSpec::Unit,
            })
            .unwrap();
            let s = eigendecompose(&d, EigenCount::All).unwrap();
            let mut expected: Vec<f64> = (0..n)
                .map(|k| 2.0 - 2.0 * (std::f64::consts::TAU * k as f64 / n as f64).cos())
                .collect();
            expected.sort_by(f64::total_cmp);
            for (a, b) in s.eigenvalues.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "{:?} vs {expected:?}", s.eigenvalues);
            }
        }
        let s = eigendecompose(&c4(), EigenCount::All).unwrap();
        let rounded: Vec<f64> = s.eigenvalues.iter().map(|x| (x * 1e9).round() / 1e9).collect();
        assert_eq!(rounded, vec![0.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn two_vertex_spectrum() {
        let s = eigendecompose(&two_vertex(), EigenCount::All).unwrap();
        assert!(s.eigenvalues[0].abs() < 1e-14);
        assert!((s.eigenvalues[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn spectrum_invariants_on_weighted_graph() {
        let d = build_domain(&DomainSpec::RandomGraph {
            n: 60,
            edge_probability: None,
            target_degree: Some(5.0),
            seed: 9,
            weight_range: (0.5, 1.5),
            conductance_range: (0.5, 2.0),
            measure: MeasureSpec::UniformPotential {
                lo: -1.0,
                hi: 1.0,
                seed: 4,
            },
        })
        .unwrap();
        let s = eigendecompose(&d, EigenCount::All).unwrap();
        assert!(s.eigenvalues[0].abs() < 1e-10);
        assert!(s.eigenvalues.iter().all(|&l| l >= -1e-10));
        assert!(s.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.residual_norm <= 1e-9);
        let phi0 = &s.eigenvectors[0];
        assert!(phi0.iter().all(|x| (x - phi0[0]).abs() < 1e-10));
        for a in 0..d.n() {
            for b in 0..d.n() {
                let ip = d.inner(&s.eigenvectors[a], &s.eigenvectors[b]);
                let target = if a == b { 1.0 } else { 0.0 };
                assert!((ip - target).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn capacity_is_enforced() {
        assert!(matches!(
            eigendecompose_with_cap(&c4(), EigenCount::All, 3),
            Err(Error::Capacity { n: 4, cap: 3 })
        ));
        assert_eq!(
            eigendecompose(&c4(), EigenCount::Lowest(2)).unwrap().eigenvalues.len(),
            2
        );
    }

    #[test]
    fn p_mean_reduces_to_weighted_mean() {
        let d = WeightedDomain::new(vec![1.0, 3.0], vec![Edge::new(0, 1, 1.0, 1.0)], "").unwrap();
        assert_eq!(p_mean(&d, &[0.0, 4.0], 2.0), 3.0);
        let c = p_mean(&d, &[0.0, 4.0], 3.0);
        // 1 * c^2 = 3 * (4 - c)^2
        let expected = 4.0 * 3f64.sqrt() / (1.0 + 3f64.sqrt());
        assert!((c - expected).abs() < 1e-12);
    }

    #[test]
    fn p_eigenpair_two_vertex_closed_form() {
        for p in [1.5, 2.0, 3.0, 4.0] {
            let pair = p_eigenpair(&two_vertex(), p, &PEigenOptions::default()).unwrap();
            // w = ±2^{-1/p}(1, −1), λ = 2^{p−1}
            assert!(
                (pair.lambda - 2f64.powf(p - 1.0)).abs() < 1e-9,
                "p={p}: {}",
                pair.lambda
            );
            let a = 2f64.powf(-1.0 / p);
            assert!((pair.w[0].abs() - a).abs() < 1e-9 && (pair.w[0] + pair.w[1]).abs() < 1e-9);
            assert!(pair.residual <= 1e-8);
        }
    }

    #[test]
    fn p_eigenpair_p2_matches_dense_spectrum() {
        let pair = p_eigenpair(&c4(), 2.0, &PEigenOptions::default()).unwrap();
        assert!((pair.lambda - 2.0).abs() < 1e-6);
        let d = build_domain(&DomainSpec::RandomGraph {
            n: 20,
            edge_probability: None,
            target_degree: Some(4.0),
            seed: 3,
            weight_range: (0.5, 1.5),
            conductance_range: (0.5, 1.5),
            measure: MeasureSpec::UniformPotential {
                lo: -0.5,
                hi: 0.5,
                seed: 3,
            },
        })
        .unwrap();
        let s = eigendecompose(&d, EigenCount::All).unwrap();
        let pair = p_eigenpair(
            &d,
            2.0,
            &PEigenOptions {
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        // gradient descent finds the smallest nonzero eigenvalue from a generic start
        assert!(
            (pair.lambda - s.eigenvalues[1]).abs() < 1e-6,
            "{} vs {}",
            pair.lambda,
            s.eigenvalues[1]
        );
    }

    #[test]
    fn constant_start_is_deflated() {
        let opts = PEigenOptions {
            initial: Some(vec![1.0; 4]),
            ..Default::default()
        };
        let pair = p_eigenpair(&c4(), 2.0, &opts).unwrap();
        assert!((pair.lambda - 2.0).abs() < 1e-6);
        let spread = pair.w.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - pair.w.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > 0.1);
    }

    #[test]
    fn p_eigenpair_satisfies_equation_on_graph() {
        let d = build_domain(&DomainSpec::RandomGraph {
            n: 12,
            edge_probability: None,
            target_degree: Some(3.0),
            seed: 21,
            weight_range: (0.5, 1.5),
            conductance_range: (1.0, 1.0),
            measure: MeasureSpec::Unit,
        })
        .unwrap();
        let pair = p_eigenpair(
            &d,
            3.0,
            &PEigenOptions {
                seed: 2,
                step_tol: 1e-9,
                ..Default::default()
            },
        )
        .unwrap();
        let lw = apply_p_operator(&d, &pair.w, 3.0, 0.0).unwrap();
        for (a, x) in lw.iter().zip(&pair.w) {
            assert!((a + pair.lambda * x * x.abs()).abs() < 1e-7);
        }
    }
}

//! Finite weighted domains: a vertex measure `μ_i = e^{-f_i} ν_i` together
//! with undirected edges carrying a geometric weight `w_e` and a
//! conductance `c_e` (the discrete stand-in for the diffusion tensor).
//!
//! Edges are stored canonically (`i < j`, lexicographically sorted), so
//! any edge-order permutation of the same input produces the same domain
//! and every edge sum is evaluated in the same order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
    pub conductance: f64,
}

impl Edge {
    pub fn new(i: usize, j: usize, weight: f64, conductance: f64) -> Self {
        Edge {
            i,
            j,
            weight,
            conductance,
        }
    }

    /// `w_e c_e`.
    #[inline]
    pub fn coupling(&self) -> f64 {
        self.weight * self.conductance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainWire", into = "DomainWire")]
pub struct WeightedDomain {
    mu: Vec<f64>,
    edges: Vec<Edge>,
    label: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainWire {
    n: usize,
    mu: Vec<f64>,
    edges: Vec<(usize, usize, f64, f64)>,
    label: String,
}

impl TryFrom<DomainWire> for WeightedDomain {
    type Error = Error;

    fn try_from(w: DomainWire) -> Result<Self> {
        check_len(w.n, w.mu.len())?;
        let edges = w
            .edges
            .into_iter()
            .map(|(i, j, weight, c)| Edge::new(i, j, weight, c))
            .collect();
        WeightedDomain::new(w.mu, edges, w.label)
    }
}

impl From<WeightedDomain> for DomainWire {
    fn from(d: WeightedDomain) -> Self {
        DomainWire {
            n: d.mu.len(),
            edges: d.edges.iter().map(|e| (e.i, e.j, e.weight, e.conductance)).collect(),
            mu: d.mu,
            label: d.label,
        }
    }
}

impl WeightedDomain {
    /// Validates and canonicalizes a domain.
    pub fn new(mu: Vec<f64>, edges: Vec<Edge>, label: impl Into<String>) -> Result<Self> {
        let n = mu.len();
        if n == 0 {
            return Err(Error::InvalidSpec("domain must have at least one vertex".into()));
        }
        if let Some(k) = mu.iter().position(|&m| !(m.is_finite() && m > 0.0)) {
            return Err(Error::InvalidSpec(format!(
                "vertex measure mu[{k}] = {} is not positive",
                mu[k]
            )));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for e in edges {
            if e.i >= n || e.j >= n {
                return Err(Error::InvalidSpec(format!(
                    "edge ({}, {}) references a vertex outside 0..{n}",
                    e.i, e.j
                )));
            }
            if e.i == e.j {
                return Err(Error::InvalidSpec(format!("self-loop at vertex {}", e.i)));
            }
            if !(e.weight.is_finite() && e.weight > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "edge ({}, {}) weight {} is not positive",
                    e.i, e.j, e.weight
                )));
            }
            if !(e.conductance.is_finite() && e.conductance > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "edge ({}, {}) conductance {} is not positive",
                    e.i, e.j, e.conductance
                )));
            }
            let (i, j) = if e.i < e.j { (e.i, e.j) } else { (e.j, e.i) };
            canon.push(Edge::new(i, j, e.weight, e.conductance));
        }
        canon.sort_by_key(|e| (e.i, e.j));
        if let Some(w) = canon.windows(2).find(|w| (w[0].i, w[0].j) == (w[1].i, w[1].j)) {
            return Err(Error::InvalidSpec(format!("duplicate edge ({}, {})", w[0].i, w[0].j)));
        }
        if !is_connected(n, &canon) {
            return Err(Error::InvalidSpec("edge set does not connect all vertices".into()));
        }
        Ok(WeightedDomain {
            mu,
            edges: canon,
            label: label.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Rescales the weighted measure by `factor`: vertex measures and edge
    /// weights both carry the density, so `L` is unchanged while `I` and
    /// `D` scale alike.
    pub fn with_scaled_measure(&self, factor: f64) -> Result<Self> {
        let mu = self.mu.iter().map(|m| m * factor).collect();
        let edges = self
            .edges
            .iter()
            .map(|e| Edge::new(e.i, e.j, e.weight * factor, e.conductance))
            .collect();
        WeightedDomain::new(mu, edges, self.label.clone())
    }

    pub fn total_measure(&self) -> f64 {
        self.mu.iter().sum()
    }

    /// `⟨u, v⟩_μ`.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.mu.iter().zip(u).zip(v).map(|((m, a), b)| m * a * b).sum()
    }

    pub fn norm(&self, u: &[f64]) -> f64 {
        self.inner(u, u).sqrt()
    }

    /// `Σ μ_i u_i`.
    pub fn integrate(&self, u: &[f64]) -> f64 {
        self.mu.iter().zip(u).map(|(m, a)| m * a).sum()
    }

    pub fn check_field(&self, u: &[f64]) -> Result<()> {
        check_len(self.n(), u.len())?;
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parameter("field contains non-finite entries".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("domain serialization cannot fail")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn is_connected(n: usize, edges: &[Edge]) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = n;
    for e in edges {
        let (a, b) = (find(&mut parent, e.i), find(&mut parent, e.j));
        if a != b {
            parent[a] = b;
            components -= 1;
        }
    }
    components == 1
}

/// Per-vertex pointwise energy with the half-edge split:
/// `e_i = (1/μ_i) Σ_{e∋i} ½ w_e c_e |u_j − u_i|^p`, so `Σ μ_i e_i` is the
/// total p-energy.
pub fn vertex_energy_density(domain: &WeightedDomain, u: &[f64], p: f64) -> Result<Vec<f64>> {
    check_len(domain.n(), u.len())?;
    if !(p >= 1.0) {
        return Err(Error::Parameter(format!("energy exponent p = {p} must be >= 1")));
    }
    let mut acc = vec![0.0; domain.n()];
    for e in domain.edges() {
        let half = 0.5 * e.coupling() * abs_pow(u[e.j] - u[e.i], p);
        acc[e.i] += half;
        acc[e.j] += half;
    }
    for (a, m) in acc.iter_mut().zip(domain.mu()) {
        *a /= m;
    }
    Ok(acc)
}

#[inline]
pub(crate) fn abs_pow(x: f64, p: f64) -> f64 {
    if p == 2.0 {
        x * x
    } else {
        x.abs().powf(p)
    }
}

// ---------------------------------------------------------------------------
// construction specs

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    #[default]
    Unit,
    List {
        values: Vec<f64>,
    },
    /// `μ_i = e^{-f}` for a constant potential.
    ConstantPotential {
        f: f64,
    },
    /// `μ_i = e^{-f_i}` with `f_i` uniform in `[lo, hi]`.
    UniformPotential {
        lo: f64,
        hi: f64,
        seed: u64,
    },
}

impl MeasureSpec {
    fn realize(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            MeasureSpec::Unit => Ok(vec![1.0; n]),
            MeasureSpec::List { values } => {
                if values.len() != n {
                    return Err(Error::InvalidSpec(format!(
                        "measure list has {} entries for {n} vertices",
                        values.len()
                    )));
                }
                Ok(values.clone())
            }
            MeasureSpec::ConstantPotential { f } => Ok(vec![(-f).exp(); n]),
            MeasureSpec::UniformPotential { lo, hi, seed } => {
                if !(lo <= hi) {
                    return Err(Error::InvalidSpec(format!("potential range [{lo}, {hi}] is empty")));
                }
                let mut rng = seed::rng_from(*seed, &[0x6d75]);
                Ok((0..n).map(|_| (-rng.random_range(*lo..=*hi)).exp()).collect())
            }
        }
    }
}

/// `base + amp_x sin(2πx) + amp_y cos(2πy)` on the unit torus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridScalar {
    pub base: f64,
    #[serde(default)]
    pub amp_x: f64,
    #[serde(default)]
    pub amp_y: f64,
}

impl GridScalar {
    pub fn constant(base: f64) -> Self {
        GridScalar {
            base,
            amp_x: 0.0,
            amp_y: 0.0,
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        self.base + self.amp_x * (tau * x).sin() + self.amp_y * (tau * y).cos()
    }

    fn lower_bound(&self) -> f64 {
        self.base - self.amp_x.abs() - self.amp_y.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    EdgeProbability,
    TargetDegree,
}

fn default_unit() -> f64 {
    1.0
}

fn default_range() -> (f64, f64) {
    (0.5, 1.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    Cycle {
        n: usize,
        #[serde(default = "default_unit")]
        weight: f64,
        #[serde(default = "default_unit")]
        conductance: f64,
        #[serde(default)]
        measure: MeasureSpec,
    },
    /// Unit torus with `nx × ny` vertices and a diagonal diffusion tensor.
    PeriodicGrid {
        nx: usize,
        ny: usize,
        #[serde(default = "unit_scalar")]
        txx: GridScalar,
        #[serde(default = "unit_scalar")]
        tyy: GridScalar,
        #[serde(default = "zero_scalar")]
        potential: GridScalar,
    },
    RandomGraph {
        n: usize,
        #[serde(default)]
        edge_probability: Option<f64>,
        #[serde(default)]
        target_degree: Option<f64>,
        seed: u64,
        #[serde(default = "default_range")]
        weight_range: (f64, f64),
        #[serde(default = "default_range")]
        conductance_range: (f64, f64),
        #[serde(default)]
        measure: MeasureSpec,
    },
    Explicit {
        mu: Vec<f64>,
        edges: Vec<(usize, usize, f64, f64)>,
    },
}

fn unit_scalar() -> GridScalar {
    GridScalar::constant(1.0)
}

fn zero_scalar() -> GridScalar {
    GridScalar::constant(0.0)
}

/// Bound on deterministic reseeding when a random draw is disconnected.
pub const MAX_CONNECTIVITY_RETRIES: u64 = 64;

pub fn build_domain(spec: &DomainSpec) -> Result<WeightedDomain> {
    match spec {
        DomainSpec::Cycle {
            n,
            weight,
            conductance,
            measure,
        } => {
            if *n < 3 {
                return Err(Error::InvalidSpec(format!("cycle needs n >= 3, got {n}")));
            }
            let mu = measure.realize(*n)?;
            let edges = (0..*n)
                .map(|i| Edge::new(i, (i + 1) % n, *weight, *conductance))
                .collect();
            WeightedDomain::new(mu, edges, format!("cycle(n={n})"))
        }
        DomainSpec::PeriodicGrid {
            nx,
            ny,
            txx,
            tyy,
            potential,
        } => PeriodicGrid::new(*nx, *ny, *txx, *tyy, *potential).map(|g| g.domain),
        DomainSpec::RandomGraph {
            n,
            edge_probability,
            target_degree,
            seed,
            weight_range,
            conductance_range,
            measure,
        } => {
            if *n < 2 {
                return Err(Error::InvalidSpec(format!("random graph needs n >= 2, got {n}")));
            }
            let prob = match (edge_probability, target_degree) {
                (Some(p), None) => *p,
                (None, Some(d)) => d / (*n as f64 - 1.0),
                _ => {
                    return Err(Error::InvalidSpec(
                        "random graph needs exactly one of edge_probability or target_degree".into(),
                    ))
                }
            };
            if !(prob > 0.0 && prob <= 1.0) {
                return Err(Error::InvalidSpec(format!("edge probability {prob} outside (0, 1]")));
            }
            for (name, (lo, hi)) in [("weight_range", weight_range), ("conductance_range", conductance_range)] {
                if !(*lo > 0.0 && lo <= hi && hi.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "{name} [{lo}, {hi}] must be positive and nonempty"
                    )));
                }
            }
            let mu = measure.realize(*n)?;
            for attempt in 0..MAX_CONNECTIVITY_RETRIES {
                let draw_seed = seed.wrapping_add(attempt);
                let mut rng = seed::rng_from(draw_seed, &[0x6564]);
                let mut edges = Vec::new();
                for i in 0..*n {
                    for j in (i + 1)..*n {
                        if rng.random::<f64>() < prob {
                            let w = rng.random_range(weight_range.0..=weight_range.1);
                            let c = rng.random_range(conductance_range.0..=conductance_range.1);
                            edges.push(Edge::new(i, j, w, c));
                        }
                    }
                }
                if is_connected(*n, &edges) {
                    return WeightedDomain::new(
                        mu,
                        edges,
                        format!("random_graph(n={n}, p={prob:.4}, seed={draw_seed})"),
                    );
                }
            }
            Err(Error::Construction(format!(
                "random graph (n={n}, p={prob}) stayed disconnected after {MAX_CONNECTIVITY_RETRIES} reseeds"
            )))
        }
        DomainSpec::Explicit { mu, edges } => WeightedDomain::new(
            mu.clone(),
            edges.iter().map(|&(i, j, w, c)| Edge::new(i, j, w, c)).collect(),
            format!("explicit(n={})", mu.len()),
        ),
    }
}

/// Periodic grid on the unit torus, keeping the geometry needed for
/// continuum comparisons.
///
/// Vertex `(ix, iy)` has index `iy * nx + ix` and sits at
/// `(ix / nx, iy / ny)`. Measures are `e^{-f} h_x h_y`; an x-edge carries
/// `w = e^{-f(mid)} h_y / h_x` and `c = T_xx(mid)`, so `L` is a
/// second-order approximation of `e^{f} div(e^{-f} T ∇u)`.
#[derive(Debug, Clone)]
pub struct PeriodicGrid {
    pub nx: usize,
    pub ny: usize,
    pub txx: GridScalar,
    pub tyy: GridScalar,
    pub potential: GridScalar,
    pub domain: WeightedDomain,
}

impl PeriodicGrid {
    pub fn new(nx: usize, ny: usize, txx: GridScalar, tyy: GridScalar, potential: GridScalar) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::InvalidSpec(format!(
                "periodic grid needs nx, ny >= 3, got {nx}x{ny}"
            )));
        }
        for (name, t) in [("txx", txx), ("tyy", tyy)] {
            if !(t.lower_bound() > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "tensor component {name} is not positive everywhere"
                )));
            }
        }
        let hx = 1.0 / nx as f64;
        let hy = 1.0 / ny as f64;
        let idx = |ix: usize, iy: usize| iy * nx + ix;
        let mut mu = vec![0.0; nx * ny];
        let mut edges = Vec::with_capacity(2 * nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, y) = (ix as f64 * hx, iy as f64 * hy);
                mu[idx(ix, iy)] = (-potential.eval(x, y)).exp() * hx * hy;
                let (xm, ym) = (x + 0.5 * hx, y + 0.5 * hy);
                edges.push(Edge::new(
                    idx(ix, iy),
                    idx((ix + 1) % nx, iy),
                    (-potential.eval(xm, y)).exp() * hy / hx,
                    txx.eval(xm, y),
                ));
                edges.push(Edge::new(
                    idx(ix, iy),
                    idx(ix, (iy + 1) % ny),
                    (-potential.eval(x, ym)).exp() * hx / hy,
                    tyy.eval(x, ym),
                ));
            }
        }
        let domain = WeightedDomain::new(mu, edges, format!("periodic_grid({nx}x{ny})"))?;
        Ok(PeriodicGrid {
            nx,
            ny,
            txx,
            tyy,
            potential,
            domain,
        })
    }

    pub fn coords(&self, vertex: usize) -> (f64, f64) {
        (
            (vertex % self.nx) as f64 / self.nx as f64,
            (vertex / self.nx) as f64 / self.ny as f64,
        )
    }

    /// Samples `g(x, y)` at every vertex.
    pub fn sample(&self, g: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..self.domain.n())
            .map(|v| {
                let (x, y) = self.coords(v);
                g(x, y)
            })
            .collect()
    }
}

//! Discrete weighted drift-diffusion and p-Laplacian heat flows, with
//! parabolic frequency functionals and checkers for their monotonicity,
//! growth and rigidity properties.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod check;
pub mod domain;
pub mod error;
pub mod flow;
pub mod frequency;
pub mod operators;
pub mod seed;
pub mod spectrum;
pub mod timefn;

pub use check::CheckResult;
pub use domain::{build_domain, vertex_energy_density, DomainSpec, Edge, MeasureSpec, PeriodicGrid, WeightedDomain};
pub use error::{Error, Result};
pub use flow::{run_flow, EquationKind, EquationSpec, Integrator, RunOptions, TimeGrid, Trajectory};
pub use frequency::{frequency_series, FrequencySeries};
pub use timefn::TimeFunction;

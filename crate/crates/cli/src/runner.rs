use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use parafreq_core::frequency::{
    check_backward_uniqueness, check_growth_bound, check_invariants, check_log_convexity, check_log_derivative,
    check_monotonicity, check_perturbed_linear, check_perturbed_p, check_rigidity, RigidityTolerances, StepTolerance,
    ANCHOR_MONOTONICITY,
};
use parafreq_core::{
    frequency_series, run_flow, CheckResult, Error, FrequencySeries, Integrator, RunOptions, Trajectory,
};
use thiserror::Error;

use crate::config::{CheckName, CheckRequest, Injection, Scenario};
use crate::report::{emit_report, Format, Report};

/// Spectral trajectories are exact up to rounding.
pub const SPECTRAL_MONOTONICITY_TOL: f64 = 1e-10;
pub const LOG_CONVEXITY_TOL: f64 = 1e-8;
pub const LOG_DERIVATIVE_FACTOR: f64 = 10.0;
/// Admissible shrink factor of monotonicity violations under dt halving.
pub const REFINEMENT_RATIO: (f64, f64) = (1.5, 3.0);

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(
    path: &Path,
    write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<(), RunError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write(&mut out).and_then(|_| out.flush()).map_err(io_err(path))
}

/// Failed `integration` pseudo-check for a solver error.
pub fn integration_failure(err: &Error) -> CheckResult {
    let step = match err {
        Error::AtStep { step, .. } => Some(*step),
        _ => None,
    };
    CheckResult::new("integration", "solver", f64::INFINITY, 0.0, step)
}

/// Default monotonicity tolerance: rounding level for spectral runs and
/// the per-step `c · dt + floor` otherwise.
pub fn monotonicity_tolerance(traj: &Trajectory) -> f64 {
    if traj.integrator == Integrator::Spectral {
        SPECTRAL_MONOTONICITY_TOL
    } else {
        StepTolerance::default().at(traj.dt())
    }
}

/// Shrink factor of monotonicity violations `max_k (U_k − U_{k+1})` from a
/// run to its halved-step companion. Without a violation in either run
/// there is nothing to shrink and the check passes with the larger
/// (nonpositive) defect as its violation.
pub fn monotonicity_refinement(coarse: &FrequencySeries, fine: &FrequencySeries) -> parafreq_core::Result<CheckResult> {
    let vc = check_monotonicity(coarse, 0.0)?.worst_violation;
    let vf = check_monotonicity(fine, 0.0)?.worst_violation;
    let violation = if vc <= 0.0 && vf <= 0.0 {
        vc.max(vf)
    } else {
        let ratio = vc / vf;
        let (lo, hi) = REFINEMENT_RATIO;
        if ratio.is_nan() {
            f64::NAN
        } else {
            (lo - ratio).max(ratio - hi)
        }
    };
    Ok(CheckResult::new(
        "monotonicity_refinement",
        ANCHOR_MONOTONICITY,
        violation,
        0.0,
        None,
    ))
}

/// Ratio of the monotonicity margins `min_k (U_{k+1} − U_k)` of a run and
/// its halved-step companion, when both are strictly positive.
pub fn margin_ratio(coarse: &FrequencySeries, fine: &FrequencySeries) -> parafreq_core::Result<Option<f64>> {
    let vc = check_monotonicity(coarse, 0.0)?.worst_violation;
    let vf = check_monotonicity(fine, 0.0)?.worst_violation;
    Ok((vc < 0.0 && vf < 0.0).then(|| vc / vf))
}

/// Replaces the principal tolerance and recomputes `pass`.
pub fn with_tolerance(mut c: CheckResult, tol: f64) -> CheckResult {
    c.tolerance = tol;
    c.pass = c.worst_violation <= tol;
    c
}

struct Context<'a> {
    scenario: &'a Scenario,
    traj: &'a Trajectory,
    series: &'a FrequencySeries,
    companion: Option<&'a FrequencySeries>,
    lambda: Option<f64>,
}

fn evaluate(req: CheckRequest, ctx: &Context) -> parafreq_core::Result<Vec<CheckResult>> {
    let s = ctx.series;
    let tol = req.tol;
    let over = |c: CheckResult| match tol {
        Some(t) => with_tolerance(c, t),
        None => c,
    };
    Ok(match req.name {
        CheckName::Invariants => vec![over(check_invariants(s))],
        CheckName::Monotonicity => {
            let mut out = vec![check_monotonicity(
                s,
                tol.unwrap_or_else(|| monotonicity_tolerance(ctx.traj)),
            )?];
            if let Some(fine) = ctx.companion {
                if ctx.traj.integrator != Integrator::Spectral {
                    out.push(monotonicity_refinement(s, fine)?);
                }
            }
            out
        }
        CheckName::LogDerivative => check_log_derivative(s, tol.unwrap_or(LOG_DERIVATIVE_FACTOR), ctx.companion)?,
        CheckName::LogConvexity => vec![check_log_convexity(s, tol.unwrap_or(LOG_CONVEXITY_TOL))?],
        CheckName::GrowthBound => vec![over(check_growth_bound(s)?)],
        CheckName::Rigidity => {
            let lambda = ctx
                .lambda
                .ok_or_else(|| Error::Precondition("rigidity needs an eigenvalue for the initial data".into()))?;
            let mut t = if s.p == 2.0 {
                RigidityTolerances::linear()
            } else {
                RigidityTolerances::p()
            };
            if let Some(v) = tol {
                t.frequency = v;
                t.field = v;
            }
            check_rigidity(&ctx.scenario.domain, s, ctx.traj, lambda, t)?
        }
        CheckName::PerturbedLinear => check_perturbed_linear(s, step_tolerance(tol))?,
        CheckName::PerturbedP => check_perturbed_p(s, step_tolerance(tol))?,
        CheckName::BackwardUniqueness => vec![over(check_backward_uniqueness(s))],
    })
}

fn step_tolerance(c: Option<f64>) -> StepTolerance {
    let mut t = StepTolerance::default();
    if let Some(c) = c {
        t.c = c;
    }
    t
}

/// Runs one scenario into `out_dir`, writing `frequency.csv`,
/// `trajectory.csv`, `trajectory.json` and `report.json`.
pub fn run_scenario(scenario: &Scenario, out_dir: &Path) -> Result<Report, RunError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut report = Report::new(scenario.seed);
    report.scenario = Some(scenario.config.clone());
    let cfg = &scenario.config;
    let opts = RunOptions {
        integrator: cfg.integrator,
        newton: cfg.solver.into(),
        ..Default::default()
    };

    let clock = Instant::now();
    let computed = (|| {
        let init = scenario.initial_data()?;
        let traj = run_flow(&scenario.domain, &scenario.equation, &init.u0, scenario.grid, &opts)?;
        let mut companions = Vec::new();
        for level in 1..cfg.time.refinement_levels {
            let grid = scenario.grid.refined(1 << level);
            let fine = run_flow(&scenario.domain, &scenario.equation, &init.u0, grid, &opts)?;
            companions.push(frequency_series(&scenario.domain, &fine)?);
        }
        let series = frequency_series(&scenario.domain, &traj)?;
        Ok::<_, Error>((init, traj, series, companions))
    })();
    report.time("integration", clock.elapsed().as_secs_f64());

    let (init, traj, mut series, companions) = match computed {
        Ok(x) => x,
        Err(e) => {
            report.diagnostics.push(format!("integration failed: {e}"));
            report.checks.push(integration_failure(&e));
            return finish(report, out_dir);
        }
    };
    report
        .diagnostics
        .push(format!("max step residual {:e}", traj.max_step_residual()));

    if let Some(self_test) = cfg.self_test {
        match self_test.inject {
            Injection::DecreasingFrequency => {
                let start = series.u[0].min(0.0);
                let fake = (0..series.len()).map(|k| start - 0.01 * k as f64).collect();
                series = series.with_frequencies(fake).expect("same length");
                report
                    .diagnostics
                    .push("self-test: frequencies replaced by a decreasing series".into());
            }
        }
    }

    let clock = Instant::now();
    let ctx = Context {
        scenario,
        traj: &traj,
        series: &series,
        companion: companions.first(),
        lambda: init.lambda,
    };
    let mut requests = cfg.checks.clone();
    requests.sort_by_key(|r| r.name);
    for req in requests {
        match evaluate(req, &ctx) {
            Ok(results) => report.checks.extend(results),
            Err(e) => {
                report.diagnostics.push(format!("{}: {e}", req.name.as_str()));
                report.checks.push(CheckResult::new(
                    req.name.as_str(),
                    "precondition",
                    f64::INFINITY,
                    req.tol.unwrap_or(0.0),
                    None,
                ));
            }
        }
    }
    report.time("checks", clock.elapsed().as_secs_f64());

    let path = out_dir.join("frequency.csv");
    write_file(&path, |w| series.write_csv(w))?;
    report.artifacts.push(path.display().to_string());
    for (level, fine) in companions.iter().enumerate() {
        let path = out_dir.join(format!("frequency_refined_{}.csv", level + 1));
        write_file(&path, |w| fine.write_csv(w))?;
        report.artifacts.push(path.display().to_string());
    }
    let path = out_dir.join("trajectory.csv");
    write_file(&path, |w| traj.write_csv(w))?;
    report.artifacts.push(path.display().to_string());
    let path = out_dir.join("trajectory.json");
    write_file(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &traj.metadata())?;
        writeln!(w)
    })?;
    report.artifacts.push(path.display().to_string());
    finish(report, out_dir)
}

fn finish(mut report: Report, out_dir: &Path) -> Result<Report, RunError> {
    let path = out_dir.join("report.json");
    report.artifacts.push(path.display().to_string());
    report.finish();
    let json = emit_report(&report, Format::Json);
    write_file(&path, |w| w.write_all(json.as_bytes()))?;
    Ok(report)
}

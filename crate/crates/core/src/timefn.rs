//! Scalar functions of time used as zeroth-order coefficients and
//! perturbation envelopes.
//!
//! Integrals, squared integrals and suprema are evaluated in closed form
//! for the analytic kinds. Piecewise-linear functions are integrated
//! segment by segment; Simpson's rule is exact for the squared integrand
//! on each segment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeFunction {
    Constant {
        value: f64,
    },
    Linear {
        slope: f64,
        intercept: f64,
    },
    /// `offset + amplitude * sin(omega * t + phase)`.
    Sinusoid {
        amplitude: f64,
        omega: f64,
        phase: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Linear interpolation between knots, held constant outside them.
    PiecewiseLinear {
        knots: Vec<(f64, f64)>,
    },
}

impl TimeFunction {
    pub fn zero() -> Self {
        TimeFunction::Constant { value: 0.0 }
    }

    pub fn constant(value: f64) -> Self {
        TimeFunction::Constant { value }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |x: f64, what: &str| {
            if x.is_finite() {
                Ok(())
            } else {
                Err(Error::Parameter(format!("time function {what} must be finite")))
            }
        };
        match self {
            TimeFunction::Constant { value } => finite(*value, "value"),
            TimeFunction::Linear { slope, intercept } => {
                finite(*slope, "slope")?;
                finite(*intercept, "intercept")
            }
            TimeFunction::Sinusoid {
                amplitude,
                omega,
                phase,
                offset,
            } => {
                finite(*amplitude, "amplitude")?;
                finite(*omega, "omega")?;
                finite(*phase, "phase")?;
                finite(*offset, "offset")
            }
            TimeFunction::PiecewiseLinear { knots } => {
                if knots.is_empty() {
                    return Err(Error::Parameter(
                        "piecewise-linear function needs at least one knot".into(),
                    ));
                }
                for (t, v) in knots {
                    finite(*t, "knot time")?;
                    finite(*v, "knot value")?;
                }
                if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(Error::Parameter(
                        "piecewise-linear knots must be strictly increasing".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFunction::Constant { value } => *value,
            TimeFunction::Linear { slope, intercept } => slope * t + intercept,
            TimeFunction::Sinusoid {
                amplitude,
                omega,
                phase,
                offset,
            } => offset + amplitude * (omega * t + phase).sin(),
            TimeFunction::PiecewiseLinear { knots } => {
                let first = knots[0];
                let last = knots[knots.len() - 1];
                if t <= first.0 {
                    return first.1;
                }
                if t >= last.0 {
                    return last.1;
                }
                let idx = knots.partition_point(|k| k.0 <= t);
                let (t0, v0) = knots[idx - 1];
                let (t1, v1) = knots[idx];
                v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            }
        }
    }

    /// Points in `[a, b]` between which the function is linear.
    fn breakpoints(knots: &[(f64, f64)], a: f64, b: f64) -> Vec<f64> {
        let mut pts = vec![a];
        pts.extend(knots.iter().map(|k| k.0).filter(|&t| t > a && t < b));
        pts.push(b);
        pts
    }

    /// `∫_a^b g(t) dt`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            TimeFunction::Constant { value } => value * (b - a),
            TimeFunction::Linear { slope, intercept } => 0.5 * slope * (b * b - a * a) + intercept * (b - a),
            TimeFunction::Sinusoid {
                amplitude,
                omega,
                phase,
                offset,
            } => {
                let osc = if *omega == 0.0 {
                    phase.sin() * (b - a)
                } else {
                    -((omega * b + phase).cos() - (omega * a + phase).cos()) / omega
                };
                offset * (b - a) + amplitude * osc
            }
            TimeFunction::PiecewiseLinear { knots } => Self::breakpoints(knots, a, b)
                .windows(2)
                .map(|w| 0.5 * (w[1] - w[0]) * (self.eval(w[0]) + self.eval(w[1])))
                .sum(),
        }
    }

    /// `∫_a^b g(t)² dt`.
    pub fn integral_sq(&self, a: f64, b: f64) -> f64 {
        match self {
            TimeFunction::Constant { value } => value * value * (b - a),
            TimeFunction::Linear { slope, intercept } => {
                if *slope == 0.0 {
                    intercept * intercept * (b - a)
                } else {
                    let ga = self.eval(a);
                    let gb = self.eval(b);
                    (gb * gb * gb - ga * ga * ga) / (3.0 * slope)
                }
            }
            TimeFunction::Sinusoid {
                amplitude,
                omega,
                phase,
                offset,
            } => {
                let len = b - a;
                let (int_s, int_s2) = if *omega == 0.0 {
                    let s = phase.sin();
                    (s * len, s * s * len)
                } else {
                    let xa = omega * a + phase;
                    let xb = omega * b + phase;
                    (
                        -(xb.cos() - xa.cos()) / omega,
                        0.5 * len - ((2.0 * xb).sin() - (2.0 * xa).sin()) / (4.0 * omega),
                    )
                };
                offset * offset * len + 2.0 * offset * amplitude * int_s + amplitude * amplitude * int_s2
            }
            TimeFunction::PiecewiseLinear { knots } => Self::breakpoints(knots, a, b)
                .windows(2)
                .map(|w| {
                    let g0 = self.eval(w[0]);
                    let g1 = self.eval(w[1]);
                    let gm = self.eval(0.5 * (w[0] + w[1]));
                    (w[1] - w[0]) / 6.0 * (g0 * g0 + 4.0 * gm * gm + g1 * g1)
                })
                .sum(),
        }
    }

    /// Candidate extremum locations in `[a, b]`.
    fn critical_points(&self, a: f64, b: f64) -> Vec<f64> {
        let mut pts = vec![a, b];
        match self {
            TimeFunction::Sinusoid { omega, phase, .. } if *omega != 0.0 => {
                // sin is extremal where omega*t + phase = pi/2 + k*pi.
                let half_pi = std::f64::consts::FRAC_PI_2;
                let pi = std::f64::consts::PI;
                let (xa, xb) = {
                    let xa = omega * a + phase;
                    let xb = omega * b + phase;
                    (xa.min(xb), xa.max(xb))
                };
                let mut k = ((xa - half_pi) / pi).ceil();
                while half_pi + k * pi <= xb {
                    pts.push((half_pi + k * pi - phase) / omega);
                    k += 1.0;
                }
            }
            TimeFunction::PiecewiseLinear { knots } => {
                pts.extend(knots.iter().map(|k| k.0).filter(|&t| t > a && t < b));
            }
            _ => {}
        }
        pts
    }

    pub fn sup(&self, a: f64, b: f64) -> f64 {
        self.critical_points(a, b)
            .into_iter()
            .map(|t| self.eval(t))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn inf(&self, a: f64, b: f64) -> f64 {
        self.critical_points(a, b)
            .into_iter()
            .map(|t| self.eval(t))
            .fold(f64::INFINITY, f64::min)
    }

    /// Whether the function is nondecreasing on `[a, b]`.
    pub fn is_nondecreasing(&self, a: f64, b: f64) -> bool {
        match self {
            TimeFunction::Constant { .. } => true,
            TimeFunction::Linear { slope, .. } => *slope >= 0.0,
            TimeFunction::Sinusoid {
                amplitude,
                omega,
                phase,
                ..
            } => {
                if *amplitude == 0.0 || *omega == 0.0 {
                    return true;
                }
                // derivative amplitude*omega*cos(omega*t + phase) must stay >= 0;
                // its extrema sit at the endpoints or where cos = ±1.
                let deriv = |t: f64| amplitude * omega * (omega * t + phase).cos();
                let pi = std::f64::consts::PI;
                let xa = (omega * a + phase).min(omega * b + phase);
                let xb = (omega * a + phase).max(omega * b + phase);
                let mut pts = vec![a, b];
                let mut k = (xa / pi).ceil();
                while k * pi <= xb {
                    pts.push((k * pi - phase) / omega);
                    k += 1.0;
                }
                pts.into_iter().all(|t| deriv(t) >= -1e-14 * (amplitude * omega).abs())
            }
            TimeFunction::PiecewiseLinear { .. } => {
                let pts = self.critical_points(a, b);
                let mut vals: Vec<(f64, f64)> = pts.into_iter().map(|t| (t, self.eval(t))).collect();
                vals.sort_by(|x, y| x.0.total_cmp(&y.0));
                vals.windows(2).all(|w| w[1].1 >= w[0].1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson(g: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = g(a) + g(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * g(a + i as f64 * h);
        }
        s * h / 3.0
    }

    fn samples() -> Vec<TimeFunction> {
        vec![
            TimeFunction::constant(0.7),
            TimeFunction::Linear {
                slope: -1.3,
                intercept: 0.4,
            },
            TimeFunction::Sinusoid {
                amplitude: 0.3,
                omega: 5.0,
                phase: 0.2,
                offset: 0.35,
            },
            TimeFunction::PiecewiseLinear {
                knots: vec![(0.1, 0.0), (0.4, 1.0), (0.9, 0.2)],
            },
        ]
    }

    #[test]
    fn integrals_match_fine_simpson() {
        for f in samples() {
            let (a, b) = (0.0, 1.3);
            let reference = simpson(|t| f.eval(t), a, b, 200_000);
            assert!((f.integral(a, b) - reference).abs() < 1e-9, "{f:?}");
            let reference_sq = simpson(|t| f.eval(t).powi(2), a, b, 200_000);
            assert!((f.integral_sq(a, b) - reference_sq).abs() < 1e-9, "{f:?}");
        }
    }

    #[test]
    fn sup_and_inf_match_dense_sampling() {
        for f in samples() {
            let (a, b) = (0.0, 1.3);
            let grid: Vec<f64> = (0..=100_000).map(|i| f.eval(a + (b - a) * i as f64 / 1e5)).collect();
            let smax = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let smin = grid.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(f.sup(a, b) >= smax - 1e-12 && f.sup(a, b) - smax < 1e-4, "{f:?}");
            assert!(f.inf(a, b) <= smin + 1e-12 && smin - f.inf(a, b) < 1e-4, "{f:?}");
        }
    }

    #[test]
    fn monotonicity_classification() {
        assert!(TimeFunction::Linear {
            slope: 1.0,
            intercept: 0.0
        }
        .is_nondecreasing(0.0, 1.0));
        assert!(!TimeFunction::Linear {
            slope: -1.0,
            intercept: 0.0
        }
        .is_nondecreasing(0.0, 1.0));
        let s = TimeFunction::Sinusoid {
            amplitude: 1.0,
            omega: 1.0,
            phase: 0.0,
            offset: 0.0,
        };
        assert!(s.is_nondecreasing(0.0, 1.5));
        assert!(!s.is_nondecreasing(0.0, 2.0));
        let pw = TimeFunction::PiecewiseLinear {
            knots: vec![(0.0, 0.0), (1.0, 1.0), (2.0, 0.5)],
        };
        assert!(pw.is_nondecreasing(0.0, 1.0));
        assert!(!pw.is_nondecreasing(0.0, 2.0));
    }

    #[test]
    fn piecewise_knots_must_increase() {
        let bad = TimeFunction::PiecewiseLinear {
            knots: vec![(0.0, 0.0), (0.0, 1.0)],
        };
        assert!(bad.validate().is_err());
    }
}

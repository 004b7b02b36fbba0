use serde::{Deserialize, Serialize};

/// Outcome of one named verification check.
///
/// `pass` is always `worst_violation <= tolerance`; a NaN violation fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub anchor: String,
    pub pass: bool,
    pub worst_violation: f64,
    pub tolerance: f64,
    pub location: Option<usize>,
}

impl CheckResult {
    pub fn new(
        name: impl Into<String>,
        anchor: impl Into<String>,
        worst_violation: f64,
        tolerance: f64,
        location: Option<usize>,
    ) -> Self {
        CheckResult {
            name: name.into(),
            anchor: anchor.into(),
            pass: worst_violation <= tolerance,
            worst_violation,
            tolerance,
            location,
        }
    }

    /// Largest violation in `values` with its index; NaN dominates.
    pub fn from_violations(
        name: impl Into<String>,
        anchor: impl Into<String>,
        values: impl IntoIterator<Item = (usize, f64)>,
        tolerance: f64,
    ) -> Self {
        let mut worst = f64::NEG_INFINITY;
        let mut at = None;
        for (k, v) in values {
            if v.is_nan() {
                return Self::new(name, anchor, f64::NAN, tolerance, Some(k));
            }
            if v > worst {
                worst = v;
                at = Some(k);
            }
        }
        Self::new(name, anchor, worst, tolerance, at)
    }

    /// Renames the check, keeping everything else.
    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_iff_within_tolerance() {
        assert!(CheckResult::new("a", "x", 1e-12, 1e-10, None).pass);
        assert!(!CheckResult::new("a", "x", 0.1, 1e-10, Some(0)).pass);
        assert!(!CheckResult::new("a", "x", f64::NAN, 1.0, None).pass);
    }

    #[test]
    fn worst_violation_and_location() {
        let r = CheckResult::from_violations("m", "x", [(0, -1.0), (1, 0.3), (2, 0.2)], 0.0);
        assert_eq!(r.worst_violation, 0.3);
        assert_eq!(r.location, Some(1));
        assert!(!r.pass);
        let nan = CheckResult::from_violations("m", "x", [(0, 0.0), (1, f64::NAN)], 1.0);
        assert!(!nan.pass);
        assert_eq!(nan.location, Some(1));
    }
}

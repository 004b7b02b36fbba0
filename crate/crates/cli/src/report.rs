use parafreq_core::CheckResult;
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

/// Outcome of a scenario run or suite, in serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suite: Option<String>,
    pub pass: bool,
    pub checks: Vec<CheckResult>,
    pub artifacts: Vec<String>,
    pub timings: Vec<Timing>,
    pub diagnostics: Vec<String>,
}

impl Report {
    pub fn new(seed: u64) -> Self {
        Report {
            version: VERSION.to_string(),
            seed,
            scenario: None,
            suite: None,
            pass: true,
            checks: Vec::new(),
            artifacts: Vec::new(),
            timings: Vec::new(),
            diagnostics: Vec::new(),
        }
    }

    /// Recomputes `pass` from the checks.
    pub fn finish(&mut self) {
        self.pass = self.checks.iter().all(|c| c.pass);
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.pass).count()
    }

    pub fn time(&mut self, stage: impl Into<String>, seconds: f64) {
        self.timings.push(Timing {
            stage: stage.into(),
            seconds,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Text,
}

pub fn emit_report(report: &Report, format: Format) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        Format::Text => text_table(&report.checks),
    }
}

fn number(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else {
        format!("{x:.3e}")
    }
}

/// Fixed-width table sorted by check name, failing rows marked.
pub fn text_table(checks: &[CheckResult]) -> String {
    let mut rows: Vec<&CheckResult> = checks.iter().collect();
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    let header = ["check", "anchor", "worst_violation", "tolerance", "location", "status"];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|c| {
            [
                c.name.clone(),
                c.anchor.clone(),
                number(c.worst_violation),
                number(c.tolerance),
                c.location.map_or("-".to_string(), |l| l.to_string()),
                if c.pass {
                    "pass".to_string()
                } else {
                    "FAIL <<".to_string()
                },
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for row in &cells {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |row: [&str; 6]| {
        let mut s = String::new();
        for (k, cell) in row.iter().enumerate() {
            // text columns flush left, numbers flush right
            if (2..=4).contains(&k) {
                s.push_str(&format!("{cell:>w$}  ", w = width[k]));
            } else {
                s.push_str(&format!("{cell:<w$}  ", w = width[k]));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (width.len() - 1)));
    out.push('\n');
    for row in &cells {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3], &row[4], &row[5]]));
    }
    let failed = rows.iter().filter(|c| !c.pass).count();
    if failed == 0 {
        out.push_str("ALL CHECKS PASSED\n");
    } else {
        out.push_str(&format!("{failed} FAILED\n"));
    }
    out
}

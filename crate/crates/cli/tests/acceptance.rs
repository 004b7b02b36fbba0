//! Acceptance criteria 1 to 14 at full size, one line per criterion.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use parafreq::suite::{run_criteria, SizeClass};

const SEED: u64 = 42;
const TOOLING_BUDGET: Duration = Duration::from_secs(60);

fn summary(checks: &[parafreq_core::CheckResult]) -> String {
    checks
        .iter()
        .map(|c| {
            format!(
                "{}={:.2e}/{:.1e}{}",
                c.name,
                c.worst_violation,
                c.tolerance,
                if c.pass { "" } else { "!" }
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Every CSV under `dir`, keyed by relative path.
fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable output") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let key = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn tooling() -> (bool, String) {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut elapsed = Vec::new();
    let mut codes = Vec::new();
    for run in ["first", "second"] {
        let clock = Instant::now();
        let status = Command::new(env!("CARGO_BIN_EXE_parafreq"))
            .args(["verify", "--suite", "small", "--seed", &SEED.to_string(), "--out", run])
            .current_dir(dir.path())
            .output()
            .expect("binary runs")
            .status;
        elapsed.push(clock.elapsed());
        codes.push(status.code());
    }
    let a = csv_files(&dir.path().join("first"));
    let b = csv_files(&dir.path().join("second"));
    let identical = !a.is_empty() && a == b;
    let fast = elapsed.iter().all(|e| *e <= TOOLING_BUDGET);
    let pass = codes.iter().all(|c| *c == Some(0)) && identical && fast;
    let detail = format!(
        "exit codes {codes:?}, {:.1}s and {:.1}s, {} CSV files {}",
        elapsed[0].as_secs_f64(),
        elapsed[1].as_secs_f64(),
        a.len(),
        if identical { "byte-identical" } else { "DIFFER" }
    );
    (pass, detail)
}

fn main() {
    let run = run_criteria(SEED, SizeClass::Full);
    let mut failed = Vec::new();
    for c in &run.criteria {
        let checks = c.checks();
        let pass = c.pass() && c.within_budget();
        let budget = c
            .budget
            .map_or(String::new(), |b| format!(" (budget {}s)", b.as_secs()));
        println!(
            "criterion {:2} {}: {} [{} scenarios, {:.2}s{budget}] {}",
            c.id,
            c.title,
            if pass { "PASS" } else { "FAIL" },
            c.scenarios(),
            c.elapsed.as_secs_f64(),
            summary(&checks)
        );
        for note in &c.notes {
            println!("    {note}");
        }
        if !pass {
            failed.push(c.id);
        }
    }
    for d in &run.diagnostics {
        println!("    diagnostic: {d}");
    }
    let (pass, detail) = tooling();
    println!(
        "criterion 14 tooling: {} [{detail}]",
        if pass { "PASS" } else { "FAIL" }
    );
    if !pass {
        failed.push(14);
    }
    if failed.is_empty() {
        println!("acceptance: all 14 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

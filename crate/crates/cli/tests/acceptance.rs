//! Acceptance suite: runs every criterion through `full-suite` and prints one
//! PASS/FAIL line per criterion. Exits nonzero if any criterion fails.

use std::process::ExitCode;

use berezin_cli::config::{Command, ExperimentConfig};
use berezin_cli::report::{Check, Relation};
use berezin_cli::run::execute;

fn describe(c: &Check) -> String {
    let value = if c.relation == Relation::Equal && c.tolerance == 1.0 {
        (if c.passed { "holds" } else { "violated" }).to_string()
    } else {
        format!("{:.3e} {} {:.1e}", c.value, c.relation.symbol(), c.tolerance)
    };
    if c.note.is_empty() {
        format!("{} {value}", c.name)
    } else {
        format!("{} {value} ({})", c.name, c.note)
    }
}

fn main() -> ExitCode {
    let mut cfg = ExperimentConfig::default();
    let out = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    cfg.output.cache = Some(out.join("cache"));
    cfg.output.dir = out;
    let report = match execute(Command::FullSuite, &cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("acceptance suite aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    for crit in &report.criteria {
        let checks: Vec<String> = report.checks.iter().filter(|c| c.criterion == crit.id).map(describe).collect();
        let mark = if crit.passed { "PASS" } else { "FAIL" };
        println!("[{mark}] {:>2} {}: {}", crit.id, crit.title, checks.join("; "));
    }
    let failed = report.criteria.iter().filter(|c| !c.passed).count();
    println!(
        "acceptance: {} of {} criteria pass ({:.0} s)",
        report.criteria.len() - failed,
        report.criteria.len(),
        report.volatile.total_ms as f64 / 1000.0
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Acceptance suite: one line per check, then a single verdict.

use std::io::Write;

use vsi_strain::repro::CHECKS;

#[test]
fn acceptance_criteria() {
    let mut failed = Vec::new();
    // Written straight to stdout so the table shows without --nocapture.
    let mut out = std::io::stdout();
    writeln!(out).unwrap();
    for check in CHECKS {
        let row = check();
        writeln!(out, "{}", row.line()).unwrap();
        out.flush().unwrap();
        if !row.informational && !row.passed {
            failed.push(row.id);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}

//! Shared helpers for the acceptance suite.

use std::io::Write;

/// Print a one-line verdict for an acceptance criterion.
///
/// Written straight to the process's stderr handle so the line shows up in
/// test output even for passing tests, whose `print!` output is captured.
pub fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("[acceptance] criterion {criterion}: {verdict} | {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

//! Runs the twelve acceptance criteria and prints one line per criterion.
//!
//! The test fails if a criterion fails without a recorded deviation.

use esb_core::acceptance::{run_suite, Suite, CRITERIA};

#[test]
fn acceptance_suite() {
    let seed = std::env::var("ESB_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let report = run_suite(Suite::Fast, seed).expect("acceptance suite ran");
    assert_eq!(report.results.len(), CRITERIA as usize);
    for r in &report.results {
        println!("{r}");
    }
    let passed = report.results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} criteria passed", report.results.len());
    let unexplained: Vec<_> = report.results.iter().filter(|r| !r.accounted_for()).map(|r| r.id).collect();
    assert!(unexplained.is_empty(), "criteria failed: {unexplained:?}");
}

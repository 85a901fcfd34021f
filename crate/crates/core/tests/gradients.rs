//! Every differentiable operation and the composed models against central
//! differences, in 64-bit, over 100 seeds each.

#[path = "support/grad_cases.rs"]
mod grad_cases;

const SEEDS: u64 = 100;
const TOLERANCE: f64 = 1e-5;

#[test]
fn every_case_matches_central_differences() {
    let mut failures = Vec::new();
    for case in grad_cases::all() {
        let (worst, seed) = grad_cases::worst_over_seeds(&case, SEEDS).unwrap_or_else(|e| panic!("{}: {e}", case.name));
        if worst >= TOLERANCE {
            failures.push(format!("{}: {worst:.3e} at seed {seed}", case.name));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches:\n{}", failures.join("\n"));
}

//! End-to-end acceptance battery: every criterion prints one pass/fail line
//! with the measured quantities; the suite fails if any criterion fails.
//!
//! Runtime-bounded criteria check their own wall-clock budgets.

use hypchain::pipeline::acceptance_battery;

#[test]
fn acceptance_criteria() {
    let results = acceptance_battery(false);
    let mut all_pass = true;
    for r in &results {
        println!("{}", r.line());
        all_pass &= r.pass;
    }
    // Runtime budgets for the bounded criteria.
    let budget = [
        (1usize, 10.0f64),
        (2, 60.0),
        (5, 60.0),
        (6, 120.0),
    ];
    for (idx, limit) in budget {
        let r = results.iter().find(|r| r.index == idx).unwrap();
        assert!(
            r.seconds < limit,
            "criterion {idx} exceeded its {limit}s budget: {:.1}s",
            r.seconds
        );
    }
    assert!(all_pass, "acceptance criteria failed; see lines above");
}

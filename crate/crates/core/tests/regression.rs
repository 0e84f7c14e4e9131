//! Success-factor regression on records drawn from a known sparse model.

use advdet_core::evaluation::{fit_success_factors, LogisticOptions};

mod support;

use support::sparse_records;

#[test]
fn fixed_strength_fit_recovers_support() {
    let mut hits = 0;
    for seed in 0..20 {
        let records = sparse_records(1000, seed);
        let fit = fit_success_factors(&records, Some(0.05), &LogisticOptions::default()).unwrap();
        let mut selected = fit.selected_covariates();
        selected.sort();
        hits += (selected == ["detector", "distance"]) as usize;
    }
    assert!(hits >= 19, "{hits}/20");
}

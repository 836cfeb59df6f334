mod common;

use shiftshare::counterfactual::{equalize_taxes, run_counterfactual, CounterfactualSpec};
use shiftshare::panel::TaxField;
use shiftshare::regression::RegressionSpec;
use shiftshare::simulator::{generate_policies, SimConfig, TaxProcess, TruthParams};
use shiftshare::workflow::BaselineOptions;

use common::*;

#[test]
fn equalised_rate_is_the_cross_state_mean() {
    let cfg = SimConfig { n_zones: 48, n_states: 48, n_years: 5, ..Default::default() };
    let p = generate_policies(&cfg).unwrap();
    let eq = equalize_taxes(&p, TaxField::Atr95, Some(&[2001, 2003])).unwrap();
    for t in 0..5 {
        let mut mean = 0.0;
        for s in 0..48 {
            mean += p.row(s, t).tax(TaxField::Atr95);
        }
        mean /= 48.0;
        let touched = t == 1 || t == 3;
        for s in 0..48 {
            let (before, after) = (p.row(s, t), eq.row(s, t));
            let want = if touched { mean } else { before.tax(TaxField::Atr95) };
            assert!((after.tax(TaxField::Atr95) - want).abs() < 1e-15);
            assert_eq!(after.tax(TaxField::Mtr), before.tax(TaxField::Mtr));
            assert_eq!(after.citr, before.citr);
        }
    }
    assert!(equalize_taxes(&p, TaxField::Atr95, Some(&[1999])).is_err());
}

#[test]
fn already_equal_rates_leave_policies_unchanged() {
    let paths = vec![vec![0.3, 0.25, 0.2]; 3];
    let cfg = SimConfig {
        n_zones: 6,
        n_states: 3,
        n_years: 3,
        tax_process: TaxProcess::Scripted { paths },
        ..Default::default()
    };
    let p = generate_policies(&cfg).unwrap();
    assert_eq!(equalize_taxes(&p, TaxField::Atr95, None).unwrap(), p);
}

#[test]
fn cutting_a_state_rate_raises_its_predicted_inflows() {
    // State 0 stays low, state 1 high; equalising lowers state 1's rate.
    let paths =
        vec![(0..10).map(|t| 0.10 + 0.012 * t as f64).collect(), (0..10).map(|t| 0.45 - 0.012 * t as f64).collect()];
    let cfg = SimConfig {
        n_zones: 40,
        n_states: 2,
        n_years: 10,
        tax_process: TaxProcess::Scripted { paths },
        ..Default::default()
    };
    let w = world(&cfg, &TruthParams::default());
    let b = baseline(&w);
    let spec = CounterfactualSpec {
        all: RegressionSpec::baseline("y_all"),
        external: RegressionSpec::baseline("y_external"),
        field: TaxField::Atr95,
        years: None,
    };
    assert!((b.choice.eta - 0.5).abs() < 3.0 * b.choice.se[0]);
    let r = run_counterfactual(&w.panels, &b, &BaselineOptions::default(), &spec).unwrap();
    let before = b.frame.get("b").unwrap();
    let after = r.counterfactual_frame.get("b").unwrap();
    let geo = &w.panels.geo;
    let ny = 10;
    for row in 0..before.len() {
        let state = geo.state_index(row / ny);
        let delta = after[row] - before[row];
        if state == 1 {
            assert!(delta > 0.0, "zone {} t{}: {delta}", row / ny, row % ny);
        } else {
            assert!(delta < 0.0, "zone {} t{}: {delta}", row / ny, row % ny);
        }
    }
}

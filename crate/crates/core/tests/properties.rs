mod common;

use proptest::prelude::*;
use shiftshare::choice::Shares;
use shiftshare::counterfactual::{aggregate_to_state, counterfactual_productivity, equalize_taxes};
use shiftshare::fe::{Absorber, Factor};
use shiftshare::instruments::{build_bartik, Variant};
use shiftshare::iv::{fit_fe_ols, Column, Design};
use shiftshare::panel::{Calendar, FlowPanel, TaxField};
use shiftshare::simulator::{generate_policies, softmax, SimConfig};
use shiftshare::vce::VceMode;

use common::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_keep_index_gaps(idx in prop::collection::vec(-30.0f64..30.0, 2..12)) {
        let p = softmax(&idx);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 1..idx.len() {
            prop_assert!(((p[k] / p[0]).ln() - (idx[k] - idx[0])).abs() < 1e-9);
        }
    }

    #[test]
    fn demeaning_is_idempotent(
        rows in prop::collection::vec((0i64..4, 0i64..5, -10.0f64..10.0), 12..40),
    ) {
        let a: Vec<i64> = rows.iter().map(|r| r.0).collect();
        let b: Vec<i64> = rows.iter().map(|r| r.1).collect();
        let abs = Absorber::new(vec![Factor::from_codes("a", &a), Factor::from_codes("b", &b)], None).unwrap();
        let mut once = vec![rows.iter().map(|r| r.2).collect::<Vec<f64>>()];
        abs.demean(&mut once).unwrap();
        let mut twice = once.clone();
        abs.demean(&mut twice).unwrap();
        prop_assert!(max_abs_diff(&once[0], &twice[0]) < 1e-8);
    }

    #[test]
    fn productivity_components_add_up(
        cells in prop::collection::vec((-50.0f64..50.0, -0.1f64..0.1, 0.0f64..100.0), 1..30),
        phi_all in 0.0f64..0.1,
        phi_ext in 0.0f64..0.1,
        xi in 0.0f64..1.0,
    ) {
        let dm: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let dtax: Vec<f64> = cells.iter().map(|c| c.1).collect();
        let y: Vec<f64> = cells.iter().map(|c| c.2).collect();
        let lny: Vec<f64> = y.iter().map(|v| v.ln_1p()).collect();
        let ch = counterfactual_productivity(phi_all, phi_ext, xi, &dm, &dtax, &y, &lny).unwrap();
        for i in 0..dm.len() {
            let parts = ch.direct[i] + ch.indirect_internal[i] + ch.indirect_external[i];
            prop_assert!((ch.delta_lny[i] - parts).abs() < 1e-12);
            let yparts = ch.delta_y_direct[i] + ch.delta_y_internal[i] + ch.delta_y_external[i];
            prop_assert!((ch.delta_y[i] - yparts).abs() < 1e-9 * ch.delta_y[i].abs().max(1.0));
        }
    }

    #[test]
    fn state_percentages_ignore_outcome_scale(
        y in prop::collection::vec(1.0f64..100.0, 12),
        dm in prop::collection::vec(-20.0f64..20.0, 12),
        scale in 0.01f64..100.0,
    ) {
        let geo = registry(&[(1, "A", 40.0, -90.0), (2, "A", 41.0, -90.0), (3, "B", 35.0, -100.0)]);
        let lny: Vec<f64> = y.iter().map(|v| v.ln_1p()).collect();
        let ch = counterfactual_productivity(0.06, 0.04, 0.5, &dm, &[0.0; 12], &y, &lny).unwrap();
        let mut scaled = ch.clone();
        for v in [&mut scaled.delta_y, &mut scaled.delta_y_direct, &mut scaled.delta_y_internal, &mut scaled.delta_y_external] {
            v.iter_mut().for_each(|x| *x *= scale);
        }
        let ys: Vec<f64> = y.iter().map(|v| v * scale).collect();
        let mask = vec![true; 12];
        let a = aggregate_to_state(&ch, &y, &geo, 4, &mask).unwrap();
        let b = aggregate_to_state(&scaled, &ys, &geo, 4, &mask).unwrap();
        for (s, t) in a.iter().zip(&b) {
            prop_assert!((s.pct_change - t.pct_change).abs() < 1e-12 * s.pct_change.abs().max(1.0));
            prop_assert!((s.direct - t.direct).abs() < 1e-12 * s.direct.abs().max(1.0));
        }
    }

    #[test]
    fn observed_share_instrument_equals_inflows(
        counts in prop::collection::vec(0u32..50, 4 * 4 * 3),
        stays in prop::collection::vec(1u32..100, 4 * 3),
    ) {
        let geo = registry(&[(1, "A", 40.0, -90.0), (2, "A", 41.0, -91.0), (3, "B", 35.0, -100.0), (4, "C", 30.0, -85.0)]);
        let mut f = FlowPanel::empty(4, Calendar::new(2000, 3));
        for t in 0..3 {
            for o in 0..4 {
                let mut out = 0.0;
                for d in (0..4).filter(|&d| d != o) {
                    let c = f64::from(counts[(t * 4 + o) * 4 + d]);
                    f.set_flow(o, d, t, c);
                    out += c;
                }
                let cell = f.cell(o, t);
                f.stays[cell] = f64::from(stays[t * 4 + o]);
                f.stocks[cell] = out + f.stays[cell];
            }
        }
        let b = build_bartik(&Shares::observed(&f), &f.stocks, f.calendar, &geo, Variant::All).unwrap();
        let m = f.inflows();
        for (x, y) in b.values.iter().zip(&m) {
            prop_assert!((x - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn clustered_covariance_is_symmetric_psd(
        rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, 0u32..6), 20..60),
    ) {
        let x1: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let x2: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.0 - r.1 + r.2).collect();
        let g: Vec<u32> = rows.iter().map(|r| r.3).collect();
        prop_assume!(g.iter().any(|&c| c != g[0]));
        let mut d = Design::new(Column::new("y", y));
        d.endogenous = vec![Column::new("x1", x1), Column::new("x2", x2)];
        d.vce = VceMode::Cluster(vec![g]);
        let fit = match fit_fe_ols(&d) {
            Ok(f) => f,
            Err(_) => return Ok(()),
        };
        let v = &fit.vce.matrix;
        prop_assert!((v - v.transpose()).abs().max() < 1e-12 * v.abs().max().max(1e-300));
        prop_assert!(!fit.vce.psd_clipped);
        let eig = v.clone().symmetric_eigen().eigenvalues;
        prop_assert!(eig.iter().all(|&e| e >= -1e-12 * v.abs().max()));
    }

    #[test]
    fn equalising_preserves_the_cross_state_mean(seed in 0u64..1000, n_states in 2usize..12) {
        let cfg = SimConfig { n_zones: n_states, n_states, n_years: 4, seed, ..Default::default() };
        let p = generate_policies(&cfg).unwrap();
        let eq = equalize_taxes(&p, TaxField::Atr95, None).unwrap();
        for t in 0..4 {
            let mean = |q: &shiftshare::panel::PolicyPanel| {
                (0..n_states).map(|s| q.row(s, t).tax(TaxField::Atr95)).sum::<f64>() / n_states as f64
            };
            prop_assert!((mean(&p) - mean(&eq)).abs() < 1e-12);
        }
    }
}

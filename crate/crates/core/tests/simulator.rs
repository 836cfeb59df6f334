mod common;

use shiftshare::montecarlo::replicate;
use shiftshare::panel::write_panels;
use shiftshare::simulator::{SimConfig, TaxProcess, TruthParams};

use common::*;

/// Two zones in two states with no amenity or cost differences.
fn flat_world(tax: [f64; 2], n_years: usize) -> (SimConfig, TruthParams) {
    let cfg = SimConfig {
        n_zones: 2,
        n_states: 2,
        n_years,
        stock_init: 400,
        tax_process: TaxProcess::Scripted { paths: vec![vec![tax[0]; n_years], vec![tax[1]; n_years]] },
        ..Default::default()
    };
    let params = TruthParams {
        amenity_sd: 0.0,
        cost_intercept: 0.0,
        cost_per_1000_miles: 0.0,
        cost_noise_sd: 0.0,
        firm_cost_intercept: 0.0,
        firm_cost_per_1000_miles: 0.0,
        ..Default::default()
    };
    (cfg, params)
}

#[test]
fn symmetric_two_zone_world_splits_evenly() {
    let (cfg, params) = flat_world([0.25, 0.25], 5);
    let w = world(&cfg, &params);
    for t in 0..5 {
        for o in 0..2 {
            for c in 0..2 {
                assert!((w.probability(o, c, t) - 0.5).abs() < 1e-15);
            }
        }
    }
    // Realised moves are Binomial(I, 1/2): standardised counts have mean 0
    // and variance 1 across replications.
    let z = replicate(&cfg, &params, 300, |_, w| {
        let f = &w.panels.flows;
        Ok((0..2)
            .flat_map(|o| (0..5).map(move |t| (o, t)))
            .map(|(o, t)| (f.flow(o, 1 - o, t) - 0.5 * f.stock(o, t)) / (0.25 * f.stock(o, t)).sqrt())
            .collect::<Vec<_>>())
    })
    .unwrap()
    .concat();
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 0.1, "variance {var}");
}

#[test]
fn tax_gap_moves_log_odds_by_eta() {
    let (cfg, params) = flat_world([0.2, 0.3], 3);
    let w = world(&cfg, &params);
    let gap = 0.5 * (0.7f64.ln() - 0.8f64.ln());
    for t in 0..3 {
        assert!((w.realized_log_odds(0, 1, t) - gap).abs() < 1e-12);
        assert!((w.realized_log_odds(1, 0, t) + gap).abs() < 1e-12);
    }
}

#[test]
fn fixed_seed_gives_identical_files() {
    let cfg = SimConfig::default();
    let bytes = |cfg: &SimConfig| {
        let dir = tempfile::tempdir().unwrap();
        let w = world(cfg, &TruthParams::default());
        let files = write_panels(dir.path(), &w.panels).unwrap();
        files.iter().map(|f| std::fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    let a = bytes(&cfg);
    assert_eq!(a, bytes(&cfg));
    assert_ne!(a, bytes(&SimConfig { seed: 43, ..cfg }));
}

#[test]
fn expected_inflows_sum_probability_times_stock() {
    let cfg = SimConfig::default();
    let w = world(&cfg, &TruthParams::default());
    let (n, ny) = (w.n_zones(), w.n_years());
    for d in 0..n {
        for t in 0..ny {
            let direct: f64 =
                (0..n).filter(|&o| o != d).map(|o| w.probability(o, d, t) * w.panels.flows.stock(o, t)).sum();
            assert!((w.expected_inflows[d * ny + t] - direct).abs() < 1e-9 * direct.max(1.0));
        }
    }
}

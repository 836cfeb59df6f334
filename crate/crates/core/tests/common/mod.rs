#![allow(dead_code)]

use shiftshare::geo::{GeoRegistry, StateId, Zone, ZoneId};
use shiftshare::regression::RegressionSpec;
use shiftshare::simulator::{simulate_world, SimConfig, TruthParams, World, WorldTruth};
use shiftshare::workflow::{prepare_baseline, Baseline, BaselineOptions};

/// The 50-zone, 10-state, 20-year design used for recovery checks.
pub fn recovery_config() -> SimConfig {
    SimConfig { n_zones: 50, n_states: 10, n_years: 20, ..Default::default() }
}

pub fn world(cfg: &SimConfig, params: &TruthParams) -> World {
    let truth = WorldTruth::draw(cfg, params).unwrap();
    simulate_world(cfg, &truth).unwrap()
}

pub fn baseline(w: &World) -> Baseline {
    prepare_baseline(&w.panels, &BaselineOptions::default()).unwrap()
}

pub fn two_instrument_spec(outcome: &str) -> RegressionSpec {
    let mut s = RegressionSpec::baseline(outcome);
    s.instruments = vec!["b".into(), "b_sigma".into()];
    s
}

/// Zones given as (id, state, lat, lon).
pub fn registry(zones: &[(u32, &str, f64, f64)]) -> GeoRegistry {
    GeoRegistry::new(
        zones.iter().map(|&(id, s, lat, lon)| Zone { id: ZoneId(id), state: StateId(s.into()), lat, lon }).collect(),
    )
    .unwrap()
}

pub fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

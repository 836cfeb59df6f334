//! Distance-ring aggregates of zone-year series.
//!
//! Ring 1 is the zone itself; ring r ≥ 2 sums the series over other zones at
//! a great-circle distance in (edge_{r−2}, edge_{r−1}] miles, with the first
//! ring including distance 0.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{ZoneYearFrame, INFLOWS};
use crate::geo::GeoRegistry;
use crate::iv::{self, Column, IvFit};
use crate::output::{fmt, CsvOut};
use crate::regression::RegressionSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingDesign {
    pub edges: Vec<f64>,
    /// `<series>_ring<r>` for r = 1..=edges.len()+1.
    pub columns: Vec<Column>,
}

impl RingDesign {
    pub fn write_csv(&self, path: &Path, frame: &ZoneYearFrame) -> Result<PathBuf> {
        let mut out = CsvOut::create(path, &["zone", "year", "ring", "lower_miles", "upper_miles", "value"])?;
        for (k, c) in self.columns.iter().enumerate() {
            let (lo, hi) = match k {
                0 => (0.0, 0.0),
                1 => (0.0, self.edges[0]),
                _ => (self.edges[k - 2], self.edges[k - 1]),
            };
            for (r, v) in c.values.iter().enumerate() {
                out.row(&[
                    frame.zone_ids[frame.zone_of(r)].to_string(),
                    frame.calendar.year(frame.t_of(r)).to_string(),
                    (k + 1).to_string(),
                    fmt(lo),
                    fmt(hi),
                    fmt(*v),
                ])?;
            }
        }
        out.finish()
    }
}

fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.is_empty() {
        return Err(Error::InvalidInput("ring edges are empty".into()));
    }
    if edges.iter().any(|e| !e.is_finite() || *e <= 0.0) {
        return Err(Error::InvalidInput("ring edges must be positive and finite".into()));
    }
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(format!("ring edges {edges:?} must be strictly increasing")));
    }
    Ok(())
}

/// Ring index (0-based, 0 = the zone itself) of `other` seen from `d`.
fn ring_of(geo: &GeoRegistry, edges: &[f64], d: usize, other: usize) -> Option<usize> {
    if d == other {
        return Some(0);
    }
    let dist = geo.distance(d, other);
    edges.iter().position(|&e| dist <= e).map(|k| k + 1)
}

/// Ring sums of a zone-major series.
pub fn ring_columns(
    series: &[f64],
    name: &str,
    geo: &GeoRegistry,
    n_years: usize,
    edges: &[f64],
) -> Result<Vec<Column>> {
    validate_edges(edges)?;
    let n = geo.len();
    if series.len() != n * n_years {
        return Err(Error::InvalidInput(format!("series `{name}` is not zone-year aligned")));
    }
    let mut cols = vec![vec![0.0; n * n_years]; edges.len() + 1];
    for d in 0..n {
        for other in 0..n {
            if let Some(k) = ring_of(geo, edges, d, other) {
                for t in 0..n_years {
                    cols[k][d * n_years + t] += series[other * n_years + t];
                }
            }
        }
    }
    Ok(cols.into_iter().enumerate().map(|(k, v)| Column::new(format!("{name}_ring{}", k + 1), v)).collect())
}

/// Ring flow columns M_{r(d)t} from the frame's inflow column.
pub fn distance_ring_design(frame: &ZoneYearFrame, geo: &GeoRegistry, edges: &[f64]) -> Result<RingDesign> {
    let columns = ring_columns(&frame.get(INFLOWS)?, INFLOWS, geo, frame.calendar.n_years, edges)?;
    Ok(RingDesign { edges: edges.to_vec(), columns })
}

/// Ring aggregates of each instrument column, used as instruments for the
/// ring flows.
pub fn ring_instruments(
    frame: &ZoneYearFrame,
    instruments: &[String],
    geo: &GeoRegistry,
    edges: &[f64],
) -> Result<Vec<Column>> {
    let mut out = Vec::new();
    for name in instruments {
        out.extend(ring_columns(&frame.get(name)?, name, geo, frame.calendar.n_years, edges)?);
    }
    Ok(out)
}

/// 2SLS of the outcome on all ring flows, each instrumented by the ring
/// aggregates of the spec's instruments.
pub fn fit_rings(frame: &ZoneYearFrame, geo: &GeoRegistry, edges: &[f64], spec: &RegressionSpec) -> Result<IvFit> {
    let rings = distance_ring_design(frame, geo, edges)?;
    let inst = ring_instruments(frame, &spec.instruments, geo, edges)?;
    let mut base = spec.clone();
    base.endogenous.clear();
    base.instruments.clear();
    let mut d = base.design(frame)?;
    d.endogenous = rings.columns;
    d.instruments = inst;
    iv::fit(&d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{StateId, Zone, ZoneId};

    fn geo(points: &[(f64, f64)]) -> GeoRegistry {
        GeoRegistry::new(
            points
                .iter()
                .enumerate()
                .map(|(i, &(lat, lon))| Zone { id: ZoneId(i as u32 + 1), state: StateId("A".into()), lat, lon })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn edges_validated() {
        let g = geo(&[(40.0, -100.0)]);
        assert!(ring_columns(&[1.0], "m", &g, 1, &[50.0, 50.0]).is_err());
        assert!(ring_columns(&[1.0], "m", &g, 1, &[100.0, 50.0]).is_err());
        assert!(ring_columns(&[1.0], "m", &g, 1, &[]).is_err());
    }

    #[test]
    fn isolated_zone_has_empty_outer_rings() {
        let g = geo(&[(40.0, -100.0)]);
        let c = ring_columns(&[7.0, 8.0], "m", &g, 2, &[50.0, 100.0]).unwrap();
        assert_eq!(c[0].values, vec![7.0, 8.0]);
        assert!(c[1..].iter().all(|c| c.values.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn two_zones_75_miles_apart() {
        // 75 miles of latitude at the same longitude.
        let dlat = 75.0 / (3958.8 * std::f64::consts::PI / 180.0);
        let g = geo(&[(40.0, -100.0), (40.0 + dlat, -100.0)]);
        assert!((g.distance(0, 1) - 75.0).abs() < 1e-9);
        let c = ring_columns(&[3.0, 5.0], "m", &g, 1, &[50.0, 100.0, 150.0]).unwrap();
        assert_eq!(c[2].name, "m_ring3");
        assert_eq!(c[2].values, vec![5.0, 3.0]);
        assert_eq!(c[1].values, vec![0.0, 0.0]);
        assert_eq!(c[3].values, vec![0.0, 0.0]);
    }
}

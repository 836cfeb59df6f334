//! Shift-share instruments: predicted inflows Σ_o share_odt · I_ot and the
//! interstate, spatial-lag and initial-share variants.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choice::Shares;
use crate::error::{Error, Result};
use crate::geo::GeoRegistry;
use crate::output::{fmt as fmt_num, CsvOut};
use crate::panel::{Calendar, FlowPanel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Σ_{o≠d} share_odt I_ot.
    All,
    /// Origins in other states only.
    Interstate,
    /// Shares toward the nearest neighbour of d, excluding d and its neighbour.
    SpatialLag,
    /// Time-invariant initial shares.
    Canonical,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::All, Variant::Interstate, Variant::SpatialLag, Variant::Canonical];

    pub fn name(self) -> &'static str {
        match self {
            Variant::All => "all",
            Variant::Interstate => "interstate",
            Variant::SpatialLag => "spatial_lag",
            Variant::Canonical => "canonical",
        }
    }

    /// Conventional column name in zone-year frames.
    pub fn column(self) -> &'static str {
        match self {
            Variant::All => "b",
            Variant::Interstate => "b_sigma",
            Variant::SpatialLag => "b_nu",
            Variant::Canonical => "b0",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" | "b" => Ok(Variant::All),
            "interstate" | "sigma" | "b_sigma" => Ok(Variant::Interstate),
            "spatial_lag" | "nu" | "b_nu" => Ok(Variant::SpatialLag),
            "canonical" | "initial" | "b0" => Ok(Variant::Canonical),
            other => Err(Error::InvalidInput(format!("unknown instrument variant `{other}`"))),
        }
    }
}

/// Source of origin → destination shares.
pub trait ShareSource: Sync {
    fn n_zones(&self) -> usize;
    fn share(&self, o: usize, d: usize, t: usize) -> f64;
    fn time_invariant(&self) -> bool;
}

impl ShareSource for Shares {
    fn n_zones(&self) -> usize {
        self.n_zones
    }
    fn share(&self, o: usize, d: usize, t: usize) -> f64 {
        self.get(o, d, t)
    }
    fn time_invariant(&self) -> bool {
        false
    }
}

/// Pooled shares P⁰_od = Σ_t M_odt / Σ_t I_ot over a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialShares {
    pub n_zones: usize,
    /// Row-major n × n; undefined origins hold zeros.
    pub values: Vec<f64>,
    /// False for origins with zero stock over the window.
    pub defined: Vec<bool>,
    pub window: (i32, i32),
}

impl ShareSource for InitialShares {
    fn n_zones(&self) -> usize {
        self.n_zones
    }
    fn share(&self, o: usize, d: usize, _t: usize) -> f64 {
        self.values[o * self.n_zones + d]
    }
    fn time_invariant(&self) -> bool {
        true
    }
}

/// Pools observed flows over the inclusive year window.
pub fn initial_shares(flows: &FlowPanel, window: (i32, i32)) -> Result<InitialShares> {
    let cal = flows.calendar;
    let ts: Vec<usize> = (window.0..=window.1).filter_map(|y| cal.index(y)).collect();
    if window.1 < window.0 || ts.is_empty() {
        return Err(Error::InvalidInput(format!("empty share window {}–{}", window.0, window.1)));
    }
    let n = flows.n_zones;
    let mut values = vec![0.0; n * n];
    let mut defined = vec![false; n];
    for o in 0..n {
        let stock: f64 = ts.iter().map(|&t| flows.stock(o, t)).sum();
        if stock <= 0.0 {
            continue;
        }
        defined[o] = true;
        for &t in &ts {
            values[o * n + o] += flows.stay(o, t) / stock;
            for &(d, m) in flows.outflows(o, t) {
                values[o * n + d as usize] += m / stock;
            }
        }
    }
    Ok(InitialShares { n_zones: n, values, defined, window })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentColumn {
    pub variant: Variant,
    pub calendar: Calendar,
    /// Zone-major `d * n_years + t`.
    pub values: Vec<f64>,
    pub provenance: String,
}

/// Exposure weight of destination `d` to origin `o`'s stock in year `t`
/// under `variant`, so that B_dt = Σ_o exposure · I_ot. `nu` holds nearest
/// neighbours (needed for the spatial lag only).
pub fn exposure(
    shares: &dyn ShareSource,
    geo: &GeoRegistry,
    nu: &[Option<usize>],
    variant: Variant,
    o: usize,
    d: usize,
    t: usize,
) -> f64 {
    if o == d {
        return 0.0;
    }
    match variant {
        Variant::All | Variant::Canonical => shares.share(o, d, t),
        Variant::Interstate if geo.state_index(o) != geo.state_index(d) => shares.share(o, d, t),
        Variant::Interstate => 0.0,
        Variant::SpatialLag => match nu[d] {
            Some(v) if v != o => shares.share(o, v, t),
            _ => 0.0,
        },
    }
}

/// Nearest neighbour of every zone.
pub fn neighbours(geo: &GeoRegistry) -> Vec<Option<usize>> {
    (0..geo.len()).map(|d| geo.neighbor(d)).collect()
}

/// Builds one instrument variant from shares and stocks (`stocks` indexed
/// `o * n_years + t`, as in [`FlowPanel::stocks`]).
pub fn build_bartik(
    shares: &dyn ShareSource,
    stocks: &[f64],
    calendar: Calendar,
    geo: &GeoRegistry,
    variant: Variant,
) -> Result<InstrumentColumn> {
    let n = geo.len();
    let ny = calendar.n_years;
    if shares.n_zones() != n || stocks.len() != n * ny {
        return Err(Error::InvalidInput("shares, stocks and registry are not aligned".into()));
    }
    if variant == Variant::Canonical && !shares.time_invariant() {
        return Err(Error::InvalidInput("canonical instrument requires time-invariant initial shares".into()));
    }
    for o in 0..n {
        for t in 0..ny {
            if !stocks[o * ny + t].is_finite() && (0..n).any(|d| d != o && shares.share(o, d, t) > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "missing stock for origin {} in {} with positive share",
                    geo.id(o),
                    calendar.year(t)
                )));
            }
        }
    }
    let nu = neighbours(geo);
    if variant == Variant::SpatialLag && nu.iter().any(Option::is_none) {
        return Err(Error::InvalidInput("spatial-lag instrument needs at least two zones".into()));
    }
    let values: Vec<f64> = (0..n * ny)
        .into_par_iter()
        .map(|cell| {
            let (d, t) = (cell / ny, cell % ny);
            (0..n).map(|o| exposure(shares, geo, &nu, variant, o, d, t) * stocks[o * ny + t]).sum()
        })
        .collect();
    let provenance = if shares.time_invariant() { "initial shares" } else { "predicted shares" };
    Ok(InstrumentColumn { variant, calendar, values, provenance: provenance.into() })
}

pub fn write_instruments_csv(path: &Path, cols: &[InstrumentColumn], geo: &GeoRegistry) -> Result<PathBuf> {
    let mut out = CsvOut::create(path, &["zone", "year", "variant", "value"])?;
    for c in cols {
        let ny = c.calendar.n_years;
        for d in 0..geo.len() {
            for t in 0..ny {
                out.row(&[
                    geo.id(d).to_string(),
                    c.calendar.year(t).to_string(),
                    c.variant.name().to_string(),
                    fmt_num(c.values[d * ny + t]),
                ])?;
            }
        }
    }
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{StateId, Zone, ZoneId};

    fn geo3() -> GeoRegistry {
        let z = |id, s: &str, lon| Zone { id: ZoneId(id), state: StateId(s.into()), lat: 40.0, lon };
        GeoRegistry::new(vec![z(1, "A", -100.0), z(2, "A", -100.5), z(3, "B", -103.0)]).unwrap()
    }

    fn shares3() -> Shares {
        // Rows o, columns c, one year.
        let v = vec![0.7, 0.2, 0.1, 0.3, 0.5, 0.2, 0.25, 0.25, 0.5];
        Shares { n_zones: 3, calendar: Calendar::new(2000, 1), values: v, imputed: 0 }
    }

    #[test]
    fn hand_expanded_variants() {
        let geo = geo3();
        let stocks = [10.0, 20.0, 40.0];
        let cal = Calendar::new(2000, 1);
        let b = build_bartik(&shares3(), &stocks, cal, &geo, Variant::All).unwrap();
        assert!((b.values[0] - (0.3 * 20.0 + 0.25 * 40.0)).abs() < 1e-12);
        assert!((b.values[2] - (0.1 * 10.0 + 0.2 * 20.0)).abs() < 1e-12);
        let s = build_bartik(&shares3(), &stocks, cal, &geo, Variant::Interstate).unwrap();
        assert!((s.values[0] - 0.25 * 40.0).abs() < 1e-12);
        assert!((s.values[2] - (0.1 * 10.0 + 0.2 * 20.0)).abs() < 1e-12);
        // ν(1) = 2, ν(2) = 1, ν(3) = 2.
        let nu = build_bartik(&shares3(), &stocks, cal, &geo, Variant::SpatialLag).unwrap();
        assert!((nu.values[0] - 0.25 * 40.0).abs() < 1e-12);
        assert!((nu.values[2] - 0.2 * 10.0).abs() < 1e-12);
    }

    #[test]
    fn single_term_and_empty_restriction() {
        let geo = geo3();
        let mut sh = shares3();
        sh.values = vec![0.0; 9];
        sh.values[1] = 0.1;
        let b = build_bartik(&sh, &[50.0, 0.0, 0.0], Calendar::new(2000, 1), &geo, Variant::All).unwrap();
        assert!((b.values[1] - 5.0).abs() < 1e-12);
        let s = build_bartik(&sh, &[50.0, 0.0, 0.0], Calendar::new(2000, 1), &geo, Variant::Interstate).unwrap();
        assert_eq!(s.values[1], 0.0);
    }

    #[test]
    fn pooled_initial_shares() {
        let mut f = FlowPanel::empty(2, Calendar::new(2000, 2));
        f.stocks = vec![20.0, 20.0, 5.0, 5.0];
        f.set_flow(0, 1, 0, 1.0);
        f.set_flow(0, 1, 1, 3.0);
        let p = initial_shares(&f, (2000, 2001)).unwrap();
        assert!((p.values[1] - 0.1).abs() < 1e-12);
        let p = initial_shares(&f, (2001, 2001)).unwrap();
        assert!((p.values[1] - 0.15).abs() < 1e-12);
        assert!(initial_shares(&f, (1990, 1991)).is_err());
    }
}

//! Zone × year analysis frame: named columns over a rectangular panel,
//! zone-major, with fixed-effect keys for zones, years and states.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fe::{CellKeys, Dim, Factor, FeTerm};
use crate::geo::GeoRegistry;
use crate::iv::Column;
use crate::panel::{Calendar, Panels, TaxField, CORPORATE_TERMS};
use crate::vce::dense_codes;

/// Outcome transformation applied before estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// ln(1 + Y).
    Log1p,
    /// ln(Y); zero outcomes become missing and drop from the sample.
    Log,
    Level,
}

impl Transform {
    pub fn apply(self, y: f64) -> f64 {
        match self {
            Transform::Log1p => y.ln_1p(),
            Transform::Log if y > 0.0 => y.ln(),
            Transform::Log => f64::NAN,
            Transform::Level => y,
        }
    }

    pub fn invert(self, v: f64) -> f64 {
        match self {
            Transform::Log1p => v.exp_m1(),
            Transform::Log => v.exp(),
            Transform::Level => v,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Transform::Log1p => "log1p",
            Transform::Log => "log",
            Transform::Level => "level",
        }
    }
}

impl std::str::FromStr for Transform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "log1p" | "ln1p" => Ok(Transform::Log1p),
            "log" | "ln" => Ok(Transform::Log),
            "level" | "none" => Ok(Transform::Level),
            other => Err(Error::InvalidInput(format!("unknown outcome transform `{other}`"))),
        }
    }
}

/// Name of the own-state net-of-tax column, ln(1 − τ).
pub const LN_NET_TAX: &str = "ln_net_tax";
/// Name of the total inflow column M_dt.
pub const INFLOWS: &str = "m";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneYearFrame {
    pub calendar: Calendar,
    pub zone_ids: Vec<u32>,
    pub zone_states: Vec<usize>,
    columns: BTreeMap<String, Vec<f64>>,
}

impl ZoneYearFrame {
    pub fn new(geo: &GeoRegistry, calendar: Calendar) -> Self {
        ZoneYearFrame {
            calendar,
            zone_ids: (0..geo.len()).map(|z| geo.id(z).0).collect(),
            zone_states: (0..geo.len()).map(|z| geo.state_index(z)).collect(),
            columns: BTreeMap::new(),
        }
    }

    /// Frame with inflows, policy transforms, outcomes and controls.
    ///
    /// Columns: `m`, `ln_net_tax` (for `tax`), `ln_net_<field>` for every tax
    /// field, `ln_net_citr`, `ln_itc`, `ln_rtc`, the binary policy columns,
    /// raw outcome scopes and controls under their own names.
    pub fn from_panels(p: &Panels, tax: TaxField) -> Result<Self> {
        let cal = p.flows.calendar;
        let mut f = ZoneYearFrame::new(&p.geo, cal);
        let rows = p.policies.zone_rows(&p.geo, &cal)?;
        f.insert(INFLOWS, p.flows.inflows())?;
        f.insert(LN_NET_TAX, rows.iter().map(|r| r.ln_net_of_tax(tax)).collect())?;
        for field in TaxField::ALL {
            f.insert(&format!("ln_net_{}", field.name()), rows.iter().map(|r| r.ln_net_of_tax(field)).collect())?;
        }
        for (k, name) in CORPORATE_TERMS.iter().enumerate() {
            let label = if *name == "citr" { "ln_net_citr".to_string() } else { format!("ln_{name}") };
            f.insert(&label, rows.iter().map(|r| r.corporate_terms()[k]).collect())?;
        }
        for name in ["ts_low", "udda", "uflra", "ufta"] {
            f.insert(name, rows.iter().map(|r| r.value(name).unwrap_or(f64::NAN)).collect())?;
        }
        for (name, v) in p.outcomes.outcomes.iter().chain(&p.outcomes.controls) {
            f.insert(name, v.clone())?;
        }
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.zone_ids.len() * self.calendar.n_years
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_zones(&self) -> usize {
        self.zone_ids.len()
    }

    pub fn row(&self, zone: usize, t: usize) -> usize {
        zone * self.calendar.n_years + t
    }

    pub fn zone_of(&self, row: usize) -> usize {
        row / self.calendar.n_years
    }

    pub fn t_of(&self, row: usize) -> usize {
        row % self.calendar.n_years
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "column `{name}` has {} rows, frame has {}",
                values.len(),
                self.len()
            )));
        }
        self.columns.insert(name.to_string(), values);
        Ok(())
    }

    pub fn has(&self, name: &str) -> bool {
        self.columns.contains_key(name) || name.split('*').all(|p| self.columns.contains_key(p.trim()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    /// Column values; `a*b` yields the elementwise product.
    pub fn get(&self, name: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.columns.get(name) {
            return Ok(v.clone());
        }
        let parts: Vec<&str> = name.split('*').map(str::trim).collect();
        if parts.len() < 2 {
            return Err(Error::InvalidInput(format!("unknown column `{name}`")));
        }
        let mut out = vec![1.0; self.len()];
        for p in parts {
            let v = self.columns.get(p).ok_or_else(|| Error::InvalidInput(format!("unknown column `{p}`")))?;
            out.iter_mut().zip(v).for_each(|(o, x)| *o *= x);
        }
        Ok(out)
    }

    pub fn column(&self, name: &str) -> Result<Column> {
        Ok(Column::new(name, self.get(name)?))
    }

    pub fn columns(&self, names: &[String]) -> Result<Vec<Column>> {
        names.iter().map(|n| self.column(n)).collect()
    }

    /// Transformed outcome column, named after the raw column.
    pub fn outcome(&self, name: &str, transform: Transform) -> Result<Column> {
        let v = self.get(name)?;
        Ok(Column::new(name, v.into_iter().map(|y| transform.apply(y)).collect()))
    }

    pub fn factors(&self, terms: &[FeTerm]) -> Result<Vec<Factor>> {
        terms.iter().map(|t| Factor::build(t, self)).collect()
    }

    /// Dense cluster codes for a factor term.
    pub fn cluster_codes(&self, term: &FeTerm) -> Result<Vec<u32>> {
        Ok(Factor::build(term, self)?.codes)
    }

    /// Cluster codes keyed by zone.
    pub fn zone_clusters(&self) -> Vec<u32> {
        dense_codes(&(0..self.len()).map(|r| self.zone_of(r)).collect::<Vec<_>>())
    }
}

impl CellKeys for ZoneYearFrame {
    fn rows(&self) -> usize {
        self.len()
    }

    fn key(&self, row: usize, dim: Dim) -> Option<i64> {
        let z = self.zone_of(row);
        Some(match dim {
            Dim::Zone | Dim::Destination => self.zone_ids[z] as i64,
            Dim::Year => self.calendar.year(self.t_of(row)) as i64,
            Dim::State | Dim::DestinationState => self.zone_states[z] as i64,
            Dim::Origin | Dim::OriginState => return None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{StateId, Zone, ZoneId};

    fn frame() -> ZoneYearFrame {
        let zones = (0..3)
            .map(|i| Zone {
                id: ZoneId(10 + i),
                state: StateId(format!("S{}", i % 2)),
                lat: 40.0,
                lon: -100.0 + i as f64,
            })
            .collect();
        let geo = GeoRegistry::new(zones).unwrap();
        ZoneYearFrame::new(&geo, Calendar::new(2000, 2))
    }

    #[test]
    fn products_and_keys() {
        let mut f = frame();
        f.insert("a", vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        f.insert("b", vec![2.0; 6]).unwrap();
        assert_eq!(f.get("a*b").unwrap(), vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
        assert_eq!(f.key(3, Dim::Zone), Some(11));
        assert_eq!(f.key(3, Dim::Year), Some(2001));
        assert_eq!(f.key(4, Dim::State), Some(0));
        assert!(f.get("c").is_err());
    }

    #[test]
    fn log_transform_marks_zeros_missing() {
        assert!(Transform::Log.apply(0.0).is_nan());
        assert_eq!(Transform::Log1p.apply(0.0), 0.0);
        assert!((Transform::Log1p.invert(Transform::Log1p.apply(3.5)) - 3.5).abs() < 1e-12);
    }
}

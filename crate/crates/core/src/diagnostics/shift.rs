//! Origin-level (shift) reformulation of the destination-level Bartik 2SLS
//! and concentration diagnostics of the implied origin weights.
//!
//! With exposures s_odt (B_dt = Σ_o s_odt I_ot) and destination residuals
//! ỹ⊥, x̃⊥, the origin-level variables are P_ot = Σ_d s_odt and
//! Ȳ⊥_ot = Σ_d s_odt ỹ⊥_dt / P_ot (likewise M̄⊥). Regressing Ȳ⊥ on M̄⊥,
//! instrumented by I_ot with origin controls q_ot and weights P_ot, equals
//! the destination-level estimate once the destination equation controls
//! for Σ_o s_odt q_ot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fe::{Dim, Factor, FeTerm};
use crate::frame::ZoneYearFrame;
use crate::geo::GeoRegistry;
use crate::instruments::{exposure, neighbours, ShareSource, Variant};
use crate::iv::{self, Column, Design, IvFit, Prepared};
use crate::regression::RegressionSpec;
use crate::vce::{dense_codes, VceMode};

use super::residualise;

/// Origin-level controls q_ot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginControls {
    pub origin_fe: bool,
    pub year_fe: bool,
}

impl Default for OriginControls {
    fn default() -> Self {
        OriginControls { origin_fe: true, year_fe: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginLevelDataset {
    pub origin: Vec<u32>,
    pub year: Vec<i32>,
    /// Exposure-weighted residual outcome Ȳ⊥_ot.
    pub y_bar: Vec<f64>,
    /// Exposure-weighted residual endogenous M̄⊥_ot.
    pub m_bar: Vec<f64>,
    /// Shift I_ot.
    pub shift: Vec<f64>,
    /// Importance weight P_ot = Σ_d s_odt.
    pub weight: Vec<f64>,
    origin_index: Vec<usize>,
    year_index: Vec<usize>,
}

impl OriginLevelDataset {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct OriginLevelResult {
    pub dataset: OriginLevelDataset,
    /// Destination-level Bartik 2SLS with the share-weighted origin controls.
    pub destination: IvFit,
    /// Origin-level weighted 2SLS.
    pub origin: IvFit,
    pub notes: Vec<String>,
}

impl OriginLevelResult {
    pub fn phi_destination(&self) -> f64 {
        self.destination.coef[0]
    }

    pub fn phi_origin(&self) -> f64 {
        self.origin.coef[0]
    }
}

/// Builds the origin-level dataset and both estimates. `spec` supplies the
/// destination outcome, endogenous regressor, controls, fixed effects and
/// VCE; its instrument list is replaced by B rebuilt under `variant`.
pub fn origin_level_transform(
    frame: &ZoneYearFrame,
    spec: &RegressionSpec,
    shares: &dyn ShareSource,
    stocks: &[f64],
    geo: &GeoRegistry,
    variant: Variant,
    q: OriginControls,
) -> Result<OriginLevelResult> {
    if spec.endogenous.len() != 1 {
        return Err(Error::InvalidInput("origin-level transform needs exactly one endogenous regressor".into()));
    }
    let n = geo.len();
    let ny = frame.calendar.n_years;
    let rows = frame.len();
    if shares.n_zones() != n || stocks.len() != n * ny || frame.n_zones() != n {
        return Err(Error::InvalidInput("shares, stocks, frame and registry are not aligned".into()));
    }
    if stocks.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("origin-level transform needs complete stocks".into()));
    }
    let nu = neighbours(geo);
    // s[o][r] for destination-year row r.
    let s: Vec<Vec<f64>> =
        (0..n).map(|o| (0..rows).map(|r| exposure(shares, geo, &nu, variant, o, r / ny, r % ny)).collect()).collect();
    let b: Vec<f64> = (0..rows).map(|r| (0..n).map(|o| s[o][r] * stocks[o * ny + r % ny]).sum()).collect();
    let total: Vec<f64> = (0..rows).map(|r| (0..n).map(|o| s[o][r]).sum()).collect();

    // Destination controls Σ_o s_odt q_ot.
    let mut extra = vec![Column::new("exposure_total", total.clone())];
    if q.year_fe {
        for t in 0..ny {
            let v = (0..rows).map(|r| if r % ny == t { total[r] } else { 0.0 }).collect();
            extra.push(Column::new(format!("exposure_year_{}", frame.calendar.year(t)), v));
        }
    }
    if q.origin_fe {
        for (o, so) in s.iter().enumerate() {
            extra.push(Column::new(format!("exposure_origin_{}", geo.id(o)), so.clone()));
        }
    }
    let mut design = spec.design(frame)?;
    design.instruments = vec![Column::new("bartik", b)];
    design.exogenous.extend(extra);
    let prep = Prepared::new(&design)?;
    let destination = prep.fit(&design.y.values, false)?;
    let res = residualise(&prep, &design, &[design.y.values.clone(), design.endogenous[0].values.clone()])?;
    let (y_perp, x_perp) = (&res[0], &res[1]);

    let mut ds = OriginLevelDataset {
        origin: vec![],
        year: vec![],
        y_bar: vec![],
        m_bar: vec![],
        shift: vec![],
        weight: vec![],
        origin_index: vec![],
        year_index: vec![],
    };
    let mut notes = Vec::new();
    let mut dropped = 0;
    for (o, so) in s.iter().enumerate() {
        for t in 0..ny {
            let (mut p, mut yb, mut mb) = (0.0, 0.0, 0.0);
            for (k, &r) in prep.rows.iter().enumerate() {
                if r % ny == t {
                    let w = so[r];
                    p += w;
                    yb += w * y_perp[k];
                    mb += w * x_perp[k];
                }
            }
            if p <= 0.0 {
                dropped += 1;
                continue;
            }
            ds.origin.push(geo.id(o).0);
            ds.year.push(frame.calendar.year(t));
            ds.y_bar.push(yb / p);
            ds.m_bar.push(mb / p);
            ds.shift.push(stocks[o * ny + t]);
            ds.weight.push(p);
            ds.origin_index.push(o);
            ds.year_index.push(t);
        }
    }
    if dropped > 0 {
        notes.push(format!("dropped {dropped} origin-years with zero exposure"));
    }
    if ds.is_empty() {
        return Err(Error::Degenerate("no origin-year has positive exposure".into()));
    }
    let origin = fit_origin_level(&ds, q)?;
    Ok(OriginLevelResult { dataset: ds, destination, origin, notes })
}

/// Weighted origin-level 2SLS of Ȳ⊥ on M̄⊥ instrumented by the shift,
/// clustered by origin.
pub fn fit_origin_level(ds: &OriginLevelDataset, q: OriginControls) -> Result<IvFit> {
    let codes = |v: &[usize]| v.iter().map(|&x| x as i64).collect::<Vec<_>>();
    let mut d = Design::new(Column::new("y_bar", ds.y_bar.clone()));
    d.endogenous = vec![Column::new("m_bar", ds.m_bar.clone())];
    d.instruments = vec![Column::new("shift", ds.shift.clone())];
    d.weights = Some(ds.weight.clone());
    d.drop_singletons = false;
    if q.origin_fe {
        d.factors.push(Factor::from_keys(
            FeTerm(vec![Dim::Origin]),
            codes(&ds.origin_index).into_iter().map(|c| vec![c]).collect(),
        ));
    }
    if q.year_fe {
        d.factors.push(Factor::from_keys(
            FeTerm(vec![Dim::Year]),
            codes(&ds.year_index).into_iter().map(|c| vec![c]).collect(),
        ));
    }
    d.vce = VceMode::Cluster(vec![dense_codes(&ds.origin_index)]);
    iv::fit(&d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HerfindahlReport {
    /// 1/HHI over origin-year weights.
    pub effective_cells: f64,
    pub largest_cell: f64,
    /// 1/HHI over origin weights aggregated across years.
    pub effective_zones: f64,
    pub largest_zone: f64,
}

/// Effective sample size 1/Σ w̄² and the largest normalised weight.
pub fn herfindahl(weights: &[f64]) -> Result<(f64, f64)> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("weights are all zero".into()));
    }
    let hhi: f64 = weights.iter().map(|w| (w / total).powi(2)).sum();
    let largest = weights.iter().fold(0.0f64, |m, w| m.max(*w)) / total;
    Ok((1.0 / hhi, largest))
}

pub fn herfindahl_diagnostics(ds: &OriginLevelDataset) -> Result<HerfindahlReport> {
    let (effective_cells, largest_cell) = herfindahl(&ds.weight)?;
    let n = ds.origin_index.iter().max().map_or(0, |m| m + 1);
    let mut by_zone = vec![0.0; n];
    for (o, w) in ds.origin_index.iter().zip(&ds.weight) {
        by_zone[*o] += w;
    }
    let (effective_zones, largest_zone) = herfindahl(&by_zone)?;
    Ok(HerfindahlReport { effective_cells, largest_cell, effective_zones, largest_zone })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_degenerate_concentration() {
        let (e, l) = herfindahl(&[2.0; 8]).unwrap();
        assert!((e - 8.0).abs() < 1e-12 && (l - 0.125).abs() < 1e-15);
        let (e, l) = herfindahl(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!((e, l), (1.0, 1.0));
        assert!(herfindahl(&[0.0, 0.0]).is_err());
        assert!(herfindahl(&[1.0, -1.0]).is_err());
    }
}

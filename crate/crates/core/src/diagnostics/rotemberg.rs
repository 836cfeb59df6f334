//! Decomposition of the just-identified Bartik 2SLS estimate into
//! per-origin just-identified estimates with weights summing to one.
//!
//! With z_o the origin-o term of B (B = Σ_o z_o) and ~ the within and
//! control-partialling operator, φ̂ = B̃'ỹ / B̃'x̃ = Σ_o ω_o φ_o where
//! ω_o = z̃_o'x̃ / B̃'x̃ and φ_o = z̃_o'ỹ / z̃_o'x̃.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::ZoneYearFrame;
use crate::geo::GeoRegistry;
use crate::instruments::{exposure, neighbours, ShareSource, Variant};
use crate::iv::{Column, Prepared};
use crate::linalg::dot;
use crate::output::{fmt, CsvOut};
use crate::regression::RegressionSpec;

use super::residualise;

/// Granularity of the instrument components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotembergLevel {
    /// One component per origin, aggregated over years.
    #[default]
    Origin,
    /// One component per origin-year.
    OriginYear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotembergEntry {
    pub origin: u32,
    pub year: Option<i32>,
    pub weight: f64,
    /// Just-identified estimate; `None` when the component has no covariance
    /// with the endogenous regressor.
    pub phi: Option<f64>,
    /// Homoskedastic first-stage F of the endogenous regressor on the
    /// component alone.
    pub first_stage_f: f64,
    /// Variance of the origin's exposure weights across destination-years.
    pub share_variance: f64,
    pub mean_stock: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotembergReport {
    pub level: RotembergLevel,
    /// Full just-identified estimate B̃'ỹ / B̃'x̃.
    pub phi: f64,
    pub n_obs: usize,
    pub entries: Vec<RotembergEntry>,
    pub sum_negative: f64,
    pub sum_positive: f64,
    /// |Σ negative| / (Σ positive + |Σ negative|).
    pub share_negative: f64,
    pub share_positive: f64,
    pub n_negative: usize,
    pub n_positive: usize,
    pub n_undefined: usize,
    pub notes: Vec<String>,
}

impl RotembergReport {
    pub fn weight_sum(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    /// Σ ω_o φ_o over defined components.
    pub fn weighted_estimate(&self) -> f64 {
        self.entries.iter().filter_map(|e| e.phi.map(|p| e.weight * p)).sum()
    }

    /// Entries with the largest weights, in descending order.
    pub fn top(&self, k: usize) -> Vec<&RotembergEntry> {
        let mut v: Vec<&RotembergEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.origin.cmp(&b.origin)));
        v.truncate(k);
        v
    }

    pub fn write_csv(&self, path: &Path) -> Result<PathBuf> {
        let mut out = CsvOut::create(
            path,
            &["origin", "year", "weight", "phi_o", "first_stage_f", "share_variance", "mean_stock"],
        )?;
        for e in &self.entries {
            out.row(&[
                e.origin.to_string(),
                e.year.map_or("all".to_string(), |y| y.to_string()),
                fmt(e.weight),
                e.phi.map_or("NA".to_string(), fmt),
                fmt(e.first_stage_f),
                fmt(e.share_variance),
                fmt(e.mean_stock),
            ])?;
        }
        out.finish()
    }
}

/// Decomposes the 2SLS estimate of `spec` (one endogenous regressor) with the
/// instrument rebuilt from `shares` and `stocks` under `variant`. The spec's
/// own instrument list is ignored.
pub fn rotemberg_decompose(
    frame: &ZoneYearFrame,
    spec: &RegressionSpec,
    shares: &dyn ShareSource,
    stocks: &[f64],
    geo: &GeoRegistry,
    variant: Variant,
    level: RotembergLevel,
) -> Result<RotembergReport> {
    if spec.endogenous.len() != 1 {
        return Err(Error::InvalidInput("Rotemberg decomposition needs exactly one endogenous regressor".into()));
    }
    let n = geo.len();
    let ny = frame.calendar.n_years;
    if shares.n_zones() != n || stocks.len() != n * ny || frame.n_zones() != n {
        return Err(Error::InvalidInput("shares, stocks, frame and registry are not aligned".into()));
    }
    let nu = neighbours(geo);
    let rows = frame.len();
    let ex = |o: usize, r: usize| {
        let (d, t) = (r / ny, r % ny);
        exposure(shares, geo, &nu, variant, o, d, t)
    };
    // Components keyed by (origin, year index).
    let keys: Vec<(usize, Option<usize>)> = match level {
        RotembergLevel::Origin => (0..n).map(|o| (o, None)).collect(),
        RotembergLevel::OriginYear => (0..n).flat_map(|o| (0..ny).map(move |s| (o, Some(s)))).collect(),
    };
    let comps: Vec<Vec<f64>> = keys
        .par_iter()
        .map(|&(o, s)| {
            (0..rows)
                .map(|r| {
                    let t = r % ny;
                    if s.is_some_and(|s| s != t) {
                        0.0
                    } else {
                        let e = ex(o, r);
                        if e == 0.0 {
                            0.0
                        } else {
                            e * stocks[o * ny + t]
                        }
                    }
                })
                .collect()
        })
        .collect();
    let mut b = vec![0.0; rows];
    for c in &comps {
        b.iter_mut().zip(c).for_each(|(bi, ci)| *bi += ci);
    }

    let mut design = spec.design(frame)?;
    design.instruments = vec![Column::new("bartik", b.clone())];
    let prep = Prepared::new(&design)?;
    let mut cols = vec![design.y.values.clone(), design.endogenous[0].values.clone(), b];
    cols.extend(comps);
    let res = residualise(&prep, &design, &cols)?;
    let (y, x, bt) = (&res[0], &res[1], &res[2]);
    let denom = dot(bt, x);
    if denom == 0.0 {
        return Err(Error::Underidentified("instrument is orthogonal to the endogenous regressor".into()));
    }
    let phi = dot(bt, y) / denom;
    let m = prep.n_obs();
    let dof = m as f64 - 1.0 - prep.exog_names.len() as f64 - prep.absorbed_dof as f64;
    let zx_all: Vec<f64> = res[3..].par_iter().map(|z| dot(z, x)).collect();
    let scale: f64 = zx_all.iter().map(|v| v.abs()).sum();
    let sample: Vec<usize> = prep.rows.clone();

    let entries: Vec<RotembergEntry> = keys
        .par_iter()
        .enumerate()
        .map(|(k, &(o, s))| {
            let z = &res[3 + k];
            let zz = dot(z, z);
            let zx = zx_all[k];
            let defined = zz > 0.0 && zx.abs() > 1e-14 * scale;
            let first_stage_f = if zz > 0.0 && dof > 0.0 {
                let pi = zx / zz;
                let vv: f64 = z.iter().zip(x).map(|(zi, xi)| (xi - pi * zi).powi(2)).sum();
                pi * pi * zz / (vv / dof)
            } else {
                0.0
            };
            let shares_o: Vec<f64> =
                sample.iter().filter(|&&r| r / ny != o && s.is_none_or(|s| r % ny == s)).map(|&r| ex(o, r)).collect();
            let share_variance = variance(&shares_o);
            let mean_stock = match s {
                Some(s) => stocks[o * ny + s],
                None => stocks[o * ny..(o + 1) * ny].iter().sum::<f64>() / ny as f64,
            };
            RotembergEntry {
                origin: geo.id(o).0,
                year: s.map(|s| frame.calendar.year(s)),
                weight: if zz > 0.0 { zx / denom } else { 0.0 },
                phi: defined.then(|| dot(z, y) / zx),
                first_stage_f,
                share_variance,
                mean_stock,
            }
        })
        .collect();

    let sum_negative: f64 = entries.iter().map(|e| e.weight).filter(|w| *w < 0.0).sum();
    let sum_positive: f64 = entries.iter().map(|e| e.weight).filter(|w| *w > 0.0).sum();
    let total = sum_positive - sum_negative;
    let n_undefined = entries.iter().filter(|e| e.phi.is_none()).count();
    let mut notes = prep.notes.clone();
    if n_undefined > 0 {
        notes.push(format!("{n_undefined} components with no instrument covariance; estimates undefined"));
    }
    Ok(RotembergReport {
        level,
        phi,
        n_obs: m,
        n_negative: entries.iter().filter(|e| e.weight < 0.0).count(),
        n_positive: entries.iter().filter(|e| e.weight > 0.0).count(),
        entries,
        sum_negative,
        sum_positive,
        share_negative: if total > 0.0 { -sum_negative / total } else { f64::NAN },
        share_positive: if total > 0.0 { sum_positive / total } else { f64::NAN },
        n_undefined,
        notes,
    })
}

fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
}

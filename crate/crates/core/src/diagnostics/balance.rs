//! Balance of predicted shares against lagged destination characteristics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::fe::FeTerm;
use crate::frame::ZoneYearFrame;
use crate::instruments::ShareSource;
use crate::iv::{Column, Design, Prepared};
use crate::linalg::dot;
use crate::output::{fmt, CsvOut};
use crate::vce::VceMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceOptions {
    /// Characteristic at t − lag is compared with shares at t.
    pub lag: usize,
    /// First-difference shares and characteristics within destination.
    pub difference: bool,
    /// Fixed effects absorbed before the regression (intercept if empty).
    pub fe: Vec<FeTerm>,
    /// Optional frame column of regression weights.
    pub weights: Option<String>,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        BalanceOptions { lag: 1, difference: true, fe: vec![], weights: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub origin: u32,
    pub characteristic: String,
    pub correlation: f64,
    pub slope: f64,
    pub se: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub n_obs: usize,
    pub zero_variance: bool,
}

impl BalanceRow {
    fn degenerate(origin: u32, characteristic: &str) -> Self {
        BalanceRow {
            origin,
            characteristic: characteristic.into(),
            correlation: f64::NAN,
            slope: f64::NAN,
            se: f64::NAN,
            t_stat: f64::NAN,
            p_value: f64::NAN,
            n_obs: 0,
            zero_variance: true,
        }
    }
}

/// Regresses origin `o`'s predicted shares toward every other destination
/// on each characteristic, one row per (origin, characteristic). `origins`
/// are dense zone indices.
pub fn share_balance(
    frame: &ZoneYearFrame,
    shares: &dyn ShareSource,
    origins: &[usize],
    characteristics: &[String],
    opts: &BalanceOptions,
) -> Result<Vec<BalanceRow>> {
    let n = frame.n_zones();
    let ny = frame.calendar.n_years;
    if shares.n_zones() != n {
        return Err(Error::InvalidInput("shares and frame are not aligned".into()));
    }
    let factors = frame.factors(&opts.fe)?;
    let weights = opts.weights.as_ref().map(|w| frame.get(w)).transpose()?;
    let diff = |v: &[f64]| -> Vec<f64> {
        (0..v.len()).map(|r| if r % ny == 0 { f64::NAN } else { v[r] - v[r - 1] }).collect()
    };
    let mut out = Vec::new();
    for &o in origins {
        if o >= n {
            return Err(Error::InvalidInput(format!("origin index {o} out of range")));
        }
        let id = frame.zone_ids[o];
        let mut s: Vec<f64> =
            (0..frame.len()).map(|r| if r / ny == o { f64::NAN } else { shares.share(o, r / ny, r % ny) }).collect();
        if opts.difference {
            s = diff(&s);
        }
        for name in characteristics {
            let raw = frame.get(name)?;
            let mut c: Vec<f64> =
                (0..raw.len()).map(|r| if r % ny < opts.lag { f64::NAN } else { raw[r - opts.lag] }).collect();
            if opts.difference {
                c = diff(&c);
            }
            let mut d = Design::new(Column::new("share", s.clone()));
            d.endogenous = vec![Column::new(name.clone(), c)];
            d.factors = factors.clone();
            d.weights = weights.clone();
            d.vce = VceMode::Homoskedastic;
            d.drop_singletons = false;
            let prep = match Prepared::new(&d) {
                Ok(p) => p,
                Err(Error::Collinear(_)) => {
                    out.push(BalanceRow::degenerate(id, name));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let y_t = prep.transform(&d.y.values)?;
            let fit = prep.fit_transformed(&d.y.values, &y_t, false, false)?;
            let x = prep.x.column(0);
            let xs: Vec<f64> = x.iter().copied().collect();
            let correlation = dot(&xs, &y_t) / (dot(&xs, &xs) * dot(&y_t, &y_t)).sqrt();
            let se = fit.se()[0];
            let t_stat = fit.coef[0] / se;
            let df = (fit.n_obs as f64 - 1.0 - fit.absorbed_dof as f64).max(1.0);
            let p_value = StudentsT::new(0.0, 1.0, df).map(|t| 2.0 * (1.0 - t.cdf(t_stat.abs()))).unwrap_or(f64::NAN);
            out.push(BalanceRow {
                origin: id,
                characteristic: name.clone(),
                correlation,
                slope: fit.coef[0],
                se,
                t_stat,
                p_value,
                n_obs: fit.n_obs,
                zero_variance: false,
            });
        }
    }
    Ok(out)
}

pub fn write_balance_csv(path: &Path, rows: &[BalanceRow]) -> Result<PathBuf> {
    let mut out = CsvOut::create(
        path,
        &["origin", "characteristic", "correlation", "slope", "se", "t_stat", "p_value", "n_obs", "zero_variance"],
    )?;
    for r in rows {
        out.row(&[
            r.origin.to_string(),
            r.characteristic.clone(),
            fmt(r.correlation),
            fmt(r.slope),
            fmt(r.se),
            fmt(r.t_stat),
            fmt(r.p_value),
            r.n_obs.to_string(),
            r.zero_variance.to_string(),
        ])?;
    }
    out.finish()
}

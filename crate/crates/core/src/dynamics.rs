//! IV event study with binned endpoints and its distributed-lag twin.
//!
//! For a window [j_lo, j_hi] with j_lo ≤ −1 < 0 ≤ j_hi the event-study
//! regressors are first differences ΔM^(j) = M_{t−j} − M_{t−j−1} for interior
//! j, a lower bin M_{T_end} − M_{t−j_lo−1} and an upper bin
//! M_{t−j_hi} − M_{T_start}. The panel-boundary terms are zone constants, so
//! with zone effects the model is an exact reparameterisation of the
//! distributed lag Σ_{h=j_lo+1}^{j_hi} φ_h M_{t−h}. The j = −1 column is
//! omitted (μ_{−1} = 0), and so is the j = −1 instrument difference, since the
//! full set of instrument differences sums to a zone constant.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fe::Dim;
use crate::frame::ZoneYearFrame;
use crate::iv::{self, Column, IvFit};
use crate::output::{fmt, CsvOut};
use crate::regression::RegressionSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub lo: i32,
    pub hi: i32,
}

impl Window {
    pub fn new(lo: i32, hi: i32) -> Result<Window> {
        if hi < 0 {
            return Err(Error::InvalidInput(format!("event window upper end {hi} must be ≥ 0")));
        }
        if lo > -1 {
            return Err(Error::InvalidInput(format!("event window lower end {lo} must be ≤ −1")));
        }
        Ok(Window { lo, hi })
    }

    /// Event times with an estimated coefficient (all but −1).
    pub fn estimated(&self) -> Vec<i32> {
        (self.lo..=self.hi).filter(|&j| j != -1).collect()
    }

    /// Lags h of the equivalent distributed-lag model.
    pub fn lags(&self) -> Vec<i32> {
        (self.lo + 1..=self.hi).collect()
    }
}

impl Default for Window {
    fn default() -> Self {
        Window { lo: -5, hi: 5 }
    }
}

/// Value of a zone-major series at `t − h`, NaN outside the panel.
fn at(series: &[f64], ny: usize, row: usize, h: i32) -> f64 {
    let (z, t) = (row / ny, (row % ny) as i32);
    let s = t - h;
    if s < 0 || s >= ny as i32 {
        f64::NAN
    } else {
        series[z * ny + s as usize]
    }
}

/// Whether a row has full support for every column of the window.
pub fn in_support(ny: usize, row: usize, w: Window) -> bool {
    let t = (row % ny) as i32;
    t >= w.hi && t <= ny as i32 - 1 + w.lo
}

/// Event-study columns for every j in the window (including −1); rows
/// without support are NaN.
pub fn event_columns(series: &[f64], ny: usize, w: Window) -> Vec<(i32, Vec<f64>)> {
    let n = series.len();
    let last = ny as i32 - 1;
    (w.lo..=w.hi)
        .map(|j| {
            let v = (0..n)
                .map(|r| {
                    if !in_support(ny, r, w) {
                        return f64::NAN;
                    }
                    let t = (r % ny) as i32;
                    if j == w.lo {
                        at(series, ny, r, t - last) - at(series, ny, r, j + 1)
                    } else if j == w.hi {
                        at(series, ny, r, j) - at(series, ny, r, t)
                    } else {
                        at(series, ny, r, j) - at(series, ny, r, j + 1)
                    }
                })
                .collect();
            (j, v)
        })
        .collect()
}

/// Lagged levels M_{t−h} for the distributed-lag form, NaN off support.
pub fn lag_columns(series: &[f64], ny: usize, w: Window) -> Vec<(i32, Vec<f64>)> {
    w.lags()
        .into_iter()
        .map(|h| {
            let v =
                (0..series.len()).map(|r| if in_support(ny, r, w) { at(series, ny, r, h) } else { f64::NAN }).collect();
            (h, v)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventDesign {
    pub window: Window,
    pub series: String,
    /// (j, column) for every estimated j.
    pub regressors: Vec<(i32, Column)>,
    /// Instrument differences for every variant and estimated j.
    pub instruments: Vec<Column>,
    /// Distributed-lag regressors and instruments.
    pub lag_regressors: Vec<Column>,
    pub lag_instruments: Vec<Column>,
}

/// Builds the event-study and distributed-lag designs for `series` (e.g.
/// `m`) and the instrument columns in `instruments` (e.g. `b`, `b_sigma`).
pub fn build_event_design(
    frame: &ZoneYearFrame,
    series: &str,
    instruments: &[String],
    w: Window,
) -> Result<EventDesign> {
    let ny = frame.calendar.n_years;
    if ny as i32 <= w.hi - w.lo {
        return Err(Error::InvalidInput(format!("{ny} years cannot support event window [{}, {}]", w.lo, w.hi)));
    }
    let m = frame.get(series)?;
    let keep = |j: i32| j != -1;
    let regressors = event_columns(&m, ny, w)
        .into_iter()
        .filter(|(j, _)| keep(*j))
        .map(|(j, v)| (j, Column::new(format!("d_{series}_{j}"), v)))
        .collect();
    let lag_regressors =
        lag_columns(&m, ny, w).into_iter().map(|(h, v)| Column::new(format!("{series}_lag{h}"), v)).collect();
    let mut inst = Vec::new();
    let mut lag_inst = Vec::new();
    for name in instruments {
        let b = frame.get(name)?;
        for (j, v) in event_columns(&b, ny, w).into_iter().filter(|(j, _)| keep(*j)) {
            inst.push(Column::new(format!("d_{name}_{j}"), v));
        }
        for (h, v) in lag_columns(&b, ny, w) {
            lag_inst.push(Column::new(format!("{name}_lag{h}"), v));
        }
    }
    Ok(EventDesign {
        window: w,
        series: series.to_string(),
        regressors,
        instruments: inst,
        lag_regressors,
        lag_instruments: lag_inst,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventCoef {
    pub j: i32,
    pub mu: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventStudyFit {
    pub window: Window,
    /// One entry per j in the window, including μ_{−1} = 0.
    pub coefs: Vec<EventCoef>,
    pub fit: IvFit,
}

impl EventStudyFit {
    pub fn mu(&self, j: i32) -> Option<f64> {
        self.coefs.iter().find(|c| c.j == j).map(|c| c.mu)
    }

    pub fn write_csv(&self, path: &Path) -> Result<PathBuf> {
        let mut out = CsvOut::create(path, &["j", "mu_hat", "se", "ci_low", "ci_high"])?;
        for c in &self.coefs {
            let z = 1.959963984540054;
            out.row(&[c.j.to_string(), fmt(c.mu), fmt(c.se), fmt(c.mu - z * c.se), fmt(c.mu + z * c.se)])?;
        }
        out.finish()
    }
}

fn check_zone_fe(spec: &RegressionSpec) -> Result<()> {
    let has_zone = spec.fe.iter().any(|t| t.0 == [Dim::Zone] || t.0 == [Dim::Destination]);
    if !has_zone {
        return Err(Error::InvalidInput("event study requires zone fixed effects".into()));
    }
    Ok(())
}

fn with_design(frame: &ZoneYearFrame, spec: &RegressionSpec, endog: &[Column], inst: &[Column]) -> Result<IvFit> {
    let mut base = spec.clone();
    base.endogenous.clear();
    base.instruments.clear();
    let mut d = base.design(frame)?;
    d.endogenous = endog.to_vec();
    d.instruments = inst.to_vec();
    iv::fit(&d)
}

/// 2SLS of the event-study form. `spec` supplies outcome, transform,
/// controls, fixed effects (zone effects required) and VCE; its endogenous
/// and instrument lists are replaced by the event design.
pub fn fit_iv_event_study(frame: &ZoneYearFrame, design: &EventDesign, spec: &RegressionSpec) -> Result<EventStudyFit> {
    check_zone_fe(spec)?;
    let endog: Vec<Column> = design.regressors.iter().map(|(_, c)| c.clone()).collect();
    let fit = with_design(frame, spec, &endog, &design.instruments)?;
    let se = fit.se();
    let mut coefs = Vec::new();
    for j in design.window.lo..=design.window.hi {
        if j == -1 {
            coefs.push(EventCoef { j, mu: 0.0, se: 0.0 });
        } else {
            let i = design.regressors.iter().position(|(jj, _)| *jj == j).expect("estimated j");
            coefs.push(EventCoef { j, mu: fit.coef[i], se: se[i] });
        }
    }
    Ok(EventStudyFit { window: design.window, coefs, fit })
}

/// 2SLS of the equivalent distributed-lag form in levels.
pub fn fit_distributed_lag(frame: &ZoneYearFrame, design: &EventDesign, spec: &RegressionSpec) -> Result<IvFit> {
    check_zone_fe(spec)?;
    with_design(frame, spec, &design.lag_regressors, &design.lag_instruments)
}

/// Fits several windows in parallel on the same frame.
pub fn fit_windows(
    frame: &ZoneYearFrame,
    series: &str,
    instruments: &[String],
    windows: &[Window],
    spec: &RegressionSpec,
) -> Vec<Result<EventStudyFit>> {
    windows
        .par_iter()
        .map(|&w| {
            let d = build_event_design(frame, series, instruments, w)?;
            fit_iv_event_study(frame, &d, spec)
        })
        .collect()
}

/// Cumulative event-study coefficients implied by distributed-lag
/// coefficients φ_h, h = j_lo+1..=j_hi.
pub fn cumulative_from_lags(w: Window, phi: &[f64]) -> Vec<(i32, f64)> {
    let lags = w.lags();
    let get = |h: i32| phi[lags.iter().position(|&x| x == h).expect("lag in window")];
    (w.lo..=w.hi)
        .map(|j| {
            let mu = if j >= 0 {
                (0..=j).map(get).sum()
            } else if j == -1 {
                0.0
            } else {
                -(j + 1..=-1).map(get).sum::<f64>()
            };
            (j, mu)
        })
        .collect()
}

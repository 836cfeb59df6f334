//! Permutation placebo: the outcome of each zone is replaced by that of a
//! randomly drawn other zone in the same state and the equation re-estimated.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::frame::ZoneYearFrame;
use crate::geo::GeoRegistry;
use crate::iv::{self, Prepared};
use crate::output::{fmt, CsvOut};
use crate::regression::RegressionSpec;
use crate::rng::stream;
use crate::vce::VceMode;

const Z_975: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboOptions {
    pub n_draws: usize,
    pub seed: u64,
    /// Debug switch: every zone keeps its own outcome.
    pub identity: bool,
    /// Cluster each draw by the zone whose outcome a row carries instead of
    /// using the spec's VCE. Rows that share a drawn zone share its errors.
    pub cluster_by_outcome_zone: bool,
}

impl Default for PlaceboOptions {
    fn default() -> Self {
        PlaceboOptions { n_draws: 1000, seed: 0, identity: false, cluster_by_outcome_zone: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboDraw {
    pub draw_id: usize,
    pub estimate: f64,
    pub se: f64,
    /// Two-sided 5% critical value: t(G−1) under one-way clustering with G
    /// clusters, normal otherwise.
    pub critical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboReport {
    pub draws: Vec<PlaceboDraw>,
    /// Unpermuted estimate on the placebo sample.
    pub baseline: f64,
    pub mean: f64,
    pub sd: f64,
    /// 2.5% and 97.5% percentiles of the draw distribution.
    pub ci_low: f64,
    pub ci_high: f64,
    /// The percentile interval excludes zero.
    pub interval_rejects: bool,
    /// Share of draws whose own |t| exceeds its 5% critical value.
    pub draw_rejection_rate: f64,
    pub excluded_zones: Vec<u32>,
    pub notes: Vec<String>,
}

impl PlaceboReport {
    pub fn write_csv(&self, path: &Path) -> Result<PathBuf> {
        let mut out = CsvOut::create(path, &["draw_id", "estimate", "se"])?;
        for d in &self.draws {
            out.row(&[d.draw_id.to_string(), fmt(d.estimate), fmt(d.se)])?;
        }
        out.finish()
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Runs `opts.n_draws` placebo regressions of `spec` (its first endogenous
/// regressor is reported). Zones in single-zone states are excluded.
pub fn permutation_placebo(
    frame: &ZoneYearFrame,
    spec: &RegressionSpec,
    geo: &GeoRegistry,
    opts: &PlaceboOptions,
) -> Result<PlaceboReport> {
    if opts.n_draws == 0 {
        return Err(Error::InvalidInput("placebo needs at least one draw".into()));
    }
    let n = geo.len();
    let ny = frame.calendar.n_years;
    let peers: Vec<Vec<usize>> =
        (0..n).map(|d| geo.zones_in_state(geo.state_index(d)).into_iter().filter(|&o| o != d).collect()).collect();
    let excluded: Vec<usize> = (0..n).filter(|&d| peers[d].is_empty()).collect();
    let mut notes = Vec::new();
    if !excluded.is_empty() {
        notes.push(format!("{} zones in single-zone states excluded", excluded.len()));
    }
    let mut design = spec.design(frame)?;
    let y = design.y.values.clone();
    for &d in &excluded {
        for t in 0..ny {
            design.y.values[d * ny + t] = f64::NAN;
        }
    }
    let prep = Prepared::new(&design)?;
    let baseline = prep.fit_transformed(&design.y.values, &prep.transform(&design.y.values)?, false, false)?.coef[0];

    let draws: Vec<PlaceboDraw> = (0..opts.n_draws)
        .into_par_iter()
        .map(|i| -> Result<PlaceboDraw> {
            let mut rng = stream(opts.seed, "placebo", i as u64);
            let mut yp = design.y.values.clone();
            let mut source: Vec<u32> = (0..n as u32).collect();
            for d in 0..n {
                if peers[d].is_empty() {
                    continue;
                }
                let r = if opts.identity { d } else { peers[d][rng.random_range(0..peers[d].len())] };
                source[d] = r as u32;
                for t in 0..ny {
                    yp[d * ny + t] = y[r * ny + t];
                }
            }
            let codes: Vec<u32> = (0..frame.len()).map(|row| source[row / ny]).collect();
            let fit = if prep.rows.iter().all(|&r| yp[r].is_finite()) {
                let yt = prep.transform(&yp)?;
                if opts.cluster_by_outcome_zone {
                    let mut p = prep.clone();
                    p.vce_mode = VceMode::Cluster(vec![prep.rows.iter().map(|&r| codes[r]).collect()]);
                    p.fit_transformed(&yp, &yt, false, false)?
                } else {
                    prep.fit_transformed(&yp, &yt, false, false)?
                }
            } else {
                let mut d = design.clone();
                d.y.values = yp;
                if opts.cluster_by_outcome_zone {
                    d.vce = VceMode::Cluster(vec![codes]);
                }
                iv::fit(&d)?
            };
            let critical = match fit.vce.n_clusters.as_slice() {
                [g] if *g > 1 => StudentsT::new(0.0, 1.0, (*g - 1) as f64).map_or(Z_975, |t| t.inverse_cdf(0.975)),
                _ => Z_975,
            };
            Ok(PlaceboDraw { draw_id: i, estimate: fit.coef[0], se: fit.se()[0], critical })
        })
        .collect::<Result<_>>()?;

    let est: Vec<f64> = draws.iter().map(|d| d.estimate).collect();
    let k = est.len() as f64;
    let mean = est.iter().sum::<f64>() / k;
    let sd = if est.len() > 1 { (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() } else { 0.0 };
    let mut sorted = est.clone();
    sorted.sort_by(f64::total_cmp);
    let ci_low = percentile(&sorted, 0.025);
    let ci_high = percentile(&sorted, 0.975);
    let draw_rejection_rate = draws.iter().filter(|d| (d.estimate / d.se).abs() > d.critical).count() as f64 / k;
    Ok(PlaceboReport {
        draws,
        baseline,
        mean,
        sd,
        ci_low,
        ci_high,
        interval_rejects: ci_low > 0.0 || ci_high < 0.0,
        draw_rejection_rate,
        excluded_zones: excluded.iter().map(|&d| geo.id(d).0).collect(),
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolated_percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert!((percentile(&v, 0.975) - 4.9).abs() < 1e-12);
    }
}

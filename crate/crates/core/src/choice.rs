//! Location-choice estimation: fixed-effects least squares on log odds of
//! moving versus staying, and the implied choice probabilities over all
//! destinations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fe::{Dim, Factor, FeSpec, FeTerm, FittedEffects};
use crate::geo::GeoRegistry;
use crate::iv::{self, Column, Design};
use crate::output::{fmt, CsvOut};
use crate::panel::{Calendar, LogOddsKeys, LogOddsRecord, PolicyPanel, TaxField};
use crate::simulator::softmax;
use crate::vce::VceMode;

/// Regressor names in estimation order.
pub const TAX_TERM: &str = "d_ln_net_tax";
pub const CORP_TERMS: [&str; 3] = ["d_ln_net_citr", "d_ln_itc", "d_ln_rtc"];

/// Pair, year effects; clusters by pair, origin state × year and destination
/// state × year.
pub fn default_fe_spec() -> FeSpec {
    FeSpec {
        terms: vec![FeTerm::pair(), FeTerm::single(Dim::Year)],
        clusters: vec![
            FeTerm::pair(),
            FeTerm(vec![Dim::OriginState, Dim::Year]),
            FeTerm(vec![Dim::DestinationState, Dim::Year]),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceOptions {
    pub tax: TaxField,
    /// Include the three firm-side policy differences.
    pub corporate: bool,
    pub fe: FeSpec,
    /// Use record weights when present.
    pub weighted: bool,
}

impl Default for ChoiceOptions {
    fn default() -> Self {
        ChoiceOptions { tax: TaxField::Atr95, corporate: true, fe: default_fe_spec(), weighted: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChoiceEstimates {
    pub tax: TaxField,
    pub eta: f64,
    /// Firm-side coefficients (zero when not estimated).
    pub eta_prime: [f64; 3],
    pub corporate: bool,
    pub terms: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub vce: nalgebra::DMatrix<f64>,
    pub vce_label: String,
    pub psd_clipped: bool,
    pub spec: FeSpec,
    pub effects: FittedEffects,
    pub n_obs: usize,
    pub r2: f64,
    pub r2_within: f64,
    pub adj_r2: f64,
    pub adj_r2_within: f64,
    pub notes: Vec<String>,
}

impl ChoiceEstimates {
    /// Linear index of a move from `o` to `c` ≠ `o` in year index `t` given
    /// the regressor differences, excluding fixed effects.
    pub fn slope_index(&self, d_tax: f64, d_corp: [f64; 3]) -> f64 {
        let mut v = self.eta * d_tax;
        for k in 0..3 {
            v += self.eta_prime[k] * d_corp[k];
        }
        v
    }
}

/// Estimates the log-odds equation by within-transformed least squares.
pub fn estimate_log_odds(
    records: &[LogOddsRecord],
    geo: &GeoRegistry,
    opts: &ChoiceOptions,
) -> Result<ChoiceEstimates> {
    opts.fe.validate()?;
    if records.is_empty() {
        return Err(Error::Degenerate("no log-odds records (all flows or stays are zero)".into()));
    }
    let keys = LogOddsKeys { records, geo };
    let factors: Vec<Factor> = opts.fe.terms.iter().map(|t| Factor::build(t, &keys)).collect::<Result<_>>()?;
    let clusters: Vec<Vec<u32>> =
        opts.fe.clusters.iter().map(|t| Factor::build(t, &keys).map(|f| f.codes)).collect::<Result<_>>()?;
    let mut regs = vec![Column::new(TAX_TERM, records.iter().map(|r| r.d_tax).collect())];
    if opts.corporate {
        for (k, name) in CORP_TERMS.iter().enumerate() {
            regs.push(Column::new(*name, records.iter().map(|r| r.d_corp[k]).collect()));
        }
    }
    let mut d = Design::new(Column::new("log_odds", records.iter().map(|r| r.lhs).collect()));
    d.endogenous = regs;
    d.factors = factors;
    d.vce = if clusters.is_empty() { VceMode::Robust } else { VceMode::Cluster(clusters) };
    d.recover_effects = true;
    if opts.weighted {
        d.weights = Some(records.iter().map(|r| r.weight.unwrap_or(1.0)).collect());
    }
    let fit = iv::fit_fe_ols(&d)?;
    let n = fit.n_obs as f64;
    let k = fit.coef.len() as f64;
    let df_fe = fit.absorbed_dof as f64;
    let adj = |r2: f64, extra: f64| 1.0 - (1.0 - r2) * (n - 1.0) / (n - k - extra);
    let mut eta_prime = [0.0; 3];
    if opts.corporate {
        eta_prime.copy_from_slice(&fit.coef[1..4]);
    }
    Ok(ChoiceEstimates {
        tax: opts.tax,
        eta: fit.coef[0],
        eta_prime,
        corporate: opts.corporate,
        terms: fit.terms.clone(),
        se: fit.se(),
        coef: fit.coef.clone(),
        vce: fit.vce.matrix.clone(),
        vce_label: fit.vce.label.clone(),
        psd_clipped: fit.vce.psd_clipped,
        spec: opts.fe.clone(),
        effects: fit.effects.clone().unwrap_or_else(FittedEffects::empty),
        n_obs: fit.n_obs,
        r2: fit.r2,
        r2_within: fit.r2_within,
        adj_r2: adj(fit.r2, df_fe),
        adj_r2_within: adj(fit.r2_within, 0.0),
        notes: fit.notes,
    })
}

/// Treatment of fixed-effect levels never observed in estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeRule {
    /// Unobserved pair effects take their origin's mean observed pair effect;
    /// other unobserved levels take the factor mean (zero).
    #[default]
    ZeroMean,
    /// Remove the destination from the origin's choice set.
    Drop,
    /// Fail.
    Strict,
}

impl FromStr for ImputeRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zero_mean" | "zero-mean" => Ok(ImputeRule::ZeroMean),
            "drop" => Ok(ImputeRule::Drop),
            "strict" => Ok(ImputeRule::Strict),
            other => Err(Error::InvalidInput(format!("unknown impute rule `{other}`"))),
        }
    }
}

/// Choice probabilities P_oct over every destination, including staying.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub n_zones: usize,
    pub calendar: Calendar,
    /// Indexed `(o * n_years + t) * n_zones + c`.
    pub values: Vec<f64>,
    /// Number of (o, c, t) indices that used an imputed or dropped level.
    pub imputed: usize,
}

impl Shares {
    pub fn get(&self, o: usize, c: usize, t: usize) -> f64 {
        self.values[(o * self.calendar.n_years + t) * self.n_zones + c]
    }

    pub fn row(&self, o: usize, t: usize) -> &[f64] {
        let s = (o * self.calendar.n_years + t) * self.n_zones;
        &self.values[s..s + self.n_zones]
    }

    /// Observed shares M_odt / I_ot (stay share on the diagonal); zero where
    /// the stock is zero.
    pub fn observed(flows: &crate::panel::FlowPanel) -> Shares {
        let n = flows.n_zones;
        let ny = flows.calendar.n_years;
        let mut values = vec![0.0; n * ny * n];
        for o in 0..n {
            for t in 0..ny {
                let stock = flows.stock(o, t);
                if stock <= 0.0 {
                    continue;
                }
                let base = (o * ny + t) * n;
                values[base + o] = flows.stay(o, t) / stock;
                for &(d, m) in flows.outflows(o, t) {
                    values[base + d as usize] = m / stock;
                }
            }
        }
        Shares { n_zones: n, calendar: flows.calendar, values, imputed: 0 }
    }

    pub fn write_csv(&self, path: &Path, geo: &GeoRegistry) -> Result<PathBuf> {
        let mut out = CsvOut::create(path, &["origin", "dest", "year", "p_hat"])?;
        for o in 0..self.n_zones {
            for t in 0..self.calendar.n_years {
                for c in 0..self.n_zones {
                    out.row(&[
                        geo.id(o).to_string(),
                        geo.id(c).to_string(),
                        self.calendar.year(t).to_string(),
                        fmt(self.get(o, c, t)),
                    ])?;
                }
            }
        }
        out.finish()
    }
}

fn key_for(term: &FeTerm, geo: &GeoRegistry, o: usize, c: usize, year: i32) -> Vec<i64> {
    term.0
        .iter()
        .map(|d| match d {
            Dim::Origin => geo.id(o).0 as i64,
            Dim::Destination | Dim::Zone => geo.id(c).0 as i64,
            Dim::Year => year as i64,
            Dim::OriginState => geo.state_index(o) as i64,
            Dim::DestinationState | Dim::State => geo.state_index(c) as i64,
        })
        .collect()
}

/// Evaluates fitted move indices for any policy panel.
struct Predictor<'a> {
    est: &'a ChoiceEstimates,
    geo: &'a GeoRegistry,
    calendar: Calendar,
    rows: Vec<crate::panel::PolicyRow>,
    lookups: Vec<HashMap<Vec<i64>, f64>>,
    /// Mean observed pair effect per origin id, for pair terms.
    origin_means: Vec<HashMap<i64, f64>>,
    rule: ImputeRule,
}

impl<'a> Predictor<'a> {
    fn new(
        est: &'a ChoiceEstimates,
        policies: &PolicyPanel,
        geo: &'a GeoRegistry,
        calendar: Calendar,
        rule: ImputeRule,
    ) -> Result<Self> {
        let rows = policies.zone_rows(geo, &calendar)?;
        let origin_means = est
            .effects
            .terms
            .iter()
            .enumerate()
            .map(|(k, term)| {
                let mut acc: HashMap<i64, (f64, usize)> = HashMap::new();
                if let Some(pos) = term.0.iter().position(|d| *d == Dim::Origin).filter(|_| term.is_pair()) {
                    for (key, v) in est.effects.levels[k].iter().zip(&est.effects.values[k]) {
                        let e = acc.entry(key[pos]).or_insert((0.0, 0));
                        e.0 += v;
                        e.1 += 1;
                    }
                }
                acc.into_iter().map(|(o, (s, c))| (o, s / c as f64)).collect()
            })
            .collect();
        Ok(Predictor { est, geo, calendar, rows, lookups: est.effects.lookup(), origin_means, rule })
    }

    /// Move indices (fitted log odds versus staying) for every destination
    /// of origin `o` in year index `t`; the stay entry is zero and dropped
    /// destinations are −∞. Also returns the number of imputed levels.
    fn indices(&self, o: usize, t: usize) -> Result<(Vec<f64>, usize)> {
        let (est, geo) = (self.est, self.geo);
        let n = geo.len();
        let ny = self.calendar.n_years;
        let year = self.calendar.year(t);
        let po = &self.rows[o * ny + t];
        let (to, co) = (po.ln_net_of_tax(est.tax), po.corporate_terms());
        let mut idx = vec![0.0; n];
        let mut imputed = 0;
        for c in (0..n).filter(|&c| c != o) {
            let pc = &self.rows[c * ny + t];
            let cc = pc.corporate_terms();
            let mut v = est.effects.intercept
                + est.slope_index(pc.ln_net_of_tax(est.tax) - to, [cc[0] - co[0], cc[1] - co[1], cc[2] - co[2]]);
            let mut dropped = false;
            for (k, term) in est.effects.terms.iter().enumerate() {
                let key = key_for(term, geo, o, c, year);
                if let Some(g) = self.lookups[k].get(&key) {
                    v += g;
                    continue;
                }
                imputed += 1;
                match self.rule {
                    ImputeRule::Strict => {
                        return Err(Error::InvalidInput(format!(
                            "no estimate for `{term}` level {key:?} (origin {}, destination {}, {year})",
                            geo.id(o),
                            geo.id(c)
                        )))
                    }
                    ImputeRule::Drop => dropped = true,
                    ImputeRule::ZeroMean => {
                        v += self.origin_means[k].get(&(geo.id(o).0 as i64)).copied().unwrap_or(0.0);
                    }
                }
            }
            idx[c] = if dropped { f64::NEG_INFINITY } else { v };
        }
        Ok((idx, imputed))
    }
}

/// Predicted choice probabilities under `policies`.
pub fn predict_migration_probabilities(
    est: &ChoiceEstimates,
    policies: &PolicyPanel,
    geo: &GeoRegistry,
    calendar: Calendar,
    rule: ImputeRule,
) -> Result<Shares> {
    let pred = Predictor::new(est, policies, geo, calendar, rule)?;
    let n = geo.len();
    let ny = calendar.n_years;
    let cells: Vec<Result<(Vec<f64>, usize)>> = (0..n * ny)
        .into_par_iter()
        .map(|cell| {
            let (idx, imputed) = pred.indices(cell / ny, cell % ny)?;
            Ok((softmax(&idx), imputed))
        })
        .collect();
    let mut values = Vec::with_capacity(n * ny * n);
    let mut imputed = 0;
    for c in cells {
        let (p, k) = c?;
        values.extend(p);
        imputed += k;
    }
    Ok(Shares { n_zones: n, calendar, values, imputed })
}

/// Fitted move indices for one origin-year; the softmax of this vector is
/// the corresponding row of [`predict_migration_probabilities`].
pub fn linear_indices(
    est: &ChoiceEstimates,
    policies: &PolicyPanel,
    geo: &GeoRegistry,
    calendar: Calendar,
    rule: ImputeRule,
    o: usize,
    t: usize,
) -> Result<Vec<f64>> {
    Predictor::new(est, policies, geo, calendar, rule)?.indices(o, t).map(|(v, _)| v)
}

pub fn write_estimates_csv(est: &ChoiceEstimates, path: &Path) -> Result<PathBuf> {
    let mut out = CsvOut::create(path, &["term", "estimate", "se", "cluster_spec"])?;
    let clusters: Vec<String> = est.spec.clusters.iter().map(|c| c.to_string()).collect();
    let label = if clusters.is_empty() { est.vce_label.clone() } else { clusters.join(" + ") };
    for (i, term) in est.terms.iter().enumerate() {
        out.row(&[term.clone(), fmt(est.coef[i]), fmt(est.se[i]), label.clone()])?;
    }
    out.finish()
}

//! Fixed-effects OLS and multi-endogenous 2SLS.
//!
//! Estimation works on within-transformed data: all columns are demeaned
//! jointly (one shared linear operator), scaled by √w for weighted fits, and
//! the structural equation is solved against the projection of the regressors
//! onto the span of instruments and exogenous controls. Exogenous controls
//! that are absorbed by the fixed effects or linearly dependent are dropped
//! with a note; dependent instruments are dropped the same way.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fe::{singleton_mask, Absorber, Dim, Factor, FeTerm, FittedEffects};
use crate::linalg::{orthonormal_basis, spd_inverse};
use crate::vce::{compute_vce, SandwichInputs, Vce, VceMode};
use crate::weakiv::{self, WeakIvDiagnostics};

/// A named data column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

impl Column {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Column { name: name.into(), values }
    }
}

/// Builds the instrument set a ∪ b ∪ {a·b}, interactions ordered a-major.
/// With `dedup`, columns identical to an earlier column are dropped.
pub fn expand_interactions(a: &[Column], b: &[Column], dedup: bool) -> Result<Vec<Column>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("interaction sets must be nonempty".into()));
    }
    let n = a[0].values.len();
    if a.iter().chain(b).any(|c| c.values.len() != n) {
        return Err(Error::InvalidInput("interaction columns are not aligned".into()));
    }
    let mut out: Vec<Column> = a.iter().chain(b).cloned().collect();
    for x in a {
        for y in b {
            let v = x.values.iter().zip(&y.values).map(|(p, q)| p * q).collect();
            out.push(Column::new(format!("{}*{}", x.name, y.name), v));
        }
    }
    if dedup {
        let mut kept: Vec<Column> = Vec::with_capacity(out.len());
        for c in out {
            if !kept.iter().any(|k| k.values == c.values) {
                kept.push(c);
            }
        }
        out = kept;
    }
    Ok(out)
}

/// Everything needed to fit one equation.
#[derive(Debug, Clone)]
pub struct Design {
    pub y: Column,
    /// Endogenous regressors (instrumented when `instruments` is nonempty,
    /// plain regressors otherwise).
    pub endogenous: Vec<Column>,
    pub exogenous: Vec<Column>,
    pub instruments: Vec<Column>,
    pub factors: Vec<Factor>,
    pub weights: Option<Vec<f64>>,
    pub vce: VceMode,
    pub drop_singletons: bool,
    /// Recover fixed-effect estimates after fitting.
    pub recover_effects: bool,
}

impl Design {
    pub fn new(y: Column) -> Self {
        Design {
            y,
            endogenous: vec![],
            exogenous: vec![],
            instruments: vec![],
            factors: vec![],
            weights: None,
            vce: VceMode::Robust,
            drop_singletons: true,
            recover_effects: false,
        }
    }

    pub fn n(&self) -> usize {
        self.y.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ols,
    TwoSls,
}

/// First-stage regression of one endogenous regressor on the instruments
/// (partialling out controls and fixed effects).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirstStage {
    pub endogenous: String,
    pub instruments: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    /// Wald statistic of the excluded instruments divided by their count,
    /// under the fit's VCE mode.
    pub f_stat: f64,
    pub partial_r2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvFit {
    pub kind: EstimatorKind,
    /// Endogenous terms first, then retained exogenous controls.
    pub terms: Vec<String>,
    pub coef: Vec<f64>,
    pub vce: Vce,
    pub n_obs: usize,
    /// Indices (into the design rows) of the estimation sample.
    pub rows: Vec<usize>,
    pub dropped_missing: usize,
    pub dropped_singletons: usize,
    pub absorbed_dof: usize,
    pub rss: f64,
    pub r2: f64,
    pub r2_within: f64,
    /// Structural residuals on the estimation sample (unweighted scale).
    pub residuals: Vec<f64>,
    /// y − residual on the estimation sample, i.e. fitted values including
    /// fixed effects.
    pub fitted: Vec<f64>,
    pub effects: Option<FittedEffects>,
    pub first_stages: Vec<FirstStage>,
    pub diagnostics: Option<WeakIvDiagnostics>,
    pub instruments_used: Vec<String>,
    pub notes: Vec<String>,
}

impl IvFit {
    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    pub fn coef_of(&self, term: &str) -> Option<f64> {
        self.index_of(term).map(|i| self.coef[i])
    }

    pub fn se(&self) -> Vec<f64> {
        self.vce.se()
    }

    pub fn se_of(&self, term: &str) -> Option<f64> {
        self.index_of(term).map(|i| self.vce.matrix[(i, i)].max(0.0).sqrt())
    }
}

/// Relative norm below which a column counts as absorbed by fixed effects.
const ABSORBED_TOL: f64 = 1e-8;

/// Within-transformed, √w-scaled data on the estimation sample, together with
/// the matrices shared by every fit of the same right-hand side.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub kind: EstimatorKind,
    pub rows: Vec<usize>,
    pub dropped_missing: usize,
    pub dropped_singletons: usize,
    pub absorber: Absorber,
    pub sqrt_w: Option<Vec<f64>>,
    pub endog_names: Vec<String>,
    pub exog_names: Vec<String>,
    pub instrument_names: Vec<String>,
    /// Transformed endogenous regressors (n × k).
    pub x: DMatrix<f64>,
    /// Transformed retained controls (n × p).
    pub w: DMatrix<f64>,
    /// Transformed retained instruments (n × l); empty for OLS.
    pub z: DMatrix<f64>,
    /// Orthonormal basis of the controls.
    pub qw: DMatrix<f64>,
    /// Structural regressors [X, W].
    pub r: DMatrix<f64>,
    /// Projected regressors [X̂, W].
    pub r_hat: DMatrix<f64>,
    pub bread: DMatrix<f64>,
    /// Rows of (R̂'R̂)⁻¹R̂': coefficient = `proj * ỹ`.
    pub proj: DMatrix<f64>,
    pub vce_mode: VceMode,
    pub absorbed_dof: usize,
    pub notes: Vec<String>,
    /// Raw (untransformed) regressors on the sample, for effect recovery.
    raw_r: DMatrix<f64>,
}

fn finite(v: f64) -> bool {
    v.is_finite()
}

impl Prepared {
    /// Prepares the right-hand side of `d`. Rows with a non-finite value in
    /// `y`, any regressor, instrument or weight are dropped, then singleton
    /// fixed-effect groups.
    pub fn new(d: &Design) -> Result<Prepared> {
        let n = d.n();
        let all_cols = d.endogenous.iter().chain(&d.exogenous).chain(&d.instruments);
        for c in all_cols.clone() {
            if c.values.len() != n {
                return Err(Error::InvalidInput(format!(
                    "column `{}` has {} rows, expected {n}",
                    c.name,
                    c.values.len()
                )));
            }
        }
        for f in &d.factors {
            if f.codes.len() != n {
                return Err(Error::InvalidInput(format!("factor `{}` has wrong length", f.term)));
            }
        }
        let mut keep: Vec<bool> = (0..n)
            .map(|i| {
                finite(d.y.values[i])
                    && all_cols.clone().all(|c| finite(c.values[i]))
                    && d.weights.as_ref().is_none_or(|w| finite(w[i]) && w[i] > 0.0)
            })
            .collect();
        let dropped_missing = keep.iter().filter(|k| !**k).count();
        let mut factors: Vec<Factor> = d.factors.iter().map(|f| f.subset(&keep)).collect();
        let mut dropped_singletons = 0;
        if d.drop_singletons && !factors.is_empty() {
            let mask = singleton_mask(&factors);
            dropped_singletons = mask.iter().filter(|k| !**k).count();
            if dropped_singletons > 0 {
                let mut it = mask.iter();
                for k in keep.iter_mut().filter(|k| **k) {
                    *k = *it.next().expect("mask covers kept rows");
                }
                factors = factors.iter().map(|f| f.subset(&mask)).collect();
            }
        }
        let rows: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
        let m = rows.len();
        if m == 0 {
            return Err(Error::Degenerate("estimation sample is empty".into()));
        }
        let mut notes = Vec::new();
        if dropped_singletons > 0 {
            notes.push(format!("dropped {dropped_singletons} singleton observations"));
        }
        if factors.is_empty() {
            factors.push(Factor::from_keys(FeTerm(vec![Dim::Zone]), vec![vec![0]; m]));
        }
        let weights: Option<Vec<f64>> = d.weights.as_ref().map(|w| rows.iter().map(|&i| w[i]).collect());
        let absorber = Absorber::new(factors, weights.clone())?;
        let absorbed_dof = absorber.absorbed_dof();
        let sqrt_w: Option<Vec<f64>> = weights.as_ref().map(|w| w.iter().map(|v| v.sqrt()).collect());

        let take = |c: &Column| -> Vec<f64> { rows.iter().map(|&i| c.values[i]).collect() };
        let k = d.endogenous.len();
        let p0 = d.exogenous.len();
        let mut cols: Vec<Vec<f64>> = d.endogenous.iter().chain(&d.exogenous).chain(&d.instruments).map(take).collect();
        let raw_cols = cols.clone();
        absorber.demean(&mut cols)?;
        if let Some(sw) = &sqrt_w {
            for c in cols.iter_mut() {
                c.iter_mut().zip(sw).for_each(|(v, s)| *v *= s);
            }
        }
        let raw_norm = |j: usize| -> f64 {
            let s = sqrt_w.as_deref();
            raw_cols[j].iter().enumerate().map(|(i, v)| (v * s.map_or(1.0, |s| s[i])).powi(2)).sum::<f64>().sqrt()
        };
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let absorbed = |j: usize| norm(&cols[j]) <= ABSORBED_TOL * raw_norm(j).max(f64::MIN_POSITIVE);

        for j in 0..k {
            if absorbed(j) {
                return Err(Error::Collinear(format!("`{}` is absorbed by the fixed effects", d.endogenous[j].name)));
            }
        }
        // Controls: drop absorbed and dependent columns.
        let mut w_idx = Vec::new();
        for j in 0..p0 {
            if absorbed(k + j) {
                notes.push(format!("control `{}` absorbed by fixed effects; dropped", d.exogenous[j].name));
            } else {
                w_idx.push(k + j);
            }
        }
        let w_raw = DMatrix::from_fn(m, w_idx.len(), |i, j| cols[w_idx[j]][i]);
        let (qw, kept) = orthonormal_basis(&w_raw, None);
        for (pos, &j) in w_idx.iter().enumerate() {
            if !kept.contains(&pos) {
                notes.push(format!("control `{}` collinear with other controls; dropped", d.exogenous[j - k].name));
            }
        }
        let w_idx: Vec<usize> = kept.iter().map(|&p| w_idx[p]).collect();
        let exog_names: Vec<String> = w_idx.iter().map(|&j| d.exogenous[j - k].name.clone()).collect();
        let w = DMatrix::from_fn(m, w_idx.len(), |i, j| cols[w_idx[j]][i]);
        let x = DMatrix::from_fn(m, k, |i, j| cols[j][i]);
        let resid_w = |a: &DMatrix<f64>| -> DMatrix<f64> {
            if qw.ncols() == 0 {
                a.clone()
            } else {
                a - &qw * (qw.transpose() * a)
            }
        };
        let x_perp = resid_w(&x);
        {
            let (_, kx) = orthonormal_basis(&x_perp, Some(&(0..k).map(|j| x.column(j).norm()).collect::<Vec<_>>()));
            if kx.len() < k {
                let bad: Vec<&str> =
                    (0..k).filter(|j| !kx.contains(j)).map(|j| d.endogenous[j].name.as_str()).collect();
                return Err(Error::Collinear(format!("{} collinear with other regressors", bad.join(", "))));
            }
        }

        let (kind, z, instrument_names, x_hat) = if d.instruments.is_empty() {
            (EstimatorKind::Ols, DMatrix::zeros(m, 0), vec![], x.clone())
        } else {
            if d.instruments.len() < k {
                return Err(Error::Underidentified(format!(
                    "{} instruments for {k} endogenous regressors",
                    d.instruments.len()
                )));
            }
            let l0 = d.instruments.len();
            let mut z_idx = Vec::new();
            for j in 0..l0 {
                if absorbed(k + p0 + j) {
                    notes.push(format!("instrument `{}` absorbed by fixed effects; dropped", d.instruments[j].name));
                } else {
                    z_idx.push(k + p0 + j);
                }
            }
            let z_all = DMatrix::from_fn(m, z_idx.len(), |i, j| cols[z_idx[j]][i]);
            let z_perp = resid_w(&z_all);
            let scale: Vec<f64> = (0..z_all.ncols()).map(|j| z_all.column(j).norm()).collect();
            let (qz, kz) = orthonormal_basis(&z_perp, Some(&scale));
            for (pos, &j) in z_idx.iter().enumerate() {
                if !kz.contains(&pos) {
                    notes.push(format!(
                        "instrument `{}` linearly dependent on other instruments or controls; dropped",
                        d.instruments[j - k - p0].name
                    ));
                }
            }
            if kz.len() < k {
                return Err(Error::Underidentified(format!(
                    "{} usable instruments for {k} endogenous regressors",
                    kz.len()
                )));
            }
            let z_idx: Vec<usize> = kz.iter().map(|&p| z_idx[p]).collect();
            let names = z_idx.iter().map(|&j| d.instruments[j - k - p0].name.clone()).collect();
            let z = DMatrix::from_fn(m, z_idx.len(), |i, j| cols[z_idx[j]][i]);
            let x_hat_perp = &qz * (qz.transpose() * &x_perp);
            let xs: Vec<f64> = (0..k).map(|j| x_perp.column(j).norm()).collect();
            let (_, kh) = orthonormal_basis(&x_hat_perp, Some(&xs));
            if kh.len() < k {
                return Err(Error::Underidentified(
                    "first-stage cross moment is rank deficient; instruments do not separate the endogenous regressors"
                        .into(),
                ));
            }
            // X̂ = P_W X + P_{Z⊥} X.
            let x_hat = (&x - &x_perp) + x_hat_perp;
            (EstimatorKind::TwoSls, z, names, x_hat)
        };

        let kk = k + w.ncols();
        let mut r = DMatrix::zeros(m, kk);
        let mut r_hat = DMatrix::zeros(m, kk);
        r.columns_mut(0, k).copy_from(&x);
        r_hat.columns_mut(0, k).copy_from(&x_hat);
        r.columns_mut(k, w.ncols()).copy_from(&w);
        r_hat.columns_mut(k, w.ncols()).copy_from(&w);
        let qr = r_hat.clone().qr();
        let t = qr.r();
        let t_inv = t.clone().try_inverse().ok_or_else(|| Error::Singular("projected regressor matrix".into()))?;
        let bread = &t_inv * t_inv.transpose();
        let proj = &t_inv * qr.q().transpose();

        let mut raw_r = DMatrix::zeros(m, kk);
        for j in 0..k {
            raw_r.set_column(j, &DVector::from_column_slice(&raw_cols[j]));
        }
        for (pos, &j) in w_idx.iter().enumerate() {
            raw_r.set_column(k + pos, &DVector::from_column_slice(&raw_cols[j]));
        }

        Ok(Prepared {
            kind,
            rows,
            dropped_missing,
            dropped_singletons,
            absorber,
            sqrt_w,
            endog_names: d.endogenous.iter().map(|c| c.name.clone()).collect(),
            exog_names,
            instrument_names,
            x,
            w,
            z,
            qw,
            r,
            r_hat,
            bread,
            proj,
            vce_mode: d.vce.subset(&keep),
            absorbed_dof,
            notes,
            raw_r,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    /// Within-transforms and scales an outcome given on the full design rows.
    pub fn transform(&self, y_full: &[f64]) -> Result<Vec<f64>> {
        let mut y: Vec<f64> = self.rows.iter().map(|&i| y_full[i]).collect();
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("outcome has non-finite values on the estimation sample".into()));
        }
        let mut cols = vec![y];
        self.absorber.demean(&mut cols)?;
        y = cols.pop().expect("one column");
        if let Some(sw) = &self.sqrt_w {
            y.iter_mut().zip(sw).for_each(|(v, s)| *v *= s);
        }
        Ok(y)
    }

    /// Coefficients for an already transformed outcome.
    pub fn coefficients(&self, y_t: &[f64]) -> DVector<f64> {
        &self.proj * DVector::from_column_slice(y_t)
    }

    /// Fits the equation for an outcome given on the full design rows.
    pub fn fit(&self, y_full: &[f64], recover_effects: bool) -> Result<IvFit> {
        let y_t = self.transform(y_full)?;
        self.fit_transformed(y_full, &y_t, recover_effects, true)
    }

    pub fn fit_transformed(
        &self,
        y_full: &[f64],
        y_t: &[f64],
        recover_effects: bool,
        diagnostics: bool,
    ) -> Result<IvFit> {
        let n = self.n_obs();
        let yv = DVector::from_column_slice(y_t);
        let theta = &self.proj * &yv;
        let u = &yv - &self.r * &theta;
        let kk = self.r.ncols();
        let k = self.x.ncols();
        let mut scores = self.r_hat.clone();
        for i in 0..n {
            scores.row_mut(i).scale_mut(u[i]);
        }
        let rss = u.norm_squared();
        let dof = n as f64 - kk as f64 - self.absorbed_dof as f64;
        if dof <= 0.0 {
            return Err(Error::Degenerate(format!(
                "{n} observations leave no residual degrees of freedom after {kk} regressors and {} absorbed levels",
                self.absorbed_dof
            )));
        }
        let vce = compute_vce(
            &self.vce_mode,
            &SandwichInputs {
                bread: &self.bread,
                scores: &scores,
                sigma2: rss / dof,
                n,
                k: kk,
                absorbed: self.absorbed_dof,
            },
        )?;

        let y_raw: Vec<f64> = self.rows.iter().map(|&i| y_full[i]).collect();
        let unscale = |v: f64, i: usize| self.sqrt_w.as_ref().map_or(v, |s| v / s[i]);
        let residuals: Vec<f64> = (0..n).map(|i| unscale(u[i], i)).collect();
        let fitted: Vec<f64> = (0..n).map(|i| y_raw[i] - residuals[i]).collect();
        let wts = |i: usize| self.sqrt_w.as_ref().map_or(1.0, |s| s[i] * s[i]);
        let wsum: f64 = (0..n).map(wts).sum();
        let ybar = (0..n).map(|i| wts(i) * y_raw[i]).sum::<f64>() / wsum;
        let tss: f64 = (0..n).map(|i| wts(i) * (y_raw[i] - ybar).powi(2)).sum();
        let tss_within = yv.norm_squared();
        let r2 = if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN };
        let r2_within = if tss_within > 0.0 { 1.0 - rss / tss_within } else { f64::NAN };

        let effects = if recover_effects {
            let resid_raw: Vec<f64> = (0..n).map(|i| y_raw[i] - (self.raw_r.row(i) * &theta)[0]).collect();
            let raw = self.absorber.recover_effects(&resid_raw)?;
            Some(FittedEffects::normalise(self.absorber.factors(), raw))
        } else {
            None
        };

        let mut terms = self.endog_names.clone();
        terms.extend(self.exog_names.iter().cloned());
        let (first_stages, diag) = if self.kind == EstimatorKind::TwoSls && diagnostics {
            let fs = self.first_stages()?;
            let diag = weakiv::diagnose(self, &yv)?;
            (fs, Some(diag))
        } else {
            (vec![], None)
        };
        debug_assert_eq!(k + self.w.ncols(), terms.len());
        Ok(IvFit {
            kind: self.kind,
            terms,
            coef: theta.iter().copied().collect(),
            vce,
            n_obs: n,
            rows: self.rows.clone(),
            dropped_missing: self.dropped_missing,
            dropped_singletons: self.dropped_singletons,
            absorbed_dof: self.absorbed_dof,
            rss: (0..n).map(|i| u[i] * u[i]).sum(),
            r2,
            r2_within,
            residuals,
            fitted,
            effects,
            first_stages,
            diagnostics: diag,
            instruments_used: self.instrument_names.clone(),
            notes: self.notes.clone(),
        })
    }

    /// Residualises columns against the retained controls.
    pub fn partial_controls(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        if self.qw.ncols() == 0 {
            a.clone()
        } else {
            a - &self.qw * (self.qw.transpose() * a)
        }
    }

    /// Regression of each endogenous column on the instruments after
    /// partialling out controls and fixed effects.
    pub fn first_stages(&self) -> Result<Vec<FirstStage>> {
        let z = self.partial_controls(&self.z);
        let x = self.partial_controls(&self.x);
        let n = self.n_obs();
        let l = z.ncols();
        let ztz_inv =
            spd_inverse(&(z.transpose() * &z)).ok_or_else(|| Error::Singular("instrument cross moment".into()))?;
        let mut out = Vec::new();
        for j in 0..x.ncols() {
            let xj = x.column(j).into_owned();
            let pi = &ztz_inv * (z.transpose() * &xj);
            let v = &xj - &z * &pi;
            let mut scores = z.clone();
            for i in 0..n {
                scores.row_mut(i).scale_mut(v[i]);
            }
            let kk = l + self.w.ncols();
            let dof = n as f64 - kk as f64 - self.absorbed_dof as f64;
            let vce = compute_vce(
                &self.vce_mode,
                &SandwichInputs {
                    bread: &ztz_inv,
                    scores: &scores,
                    sigma2: v.norm_squared() / dof,
                    n,
                    k: kk,
                    absorbed: self.absorbed_dof,
                },
            )?;
            let f_stat = match spd_inverse(&vce.matrix) {
                Some(vi) => (pi.transpose() * vi * &pi)[0] / l as f64,
                None => f64::NAN,
            };
            let tss = xj.norm_squared();
            out.push(FirstStage {
                endogenous: self.endog_names[j].clone(),
                instruments: self.instrument_names.clone(),
                coef: pi.iter().copied().collect(),
                se: vce.se(),
                f_stat,
                partial_r2: if tss > 0.0 { 1.0 - v.norm_squared() / tss } else { f64::NAN },
            });
        }
        Ok(out)
    }
}

/// Fits the design: 2SLS when instruments are given, FE-OLS otherwise.
pub fn fit(d: &Design) -> Result<IvFit> {
    let prep = Prepared::new(d)?;
    prep.fit(&d.y.values, d.recover_effects)
}

/// FE-OLS with the `endogenous` columns as ordinary regressors.
pub fn fit_fe_ols(d: &Design) -> Result<IvFit> {
    if !d.instruments.is_empty() {
        return Err(Error::InvalidInput("OLS design must not carry instruments".into()));
    }
    fit(d)
}

/// 2SLS; requires at least as many instruments as endogenous regressors.
pub fn fit_2sls(d: &Design) -> Result<IvFit> {
    if d.endogenous.is_empty() {
        return Err(Error::InvalidInput("2SLS needs at least one endogenous regressor".into()));
    }
    if d.instruments.len() < d.endogenous.len() {
        return Err(Error::Underidentified(format!(
            "order condition fails: {} instruments for {} endogenous regressors",
            d.instruments.len(),
            d.endogenous.len()
        )));
    }
    fit(d)
}

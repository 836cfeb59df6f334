//! Weak-instrument diagnostics: the heteroskedasticity-robust effective F
//! with its critical values for a single endogenous regressor, and
//! conditional first-stage statistics for several endogenous regressors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::iv::Prepared;
use crate::linalg::{max_eigenvalue, psd_sqrt, spd_inverse, symmetrize};
use crate::vce::{compute_vce, SandwichInputs, VceMode};

/// Worst-case bias thresholds for which critical values are reported.
pub const TAUS: [f64; 4] = [0.05, 0.10, 0.20, 0.30];
/// Size of the effective-F pretest.
pub const PRETEST_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalValue {
    pub tau: f64,
    pub k_eff: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectiveF {
    pub f_eff: f64,
    /// Supremum of the normalised Nagar bias over structural parameters.
    pub b_e: f64,
    pub critical: Vec<CriticalValue>,
}

impl EffectiveF {
    pub fn critical_at(&self, tau: f64) -> Option<f64> {
        self.critical.iter().find(|c| (c.tau - tau).abs() < 1e-12).map(|c| c.value)
    }

    /// True when the effective F falls below the critical value at `tau`.
    pub fn is_weak(&self, tau: f64) -> Option<bool> {
        self.critical_at(tau).map(|cv| self.f_eff < cv)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwStat {
    pub endogenous: String,
    pub chi2: f64,
    pub chi2_df: usize,
    pub chi2_p: f64,
    pub f: f64,
    pub f_df: (usize, usize),
    /// Set when the regressor is (numerically) a linear combination of the
    /// other endogenous regressors, so that the statistic is zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeakIvDiagnostics {
    pub effective_f: Option<EffectiveF>,
    pub sw: Vec<SwStat>,
}

/// Diagnostics for a prepared 2SLS design and its transformed outcome.
pub fn diagnose(prep: &Prepared, y_t: &DVector<f64>) -> Result<WeakIvDiagnostics> {
    let z = prep.partial_controls(&prep.z);
    let x = prep.partial_controls(&prep.x);
    let y = prep.partial_controls(&DMatrix::from_column_slice(y_t.len(), 1, y_t.as_slice()));
    let p = prep.w.ncols();
    if x.ncols() == 1 {
        let ef = effective_f(
            &z,
            &x.column(0).into_owned(),
            &y.column(0).into_owned(),
            &prep.vce_mode,
            p,
            prep.absorbed_dof,
        )?;
        Ok(WeakIvDiagnostics { effective_f: Some(ef), sw: vec![] })
    } else {
        let sw = sanderson_windmeijer(&z, &x, &prep.endog_names, &prep.vce_mode, p, prep.absorbed_dof)?;
        Ok(WeakIvDiagnostics { effective_f: None, sw })
    }
}

/// Covariance blocks of the reduced-form (W1), cross (W12) and first-stage
/// (W2) coefficients on instruments `z` already partialled of controls.
pub fn reduced_form_covariances(
    z: &DMatrix<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
    mode: &VceMode,
    n_controls: usize,
    absorbed: usize,
) -> Result<(DVector<f64>, [DMatrix<f64>; 3])> {
    let n = z.nrows();
    let l = z.ncols();
    let q = z.transpose() * z;
    let b = spd_inverse(&q).ok_or_else(|| Error::Degenerate("zero instrument variance".into()))?;
    let pi = &b * (z.transpose() * x);
    let gamma = &b * (z.transpose() * y);
    let v = x - z * &pi;
    let e = y - z * &gamma;
    let kk = l + n_controls;
    let blocks = match mode {
        VceMode::Homoskedastic => {
            let dof = n as f64 - kk as f64 - absorbed as f64;
            if dof <= 0.0 {
                return Err(Error::Degenerate("no residual degrees of freedom".into()));
            }
            [&b * (e.dot(&e) / dof), &b * (e.dot(&v) / dof), &b * (v.dot(&v) / dof)]
        }
        _ => {
            let mut scores = DMatrix::zeros(n, 2 * l);
            for i in 0..n {
                for j in 0..l {
                    scores[(i, j)] = z[(i, j)] * e[i];
                    scores[(i, l + j)] = z[(i, j)] * v[i];
                }
            }
            let mut bread = DMatrix::zeros(2 * l, 2 * l);
            bread.view_mut((0, 0), (l, l)).copy_from(&b);
            bread.view_mut((l, l), (l, l)).copy_from(&b);
            let vce =
                compute_vce(mode, &SandwichInputs { bread: &bread, scores: &scores, sigma2: 0.0, n, k: kk, absorbed })?;
            let m = vce.matrix;
            [
                m.view((0, 0), (l, l)).into_owned(),
                m.view((0, l), (l, l)).into_owned(),
                m.view((l, l), (l, l)).into_owned(),
            ]
        }
    };
    Ok((pi, blocks))
}

/// Effective first-stage F and its critical values at every threshold in
/// [`TAUS`].
pub fn effective_f(
    z: &DMatrix<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
    mode: &VceMode,
    n_controls: usize,
    absorbed: usize,
) -> Result<EffectiveF> {
    let (pi, [w1, w12, w2]) = reduced_form_covariances(z, x, y, mode, n_controls, absorbed)?;
    let q = z.transpose() * z;
    let denom = (&w2 * &q).trace();
    if denom <= 0.0 || !denom.is_finite() {
        return Err(Error::Degenerate("first-stage covariance has zero trace".into()));
    }
    let f_eff = (pi.transpose() * &q * &pi)[0] / denom;
    let qh = psd_sqrt(&q);
    let norm = |w: &DMatrix<f64>| &qh * w * &qh;
    let (s1, s12, s2) = (norm(&w1), norm(&w12), norm(&w2));
    let b_e = nagar_bias_bound(&s1, &s12, &s2);
    let critical = TAUS.iter().map(|&tau| critical_value(&s2, b_e, tau)).collect();
    Ok(EffectiveF { f_eff, b_e, critical })
}

fn bias_ratio(w1: &DMatrix<f64>, w12: &DMatrix<f64>, w2: &DMatrix<f64>, beta: f64) -> f64 {
    let s1 = w1 - w12 * (2.0 * beta) + w2 * (beta * beta);
    let s12 = w12 - w2 * beta;
    let t1 = s1.trace();
    let t2 = w2.trace();
    if t1 <= 0.0 || t2 <= 0.0 {
        return 0.0;
    }
    let eig = symmetrize(&s12).symmetric_eigen().eigenvalues;
    let tr = s12.trace();
    let worst = eig.iter().map(|&lam| (tr - 2.0 * lam).abs()).fold(0.0, f64::max);
    worst / (t2 * (t1 / t2).sqrt())
}

/// Supremum over β of the normalised Nagar bias of 2SLS, given covariance
/// blocks normalised by the instrument second moment. Equal to one with a
/// single instrument.
pub fn nagar_bias_bound(w1: &DMatrix<f64>, w12: &DMatrix<f64>, w2: &DMatrix<f64>) -> f64 {
    if w2.nrows() == 1 {
        return 1.0;
    }
    let half = std::f64::consts::FRAC_PI_2;
    let grid = 4000;
    let f = |theta: f64| bias_ratio(w1, w12, w2, theta.tan());
    let step = 2.0 * half / grid as f64;
    let (mut best_t, mut best) = (0.0, f64::NEG_INFINITY);
    for i in 1..grid {
        let t = -half + i as f64 * step;
        let v = f(t);
        if v > best {
            best = v;
            best_t = t;
        }
    }
    // Golden-section refinement around the best grid point.
    let (mut a, mut b) = ((best_t - step).max(-half + 1e-12), (best_t + step).min(half - 1e-12));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    best.max(f(0.5 * (a + b)))
}

/// Critical value for the effective F at threshold `tau`, using the
/// normalised first-stage covariance `s2` and bias bound `b_e`.
pub fn critical_value(s2: &DMatrix<f64>, b_e: f64, tau: f64) -> CriticalValue {
    let x = b_e / tau;
    let t = s2.trace();
    let lmax = max_eigenvalue(s2);
    let k_eff = t * t * (1.0 + 2.0 * x) / ((s2.transpose() * s2).trace() + 2.0 * x * t * lmax);
    let value = ncx2_quantile(1.0 - PRETEST_LEVEL, k_eff, x * k_eff) / k_eff;
    CriticalValue { tau, k_eff, value }
}

/// CDF of the noncentral χ² with `k` (possibly fractional) degrees of freedom
/// and noncentrality `nc`, as a Poisson mixture of central χ² CDFs.
pub fn ncx2_cdf(q: f64, k: f64, nc: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let half = 0.5 * nc;
    if half == 0.0 {
        return gamma_lr(0.5 * k, 0.5 * q);
    }
    let mode = half.floor() as i64;
    let spread = (12.0 * half.sqrt()).ceil() as i64 + 30;
    let lo = (mode - spread).max(0);
    let hi = mode + spread;
    let mut total = 0.0;
    for j in lo..=hi {
        let jf = j as f64;
        let lw = -half + jf * half.ln() - ln_gamma(jf + 1.0);
        total += lw.exp() * gamma_lr(0.5 * k + jf, 0.5 * q);
    }
    total.clamp(0.0, 1.0)
}

/// Quantile of the noncentral χ² by bisection.
pub fn ncx2_quantile(p: f64, k: f64, nc: f64) -> f64 {
    let mut hi = (k + nc).max(1.0);
    while ncx2_cdf(hi, k, nc) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ncx2_cdf(mid, k, nc) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Conditional first-stage statistics for each endogenous regressor given
/// the others. `z` and `x` must already be partialled of controls and fixed
/// effects.
pub fn sanderson_windmeijer(
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    names: &[String],
    mode: &VceMode,
    n_controls: usize,
    absorbed: usize,
) -> Result<Vec<SwStat>> {
    let n = z.nrows();
    let l = z.ncols();
    let k = x.ncols();
    if l < k {
        return Err(Error::Underidentified(format!("{l} instruments for {k} endogenous regressors")));
    }
    let b = spd_inverse(&(z.transpose() * z)).ok_or_else(|| Error::Degenerate("zero instrument variance".into()))?;
    let pz = |a: &DMatrix<f64>| z * (&b * (z.transpose() * a));
    let df = l - k + 1;
    let big_l = l + n_controls + absorbed;
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let xj = x.column(j).into_owned();
        let others: Vec<usize> = (0..k).filter(|&i| i != j).collect();
        let e = if others.is_empty() {
            xj.clone()
        } else {
            let xo = x.select_columns(&others);
            let pxo = pz(&xo);
            let a = spd_inverse(&(pxo.transpose() * &xo))
                .ok_or_else(|| Error::Underidentified("first-stage cross moment is rank deficient".into()))?;
            let delta = a * (pxo.transpose() * &xj);
            &xj - xo * delta
        };
        if e.norm() <= 1e-8 * xj.norm() {
            out.push(SwStat {
                endogenous: names[j].clone(),
                chi2: 0.0,
                chi2_df: df,
                chi2_p: 1.0,
                f: 0.0,
                f_df: (df, n.saturating_sub(big_l)),
                degenerate: true,
            });
            continue;
        }
        let c = &b * (z.transpose() * &e);
        let r = &e - z * &c;
        let vc = match mode {
            VceMode::Homoskedastic => &b * (r.dot(&r) / n as f64),
            _ => {
                let mut scores = z.clone();
                for i in 0..n {
                    scores.row_mut(i).scale_mut(r[i]);
                }
                compute_vce(
                    mode,
                    &SandwichInputs { bread: &b, scores: &scores, sigma2: 0.0, n, k: l + n_controls, absorbed },
                )?
                .matrix
            }
        };
        let chi2 = match spd_inverse(&vc) {
            Some(vi) => (c.transpose() * vi * &c)[0],
            None => f64::INFINITY,
        };
        let f = chi2 * (n as f64 - big_l as f64) / (n as f64 * df as f64);
        let chi2_p = ChiSquared::new(df as f64).map(|d| 1.0 - d.cdf(chi2)).unwrap_or(f64::NAN);
        out.push(SwStat {
            endogenous: names[j].clone(),
            chi2,
            chi2_df: df,
            chi2_p,
            f,
            f_df: (df, n.saturating_sub(big_l)),
            degenerate: false,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_instrument_critical_values() {
        let s2 = DMatrix::from_element(1, 1, 2.5);
        let cv = |tau| critical_value(&s2, 1.0, tau);
        assert!((cv(0.10).value - 23.1085).abs() < 1e-3);
        assert!((cv(0.05).value - 37.4176).abs() < 1e-3);
        assert!((cv(0.20).value - 15.0616).abs() < 1e-3);
        assert!((cv(0.10).k_eff - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncx2_central_limit_matches_chi2() {
        let d = ChiSquared::new(3.0).unwrap();
        for q in [0.5, 2.0, 7.8] {
            assert!((ncx2_cdf(q, 3.0, 0.0) - d.cdf(q)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_instruments_homoskedastic_bias_vanishes() {
        let i = DMatrix::<f64>::identity(2, 2);
        let b = nagar_bias_bound(&(&i * 1.0), &(&i * 0.4), &(&i * 0.7));
        assert!(b < 1e-6);
    }
}

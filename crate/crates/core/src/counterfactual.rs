//! Tax-equalisation counterfactuals propagated through predicted migration
//! probabilities, rebuilt instruments, the fitted first stage and the
//! structural equation, with direct/indirect and internal/external splits.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::choice::predict_migration_probabilities;
use crate::error::{Error, Result};
use crate::frame::{ZoneYearFrame, LN_NET_TAX};
use crate::geo::GeoRegistry;
use crate::instruments::build_bartik;
use crate::iv::IvFit;
use crate::output::{fmt, CsvOut};
use crate::panel::{Panels, PolicyPanel, TaxField};
use crate::regression::RegressionSpec;
use crate::workflow::{Baseline, BaselineOptions};

/// Fitted flows at or below this are treated as zero by the flow-change
/// guard.
pub const FITTED_FLOOR: f64 = 1e-6;

/// Sets `field` of every state to the unweighted cross-state mean, for each
/// year in `years` (all years when `None`).
pub fn equalize_taxes(p: &PolicyPanel, field: TaxField, years: Option<&[i32]>) -> Result<PolicyPanel> {
    let mut out = p.clone();
    let ns = p.states.len();
    if ns == 0 {
        return Err(Error::InvalidInput("policy panel has no states".into()));
    }
    let ts: Vec<usize> = match years {
        None => (0..p.calendar.n_years).collect(),
        Some(ys) => ys
            .iter()
            .map(|&y| {
                p.calendar.index(y).ok_or_else(|| Error::InvalidInput(format!("year {y} is outside the policy panel")))
            })
            .collect::<Result<_>>()?,
    };
    for t in ts {
        let vals: Vec<f64> = (0..ns).map(|s| p.row(s, t).tax(field)).collect();
        if let Some(s) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{field} missing for state {} in {}",
                p.states[s],
                p.calendar.year(t)
            )));
        }
        // Already equal: keep the exact rate rather than a rounded mean.
        if vals.iter().all(|&v| v == vals[0]) {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / ns as f64;
        for s in 0..ns {
            out.row_mut(s, t).set_tax(field, mean);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FlowChange {
    /// First-stage fitted flows M̂ (NaN off the estimation sample).
    pub fitted: Vec<f64>,
    /// Counterfactual flows M̃.
    pub counterfactual: Vec<f64>,
    /// Δ̃M = ((M̃ − M̂)/M̂)·M, or M̃ − M where M̂ ≤ [`FITTED_FLOOR`].
    pub delta_m: Vec<f64>,
    pub guarded: usize,
    pub first_stage: IvFit,
    pub notes: Vec<String>,
}

/// Fits the first stage of `spec` (endogenous on instruments and controls
/// with the spec's fixed effects) on `base` and evaluates it at the
/// counterfactual instrument and control columns of `cf`.
pub fn counterfactual_flows(base: &ZoneYearFrame, cf: &ZoneYearFrame, spec: &RegressionSpec) -> Result<FlowChange> {
    if spec.endogenous.len() != 1 {
        return Err(Error::InvalidInput("counterfactual needs exactly one endogenous regressor".into()));
    }
    if base.len() != cf.len() {
        return Err(Error::InvalidInput("baseline and counterfactual frames differ in size".into()));
    }
    let mut fs = spec.clone();
    fs.outcome = spec.endogenous[0].clone();
    fs.transform = crate::frame::Transform::Level;
    fs.endogenous = spec.instruments.iter().chain(&spec.exogenous).cloned().collect();
    fs.instruments.clear();
    fs.exogenous.clear();
    let first_stage = fs.fit_ols(base)?;
    let m = base.get(&spec.endogenous[0])?;
    let n = base.len();
    let mut fitted = vec![f64::NAN; n];
    for (k, &r) in first_stage.rows.iter().enumerate() {
        fitted[r] = first_stage.fitted[k];
    }
    let mut shift = vec![0.0; n];
    for (term, coef) in first_stage.terms.iter().zip(&first_stage.coef) {
        let b = base.get(term)?;
        let c = cf.get(term)?;
        for r in 0..n {
            shift[r] += coef * (c[r] - b[r]);
        }
    }
    let counterfactual: Vec<f64> = (0..n).map(|r| fitted[r] + shift[r]).collect();
    let mut guarded = 0;
    let delta_m: Vec<f64> = (0..n)
        .map(|r| {
            if !fitted[r].is_finite() {
                f64::NAN
            } else if fitted[r] <= FITTED_FLOOR {
                guarded += 1;
                counterfactual[r] - m[r]
            } else {
                (counterfactual[r] - fitted[r]) / fitted[r] * m[r]
            }
        })
        .collect();
    let mut notes = first_stage.notes.clone();
    if guarded > 0 {
        notes.push(format!("{guarded} zone-years with fitted flows ≤ {FITTED_FLOOR}: used M̃ − M"));
    }
    Ok(FlowChange { fitted, counterfactual, delta_m, guarded, first_stage, notes })
}

/// Per zone-year outcome changes and their components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductivityChange {
    pub delta_lny: Vec<f64>,
    pub direct: Vec<f64>,
    pub indirect_internal: Vec<f64>,
    pub indirect_external: Vec<f64>,
    /// Δ̃Y = ((Ỹ − Ŷ)/Ŷ)·Y.
    pub delta_y: Vec<f64>,
    /// Δ̃Y allocated to the components in proportion to their log changes.
    pub delta_y_direct: Vec<f64>,
    pub delta_y_internal: Vec<f64>,
    pub delta_y_external: Vec<f64>,
}

/// Log and level outcome changes. `fitted_lny` holds fitted ln(1+Y) values
/// of the structural equation; `y` the observed outcome.
pub fn counterfactual_productivity(
    phi_all: f64,
    phi_ext: f64,
    xi: f64,
    delta_m: &[f64],
    delta_tax: &[f64],
    y: &[f64],
    fitted_lny: &[f64],
) -> Result<ProductivityChange> {
    let n = delta_m.len();
    if delta_tax.len() != n || y.len() != n || fitted_lny.len() != n {
        return Err(Error::InvalidInput("counterfactual inputs are not aligned".into()));
    }
    let mut out = ProductivityChange {
        delta_lny: vec![0.0; n],
        direct: vec![0.0; n],
        indirect_internal: vec![0.0; n],
        indirect_external: vec![0.0; n],
        delta_y: vec![0.0; n],
        delta_y_direct: vec![0.0; n],
        delta_y_internal: vec![0.0; n],
        delta_y_external: vec![0.0; n],
    };
    for r in 0..n {
        let direct = xi * delta_tax[r];
        let external = phi_ext * delta_m[r];
        let internal = (phi_all - phi_ext) * delta_m[r];
        let total = direct + internal + external;
        out.direct[r] = direct;
        out.indirect_external[r] = external;
        out.indirect_internal[r] = internal;
        out.delta_lny[r] = total;
        let y_hat = (fitted_lny[r].exp() - 1.0).max(0.0);
        let y_cf = ((fitted_lny[r] + total).exp() - 1.0).max(0.0);
        let dy = if total == 0.0 {
            0.0
        } else if y_hat > FITTED_FLOOR {
            (y_cf - y_hat) / y_hat * y[r]
        } else {
            y_cf - y_hat
        };
        out.delta_y[r] = dy;
        if total != 0.0 {
            out.delta_y_direct[r] = dy * direct / total;
            out.delta_y_internal[r] = dy * internal / total;
            out.delta_y_external[r] = dy * external / total;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateChange {
    pub state: String,
    /// Σ Δ̃Y / Σ Y over the state's zones (fraction, not percent).
    pub pct_change: f64,
    pub direct: f64,
    pub indirect_internal: f64,
    pub indirect_external: f64,
    /// Zero total outcome: percentages undefined.
    pub undefined: bool,
}

/// State changes Σ_{d∈σ} Δ̃Y_dt / Σ_{d∈σ} Y_dt over the rows in `mask`.
/// Rows are zone-major with `n_years` years per zone.
pub fn aggregate_to_state(
    ch: &ProductivityChange,
    y: &[f64],
    geo: &GeoRegistry,
    n_years: usize,
    mask: &[bool],
) -> Result<Vec<StateChange>> {
    if y.len() != geo.len() * n_years || mask.len() != y.len() || ch.delta_y.len() != y.len() {
        return Err(Error::InvalidInput("state aggregation inputs are not aligned".into()));
    }
    let ns = geo.states().len();
    let mut sums = vec![[0.0f64; 5]; ns];
    for r in 0..y.len() {
        if !mask[r] || !ch.delta_y[r].is_finite() || !y[r].is_finite() {
            continue;
        }
        let s = geo.state_index(r / n_years);
        let v = [ch.delta_y[r], ch.delta_y_direct[r], ch.delta_y_internal[r], ch.delta_y_external[r], y[r]];
        for k in 0..5 {
            sums[s][k] += v[k];
        }
    }
    Ok((0..ns)
        .map(|s| {
            let [dy, dd, di, de, ysum] = sums[s];
            let undefined = ysum == 0.0;
            let pct = |v: f64| if undefined { f64::NAN } else { v / ysum };
            StateChange {
                state: geo.states()[s].to_string(),
                pct_change: pct(dy),
                direct: pct(dd),
                indirect_internal: pct(di),
                indirect_external: pct(de),
                undefined,
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct CounterfactualReport {
    pub field: TaxField,
    pub years: Vec<i32>,
    pub phi_all: f64,
    pub phi_ext: f64,
    pub xi: f64,
    pub flows: FlowChange,
    pub delta_tax: Vec<f64>,
    pub changes: ProductivityChange,
    pub states: Vec<StateChange>,
    /// Shares of the national Δ̃Y; they sum to one when the total is nonzero.
    pub national_direct_share: f64,
    pub national_indirect_share: f64,
    pub counterfactual_frame: ZoneYearFrame,
    pub notes: Vec<String>,
}

impl CounterfactualReport {
    pub fn write_csv(&self, path: &Path, frame: &ZoneYearFrame) -> Result<PathBuf> {
        let mut out = CsvOut::create(
            path,
            &["zone", "year", "delta_m", "delta_lny", "direct", "indirect_internal", "indirect_external"],
        )?;
        let c = &self.changes;
        for r in 0..frame.len() {
            out.row(&[
                frame.zone_ids[frame.zone_of(r)].to_string(),
                frame.calendar.year(frame.t_of(r)).to_string(),
                fmt(self.flows.delta_m[r]),
                fmt(c.delta_lny[r]),
                fmt(c.direct[r]),
                fmt(c.indirect_internal[r]),
                fmt(c.indirect_external[r]),
            ])?;
        }
        out.finish()
    }

    pub fn write_states_csv(&self, path: &Path) -> Result<PathBuf> {
        let mut out =
            CsvOut::create(path, &["state", "pct_change", "direct", "indirect_internal", "indirect_external"])?;
        for s in &self.states {
            out.row(&[
                s.state.clone(),
                fmt(100.0 * s.pct_change),
                fmt(100.0 * s.direct),
                fmt(100.0 * s.indirect_internal),
                fmt(100.0 * s.indirect_external),
            ])?;
        }
        out.finish()
    }
}

/// Inputs of a tax-equalisation experiment.
#[derive(Debug, Clone)]
pub struct CounterfactualSpec {
    /// Structural equation for all local inventors; its instruments and
    /// controls define the first stage.
    pub all: RegressionSpec,
    /// Same equation for external inventors.
    pub external: RegressionSpec,
    pub field: TaxField,
    /// Years whose taxes are equalised (all years when `None`).
    pub years: Option<Vec<i32>>,
}

/// Runs the full experiment on panels already prepared by
/// [`crate::workflow::prepare_baseline`] with `opts`.
pub fn run_counterfactual(
    panels: &Panels,
    base: &Baseline,
    opts: &BaselineOptions,
    spec: &CounterfactualSpec,
) -> Result<CounterfactualReport> {
    let cal = panels.flows.calendar;
    let cf_policies = equalize_taxes(&panels.policies, spec.field, spec.years.as_deref())?;
    let cf_shares = predict_migration_probabilities(&base.choice, &cf_policies, &panels.geo, cal, opts.impute)?;
    let cf_panels = Panels {
        geo: panels.geo.clone(),
        policies: cf_policies,
        flows: panels.flows.clone(),
        outcomes: panels.outcomes.clone(),
    };
    let mut cf_frame = ZoneYearFrame::from_panels(&cf_panels, opts.choice.tax)?;
    for ic in &base.instruments {
        let col = if ic.variant == crate::instruments::Variant::Canonical {
            ic.values.clone()
        } else {
            build_bartik(&cf_shares, &panels.flows.stocks, cal, &panels.geo, ic.variant)?.values
        };
        cf_frame.insert(ic.variant.column(), col)?;
    }
    for name in base.frame.names() {
        if !cf_frame.has(name) {
            cf_frame.insert(name, base.frame.get(name)?)?;
        }
    }
    let flows = counterfactual_flows(&base.frame, &cf_frame, &spec.all)?;
    let fit_all = spec.all.fit(&base.frame)?;
    let fit_ext = spec.external.fit(&base.frame)?;
    let endog = &spec.all.endogenous[0];
    let phi_all = fit_all.coef_of(endog).ok_or_else(|| Error::InvalidInput(format!("`{endog}` not estimated")))?;
    let phi_ext = fit_ext.coef_of(endog).ok_or_else(|| Error::InvalidInput(format!("`{endog}` not estimated")))?;
    let mut notes = flows.notes.clone();
    let xi = match fit_all.coef_of(LN_NET_TAX) {
        Some(x) => x,
        None => {
            notes.push(format!("`{LN_NET_TAX}` not in the structural equation; direct effect set to zero"));
            0.0
        }
    };
    if phi_all < phi_ext {
        notes.push("external estimate exceeds the all-inventor estimate; internal component is negative".into());
    }
    let b_tax = base.frame.get(LN_NET_TAX)?;
    let c_tax = cf_frame.get(LN_NET_TAX)?;
    let delta_tax: Vec<f64> = b_tax.iter().zip(&c_tax).map(|(b, c)| c - b).collect();
    let n = base.frame.len();
    let mut fitted_lny = vec![f64::NAN; n];
    for (k, &r) in fit_all.rows.iter().enumerate() {
        fitted_lny[r] = fit_all.fitted[k];
    }
    let y = base.frame.get(&spec.all.outcome)?;
    let changes = counterfactual_productivity(phi_all, phi_ext, xi, &flows.delta_m, &delta_tax, &y, &fitted_lny)?;
    let ny = cal.n_years;
    let years: Vec<i32> = spec.years.clone().unwrap_or_else(|| cal.years().collect());
    let mask: Vec<bool> = (0..n).map(|r| years.contains(&cal.year(r % ny))).collect();
    let states = aggregate_to_state(&changes, &y, &panels.geo, ny, &mask)?;
    let (mut total, mut direct) = (0.0, 0.0);
    for r in (0..n).filter(|&r| mask[r] && changes.delta_y[r].is_finite()) {
        total += changes.delta_y[r];
        direct += changes.delta_y_direct[r];
    }
    let (national_direct_share, national_indirect_share) =
        if total != 0.0 { (direct / total, 1.0 - direct / total) } else { (f64::NAN, f64::NAN) };
    Ok(CounterfactualReport {
        field: spec.field,
        years,
        phi_all,
        phi_ext,
        xi,
        flows,
        delta_tax,
        changes,
        states,
        national_direct_share,
        national_indirect_share,
        counterfactual_frame: cf_frame,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{StateId, Zone, ZoneId};
    use crate::panel::{Calendar, PolicyRow};

    fn panel(taxes: &[f64]) -> PolicyPanel {
        let rows = taxes.iter().map(|&t| PolicyRow { atr95: t, atr99: 0.1, ..Default::default() }).collect();
        PolicyPanel {
            states: (0..taxes.len()).map(|s| StateId(format!("S{s}"))).collect(),
            calendar: Calendar::new(2000, 1),
            rows,
        }
    }

    #[test]
    fn mean_of_two_states() {
        let p = equalize_taxes(&panel(&[0.2, 0.3]), TaxField::Atr95, None).unwrap();
        assert!((p.rows[0].atr95 - 0.25).abs() < 1e-15 && (p.rows[1].atr95 - 0.25).abs() < 1e-15);
        assert_eq!(p.rows[0].atr99, 0.1);
        let same = panel(&[0.2, 0.2]);
        assert_eq!(equalize_taxes(&same, TaxField::Atr95, None).unwrap(), same);
        assert!(equalize_taxes(&same, TaxField::Atr95, Some(&[1999])).is_err());
    }

    #[test]
    fn toy_decomposition() {
        let c = counterfactual_productivity(0.06, 0.04, 0.5, &[10.0], &[0.0], &[5.0], &[1.0]).unwrap();
        assert_eq!(c.direct[0], 0.0);
        assert!((c.indirect_internal[0] - 0.2).abs() < 1e-12);
        assert!((c.indirect_external[0] - 0.4).abs() < 1e-12);
        assert!((c.delta_lny[0] - 0.6).abs() < 1e-12);
        let z = counterfactual_productivity(0.06, 0.04, 0.5, &[0.0], &[0.0], &[5.0], &[1.0]).unwrap();
        assert!(z.delta_y[0] == 0.0 && z.delta_lny[0] == 0.0);
    }

    #[test]
    fn state_aggregation() {
        let z = |id, s: &str| Zone { id: ZoneId(id), state: StateId(s.into()), lat: 0.0, lon: id as f64 };
        let geo = GeoRegistry::new(vec![z(1, "A"), z(2, "A"), z(3, "B")]).unwrap();
        let mut ch =
            counterfactual_productivity(0.0, 0.0, 1.0, &[0.0; 3], &[0.1, -0.1, 0.2], &[1.0; 3], &[1.0; 3]).unwrap();
        ch.delta_y = vec![1.0, -1.0, 3.0];
        ch.delta_y_direct = ch.delta_y.clone();
        let s = aggregate_to_state(&ch, &[10.0, 10.0, 6.0], &geo, 1, &[true; 3]).unwrap();
        assert_eq!(s[0].pct_change, 0.0);
        assert!((s[1].pct_change - 0.5).abs() < 1e-15);
        // Unequal weights: (2 + 1) / (30 + 10).
        ch.delta_y = vec![2.0, 1.0, 0.0];
        let s = aggregate_to_state(&ch, &[30.0, 10.0, 0.0], &geo, 1, &[true; 3]).unwrap();
        assert!((s[0].pct_change - 0.075).abs() < 1e-15);
        assert!(s[1].undefined);
    }
}

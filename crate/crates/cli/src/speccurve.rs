//! Specification-grid runner with a weak-instrument filter.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use shiftshare::fe::FeTerm;
use shiftshare::frame::Transform;
use shiftshare::iv::IvFit;
use shiftshare::output::{fmt, CsvOut};
use shiftshare::panel::{Panels, TaxField};
use shiftshare::workflow::{prepare_baseline, Baseline};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, StageExt};

const Z_95: f64 = 1.959963984540054;
const Z_90: f64 = 1.6448536269514722;

/// One grid cell: a value on every axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecCell {
    pub spec_id: usize,
    pub tax: TaxField,
    pub transform: Transform,
    /// Instrument columns joined by `+`.
    pub instruments: String,
    pub state_year_fe: bool,
    /// Extra controls joined by `+` (empty for none).
    pub controls: String,
    pub outcome: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpecRow {
    pub cell: SpecCell,
    pub estimate: f64,
    pub se: f64,
    pub effective_f: f64,
    pub critical: f64,
    pub weak_iv_pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpecCurve {
    pub n_cells: usize,
    pub n_filtered: usize,
    pub n_failed: usize,
    /// Retained cells sorted by estimate, ties by spec_id.
    pub rows: Vec<SpecRow>,
    pub filtered: Vec<usize>,
    pub failures: Vec<(usize, String)>,
}

fn split(s: &str) -> Vec<String> {
    s.split('+').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}

fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

/// Cartesian product of the grid axes; empty axes take the base value.
pub fn grid_cells(cfg: &RunConfig) -> Vec<SpecCell> {
    let taxes = or_base(&cfg.grid_tax, cfg.tax);
    let transforms = or_base(&cfg.grid_transform, cfg.transform);
    let insts = or_base(&cfg.grid_instruments, cfg.instruments.join("+"));
    let sy = or_base(&cfg.grid_state_year_fe, false);
    let controls = or_base(&cfg.grid_controls, String::new());
    let outcomes = or_base(&cfg.grid_outcome, cfg.outcome.clone());
    let mut cells = Vec::new();
    for &tax in &taxes {
        for &transform in &transforms {
            for inst in &insts {
                for &state_year_fe in &sy {
                    for c in &controls {
                        for outcome in &outcomes {
                            cells.push(SpecCell {
                                spec_id: cells.len(),
                                tax,
                                transform,
                                instruments: inst.clone(),
                                state_year_fe,
                                controls: c.clone(),
                                outcome: outcome.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    cells
}

fn fit_cell(cfg: &RunConfig, base: &Baseline, cell: &SpecCell) -> CliResult<IvFit> {
    let mut spec = cfg.spec(&cell.outcome)?;
    spec.transform = cell.transform;
    spec.instruments = split(&cell.instruments);
    if spec.instruments.is_empty() {
        return Err(CliError::Config(format!("cell {}: empty instrument set", cell.spec_id)));
    }
    spec.exogenous.extend(split(&cell.controls));
    if cell.state_year_fe {
        spec.fe.push("state_x_year".parse::<FeTerm>().stage("spec-curve")?);
    }
    spec.fit(&base.frame).stage("spec-curve")
}

/// Runs every cell in parallel. Baselines are built once per tax measure.
pub fn run_spec_curve(cfg: &RunConfig, panels: &Panels) -> CliResult<SpecCurve> {
    let cells = grid_cells(cfg);
    let mut taxes: Vec<TaxField> = cells.iter().map(|c| c.tax).collect();
    taxes.dedup();
    let bases: BTreeMap<&str, shiftshare::Result<Baseline>> =
        taxes.par_iter().map(|&t| (t.name(), prepare_baseline(panels, &cfg.baseline_options(t)))).collect();
    let results: Vec<CliResult<IvFit>> = cells
        .par_iter()
        .map(|c| match &bases[c.tax.name()] {
            Ok(b) => fit_cell(cfg, b, c),
            Err(e) => Err(CliError::Config(format!("baseline for {} failed: {e}", c.tax.name()))),
        })
        .collect();
    let mut curve = SpecCurve {
        n_cells: cells.len(),
        n_filtered: 0,
        n_failed: 0,
        rows: vec![],
        filtered: vec![],
        failures: vec![],
    };
    for (cell, r) in cells.into_iter().zip(results) {
        let fit = match r {
            Ok(f) => f,
            Err(e) => {
                curve.failures.push((cell.spec_id, e.to_string()));
                continue;
            }
        };
        let ef = fit.diagnostics.as_ref().and_then(|d| d.effective_f.as_ref());
        let (f_eff, critical) =
            ef.map_or((f64::NAN, f64::NAN), |e| (e.f_eff, e.critical_at(cfg.weak_iv_tau).unwrap_or(f64::NAN)));
        let weak_iv_pass = f_eff >= critical;
        let row = SpecRow { estimate: fit.coef[0], se: fit.se()[0], effective_f: f_eff, critical, weak_iv_pass, cell };
        if weak_iv_pass {
            curve.rows.push(row);
        } else {
            curve.filtered.push(row.cell.spec_id);
        }
    }
    curve.n_filtered = curve.filtered.len();
    curve.n_failed = curve.failures.len();
    curve.rows.sort_by(|a, b| a.estimate.total_cmp(&b.estimate).then(a.cell.spec_id.cmp(&b.cell.spec_id)));
    Ok(curve)
}

impl SpecCurve {
    pub fn write_csv(&self, path: &std::path::Path) -> shiftshare::Result<std::path::PathBuf> {
        let mut w = CsvOut::create(
            path,
            &[
                "spec_id",
                "tax",
                "transform",
                "instruments",
                "state_year_fe",
                "controls",
                "outcome",
                "estimate",
                "se",
                "ci90_low",
                "ci90_high",
                "ci95_low",
                "ci95_high",
                "effective_f",
                "weak_iv_pass",
            ],
        )?;
        for r in &self.rows {
            let c = &r.cell;
            w.row(&[
                c.spec_id.to_string(),
                c.tax.name().to_string(),
                c.transform.label().to_string(),
                c.instruments.clone(),
                c.state_year_fe.to_string(),
                c.controls.clone(),
                c.outcome.clone(),
                fmt(r.estimate),
                fmt(r.se),
                fmt(r.estimate - Z_90 * r.se),
                fmt(r.estimate + Z_90 * r.se),
                fmt(r.estimate - Z_95 * r.se),
                fmt(r.estimate + Z_95 * r.se),
                fmt(r.effective_f),
                r.weak_iv_pass.to_string(),
            ])?;
        }
        w.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_size_is_product_of_axes() {
        let cfg = RunConfig {
            grid_tax: vec![TaxField::Atr95, TaxField::Atr99],
            grid_instruments: vec!["b".into(), "b+b_sigma".into()],
            grid_state_year_fe: vec![false, true],
            ..Default::default()
        };
        let cells = grid_cells(&cfg);
        assert_eq!(cells.len(), 8);
        assert!(cells.iter().enumerate().all(|(i, c)| c.spec_id == i));
        assert_eq!(grid_cells(&RunConfig::default()).len(), 1);
        assert_eq!(split("b + b_sigma"), vec!["b", "b_sigma"]);
        assert!(split("").is_empty());
    }
}

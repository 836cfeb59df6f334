//! The standard chain from panels to an instrumented zone-year frame:
//! log-odds records, choice estimates, predicted shares, instruments.

use serde::{Deserialize, Serialize};

use crate::choice::{
    estimate_log_odds, predict_migration_probabilities, ChoiceEstimates, ChoiceOptions, ImputeRule, Shares,
};
use crate::error::Result;
use crate::frame::ZoneYearFrame;
use crate::instruments::{build_bartik, initial_shares, InstrumentColumn, Variant};
use crate::panel::{build_log_odds, Panels};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOptions {
    pub choice: ChoiceOptions,
    pub impute: ImputeRule,
    /// Variants built from predicted shares (canonical is handled by
    /// `initial_window`).
    pub variants: Vec<Variant>,
    /// Year window for the initial-share instrument, if wanted.
    pub initial_window: Option<(i32, i32)>,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            choice: ChoiceOptions::default(),
            impute: ImputeRule::ZeroMean,
            variants: vec![Variant::All, Variant::Interstate, Variant::SpatialLag],
            initial_window: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Baseline {
    pub frame: ZoneYearFrame,
    pub n_records: usize,
    pub choice: ChoiceEstimates,
    pub shares: Shares,
    pub instruments: Vec<InstrumentColumn>,
}

/// Estimates the choice model, predicts shares and adds every requested
/// instrument to the zone-year frame under [`Variant::column`] names.
pub fn prepare_baseline(p: &Panels, opts: &BaselineOptions) -> Result<Baseline> {
    let records = build_log_odds(&p.flows, &p.policies, &p.geo, opts.choice.tax)?;
    let choice = estimate_log_odds(&records, &p.geo, &opts.choice)?;
    let cal = p.flows.calendar;
    let shares = predict_migration_probabilities(&choice, &p.policies, &p.geo, cal, opts.impute)?;
    let mut frame = ZoneYearFrame::from_panels(p, opts.choice.tax)?;
    let mut instruments = Vec::new();
    for &v in opts.variants.iter().filter(|v| **v != Variant::Canonical) {
        instruments.push(build_bartik(&shares, &p.flows.stocks, cal, &p.geo, v)?);
    }
    if let Some(window) = opts.initial_window {
        let p0 = initial_shares(&p.flows, window)?;
        instruments.push(build_bartik(&p0, &p.flows.stocks, cal, &p.geo, Variant::Canonical)?);
    }
    for c in &instruments {
        frame.insert(c.variant.column(), c.values.clone())?;
    }
    Ok(Baseline { frame, n_records: records.len(), choice, shares, instruments })
}

//! Flat key-value run configuration (TOML syntax, no tables).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shiftshare::choice::{ChoiceOptions, ImputeRule};
use shiftshare::diagnostics::RotembergLevel;
use shiftshare::dynamics::Window;
use shiftshare::fe::FeTerm;
use shiftshare::frame::{Transform, INFLOWS};
use shiftshare::instruments::Variant;
use shiftshare::panel::TaxField;
use shiftshare::regression::{RegressionSpec, VceSpec};
use shiftshare::simulator::{SimConfig, TruthParams};
use shiftshare::weakiv::TAUS;
use shiftshare::workflow::BaselineOptions;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding the input CSVs; panels are simulated when absent.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,

    pub tax: TaxField,
    pub outcome: String,
    /// Outcome of the external-inventor equation (counterfactual split).
    pub outcome_external: String,
    pub transform: Transform,
    pub fe: Vec<String>,
    pub cluster: Vec<String>,
    pub controls: Vec<String>,
    /// Instrument columns of the main equation.
    pub instruments: Vec<String>,
    /// Instrument variants built from predicted shares.
    pub variants: Vec<Variant>,
    /// First and last year of the initial-share window; adds the canonical
    /// instrument `b0`.
    pub initial_window: Option<[i32; 2]>,
    pub impute: ImputeRule,
    pub corporate: bool,

    pub event_lo: i32,
    pub event_hi: i32,
    pub event_instruments: Vec<String>,

    pub placebo_draws: usize,
    pub ring_edges: Vec<f64>,
    pub rotemberg_level: RotembergLevel,
    pub rotemberg_variant: Variant,
    /// Characteristics tested against the shares of the top Rotemberg origins.
    pub balance_characteristics: Vec<String>,
    pub balance_top_origins: usize,

    /// Years whose taxes are equalised; all years when empty.
    pub counterfactual_years: Vec<i32>,
    /// Instruments of the counterfactual first stage.
    pub counterfactual_instruments: Vec<String>,

    /// Worst-case bias threshold of the weak-instrument filter.
    pub weak_iv_tau: f64,
    pub grid_tax: Vec<TaxField>,
    pub grid_transform: Vec<Transform>,
    /// Instrument sets written as `b+b_sigma`.
    pub grid_instruments: Vec<String>,
    pub grid_state_year_fe: Vec<bool>,
    /// Extra control sets written as `a+b`; the empty string adds none.
    pub grid_controls: Vec<String>,
    pub grid_outcome: Vec<String>,

    pub sim_n_zones: usize,
    pub sim_n_states: usize,
    pub sim_n_years: usize,
    pub sim_replication: u64,
    pub sim_phi: f64,
    pub sim_phi_external: f64,
    pub sim_xi: f64,
    pub sim_share_exogeneity: bool,
    pub sim_endogenous_flows: bool,
    pub sim_log_odds_noise_sd: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        RunConfig {
            data_dir: None,
            out_dir: PathBuf::from("out"),
            seed: 42,
            threads: None,
            tax: TaxField::Atr95,
            outcome: "y_all".into(),
            outcome_external: "y_external".into(),
            transform: Transform::Log1p,
            fe: s(&["zone", "year"]),
            cluster: s(&["zone"]),
            controls: s(&["ln_net_tax"]),
            instruments: s(&["b"]),
            variants: vec![Variant::All, Variant::Interstate, Variant::SpatialLag],
            initial_window: None,
            impute: ImputeRule::ZeroMean,
            corporate: true,
            event_lo: -5,
            event_hi: 5,
            event_instruments: s(&["b", "b_sigma"]),
            placebo_draws: 1000,
            ring_edges: vec![100.0, 200.0, 300.0, 400.0, 500.0],
            rotemberg_level: RotembergLevel::Origin,
            rotemberg_variant: Variant::All,
            balance_characteristics: vec![],
            balance_top_origins: 5,
            counterfactual_years: vec![],
            counterfactual_instruments: s(&["b", "b_sigma"]),
            weak_iv_tau: 0.10,
            grid_tax: vec![],
            grid_transform: vec![],
            grid_instruments: vec![],
            grid_state_year_fe: vec![],
            grid_controls: vec![],
            grid_outcome: vec![],
            sim_n_zones: 50,
            sim_n_states: 10,
            sim_n_years: 20,
            sim_replication: 0,
            sim_phi: 0.06,
            sim_phi_external: 0.04,
            sim_xi: 0.5,
            sim_share_exogeneity: true,
            sim_endogenous_flows: false,
            sim_log_odds_noise_sd: 0.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<RunConfig> {
        let value: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some((k, _)) = value.iter().find(|(_, v)| v.is_table()) {
            return Err(CliError::Config(format!("`{k}`: nested tables are not supported")));
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let mut p = Vec::new();
        if self.instruments.is_empty() {
            p.push("`instruments` must not be empty".to_string());
        }
        if self.event_instruments.is_empty() {
            p.push("`event_instruments` must not be empty".to_string());
        }
        if self.counterfactual_instruments.is_empty() {
            p.push("`counterfactual_instruments` must not be empty".to_string());
        }
        if self.placebo_draws == 0 {
            p.push("`placebo_draws` must be positive".to_string());
        }
        if !TAUS.iter().any(|t| (t - self.weak_iv_tau).abs() < 1e-12) {
            p.push(format!("`weak_iv_tau` must be one of {TAUS:?}"));
        }
        if let Err(e) = Window::new(self.event_lo, self.event_hi) {
            p.push(e.to_string());
        }
        if self.threads == Some(0) {
            p.push("`threads` must be positive".to_string());
        }
        for f in self.fe.iter().chain(&self.cluster) {
            if let Err(e) = f.parse::<FeTerm>() {
                p.push(format!("`{f}`: {e}"));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(p.join("; ")))
        }
    }

    pub fn window(&self) -> CliResult<Window> {
        Window::new(self.event_lo, self.event_hi).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn baseline_options(&self, tax: TaxField) -> BaselineOptions {
        BaselineOptions {
            choice: ChoiceOptions { tax, corporate: self.corporate, ..Default::default() },
            impute: self.impute,
            variants: self.variants.clone(),
            initial_window: self.initial_window.map(|[a, b]| (a, b)),
        }
    }

    /// The main equation for `outcome`.
    pub fn spec(&self, outcome: &str) -> CliResult<RegressionSpec> {
        let terms = |v: &[String]| -> CliResult<Vec<FeTerm>> {
            v.iter().map(|s| s.parse().map_err(|e: shiftshare::Error| CliError::Config(e.to_string()))).collect()
        };
        let cluster = terms(&self.cluster)?;
        Ok(RegressionSpec {
            outcome: outcome.into(),
            transform: self.transform,
            endogenous: vec![INFLOWS.into()],
            instruments: self.instruments.clone(),
            exogenous: self.controls.clone(),
            fe: terms(&self.fe)?,
            vce: if cluster.is_empty() { VceSpec::Robust } else { VceSpec::Cluster(cluster) },
        })
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            n_zones: self.sim_n_zones,
            n_states: self.sim_n_states,
            n_years: self.sim_n_years,
            seed: self.seed,
            replication: self.sim_replication,
            share_exogeneity_satisfied: self.sim_share_exogeneity,
            endogenous_flows: self.sim_endogenous_flows,
            log_odds_noise_sd: self.sim_log_odds_noise_sd,
            ..Default::default()
        }
    }

    pub fn truth_params(&self) -> TruthParams {
        TruthParams { phi: self.sim_phi, phi_external: self.sim_phi_external, xi: self.sim_xi, ..Default::default() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("tax = \"atr99\"\ninstruments = [\"b\", \"b_sigma\"]\nsim_n_zones = 12\n").unwrap();
        assert_eq!(c.tax, TaxField::Atr99);
        assert_eq!(c.instruments.len(), 2);
        assert_eq!(c.sim_n_zones, 12);
        assert_eq!(c.outcome, "y_all");
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::parse("unknown_key = 1").is_err());
        assert!(RunConfig::parse("instruments = []").is_err());
        assert!(RunConfig::parse("[section]\nx = 1").is_err());
        assert!(RunConfig::parse("fe = [\"galaxy\"]").is_err());
        assert!(RunConfig::parse("event_lo = 1").is_err());
    }
}

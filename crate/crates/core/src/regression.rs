//! Declarative zone-year regression specifications resolved against a
//! [`ZoneYearFrame`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fe::{Dim, FeTerm};
use crate::frame::{Transform, ZoneYearFrame, INFLOWS, LN_NET_TAX};
use crate::iv::{self, Design, IvFit};
use crate::vce::VceMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VceSpec {
    Homoskedastic,
    Robust,
    Cluster(Vec<FeTerm>),
}

impl VceSpec {
    pub fn by_zone() -> Self {
        VceSpec::Cluster(vec![FeTerm::single(Dim::Zone)])
    }

    pub fn resolve(&self, frame: &ZoneYearFrame) -> Result<VceMode> {
        Ok(match self {
            VceSpec::Homoskedastic => VceMode::Homoskedastic,
            VceSpec::Robust => VceMode::Robust,
            VceSpec::Cluster(terms) => {
                VceMode::Cluster(terms.iter().map(|t| frame.cluster_codes(t)).collect::<Result<_>>()?)
            }
        })
    }
}

/// Outcome, regressors, instruments, fixed effects and VCE of one equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub outcome: String,
    pub transform: Transform,
    pub endogenous: Vec<String>,
    pub instruments: Vec<String>,
    pub exogenous: Vec<String>,
    pub fe: Vec<FeTerm>,
    pub vce: VceSpec,
}

impl RegressionSpec {
    /// ln(1+Y) on M instrumented by B, controlling for ln(1−τ) with zone
    /// and year effects, clustered by zone.
    pub fn baseline(outcome: &str) -> Self {
        RegressionSpec {
            outcome: outcome.into(),
            transform: Transform::Log1p,
            endogenous: vec![INFLOWS.into()],
            instruments: vec!["b".into()],
            exogenous: vec![LN_NET_TAX.into()],
            fe: vec![FeTerm::single(Dim::Zone), FeTerm::single(Dim::Year)],
            vce: VceSpec::by_zone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.instruments.is_empty() && self.instruments.len() < self.endogenous.len() {
            return Err(Error::Underidentified(format!(
                "order condition fails: {} instruments for {} endogenous regressors",
                self.instruments.len(),
                self.endogenous.len()
            )));
        }
        Ok(())
    }

    /// Resolves the specification into a design over all frame rows.
    pub fn design(&self, frame: &ZoneYearFrame) -> Result<Design> {
        self.validate()?;
        let mut d = Design::new(frame.outcome(&self.outcome, self.transform)?);
        d.endogenous = frame.columns(&self.endogenous)?;
        d.instruments = frame.columns(&self.instruments)?;
        d.exogenous = frame.columns(&self.exogenous)?;
        d.factors = frame.factors(&self.fe)?;
        d.vce = self.vce.resolve(frame)?;
        Ok(d)
    }

    pub fn fit(&self, frame: &ZoneYearFrame) -> Result<IvFit> {
        iv::fit(&self.design(frame)?)
    }

    /// Same specification estimated by FE-OLS (instruments ignored).
    pub fn fit_ols(&self, frame: &ZoneYearFrame) -> Result<IvFit> {
        let mut d = self.design(frame)?;
        d.instruments.clear();
        iv::fit_fe_ols(&d)
    }
}

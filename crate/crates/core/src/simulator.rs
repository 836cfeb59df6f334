//! Structural world generator for the inventor/firm location-choice model.
//!
//! Inventors value after-tax income, wages, amenities and pay moving costs;
//! firms value their own policy environment and production amenities and pay
//! wages. Wages are pinned down by equating the inventor and firm log odds,
//! which leaves the reduced-form log-odds equation with η = α/(1+α) and
//! η′ = αβ/(1+α). Choice probabilities are the softmax of the resulting
//! indices, flows are drawn multinomially from origin stocks, and outcomes
//! follow a log-linear productivity equation with a known inflow effect.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gumbel, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoRegistry, StateId, Zone, ZoneId};
use crate::panel::{Calendar, FlowPanel, OutcomePanel, Panels, PolicyPanel, PolicyRow, TaxField};
use crate::rng::{stream, StreamRng};

/// Maps the structural income and firm-policy coefficients to the reduced
/// form: η = α/(1+α), η′ = αβ/(1+α).
pub fn structural_to_reduced(alpha: f64, beta: f64) -> Result<(f64, f64)> {
    if alpha == -1.0 {
        return Err(Error::SingularAlpha);
    }
    if alpha < -1.0 || !alpha.is_finite() {
        return Err(Error::InvalidInput(format!("alpha must exceed -1, got {alpha}")));
    }
    Ok((alpha / (1.0 + alpha), alpha * beta / (1.0 + alpha)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaxProcess {
    /// Per-state reflecting random walk in rate space.
    RandomWalk { initial_low: f64, initial_high: f64, step_sd: f64, lower: f64, upper: f64 },
    /// Explicit top-tax paths, one vector of length `n_years` per state.
    Scripted { paths: Vec<Vec<f64>> },
}

impl Default for TaxProcess {
    fn default() -> Self {
        TaxProcess::RandomWalk { initial_low: 0.10, initial_high: 0.35, step_sd: 0.03, lower: 0.05, upper: 0.45 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_zones: usize,
    pub n_states: usize,
    pub n_years: usize,
    pub first_year: i32,
    /// Initial stock per zone; each zone draws uniformly within
    /// ±`stock_spread` (a fraction) around it.
    pub stock_init: u64,
    pub stock_spread: f64,
    pub tax_process: TaxProcess,
    pub seed: u64,
    /// Replication index; selects independent random streams for Monte Carlo.
    pub replication: u64,
    pub share_exogeneity_satisfied: bool,
    /// Loading of the outcome shock on another state's ln(1−τ) when share
    /// exogeneity is switched off.
    pub exogeneity_violation: f64,
    pub endogenous_flows: bool,
    /// Weight on the destination's outcome shock in every choice index when
    /// `endogenous_flows` is on.
    pub endogeneity_strength: f64,
    /// Standard deviation of the pair-year log-odds shock u_odt.
    pub log_odds_noise_sd: f64,
    /// Draw each inventor's choice from explicit Gumbel utilities instead of
    /// the multinomial shortcut.
    pub microsimulation: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_zones: 10,
            n_states: 3,
            n_years: 10,
            first_year: 2000,
            stock_init: 2000,
            stock_spread: 0.5,
            tax_process: TaxProcess::default(),
            seed: 42,
            replication: 0,
            share_exogeneity_satisfied: true,
            exogeneity_violation: 1.0,
            endogenous_flows: false,
            endogeneity_strength: 0.3,
            log_odds_noise_sd: 0.0,
            microsimulation: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.n_zones < 2 {
            p.push("n_zones must be at least 2".to_string());
        }
        if self.n_states == 0 || self.n_states > self.n_zones {
            p.push("n_states must be between 1 and n_zones".to_string());
        }
        if self.n_years == 0 {
            p.push("n_years must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.stock_spread) {
            p.push("stock_spread must lie in [0, 1)".to_string());
        }
        match &self.tax_process {
            TaxProcess::RandomWalk { initial_low, initial_high, lower, upper, step_sd } => {
                if !(0.0 <= *lower && lower < upper && *upper < 1.0 && initial_low <= initial_high && *step_sd >= 0.0) {
                    p.push("random-walk tax bounds must satisfy 0 ≤ lower < upper < 1".to_string());
                }
            }
            TaxProcess::Scripted { paths } => {
                if paths.len() != self.n_states || paths.iter().any(|v| v.len() != self.n_years) {
                    p.push("scripted tax paths must be n_states × n_years".to_string());
                }
                if paths.iter().flatten().any(|&v| !(0.0..1.0).contains(&v)) {
                    p.push("scripted tax rates must lie in [0, 1)".to_string());
                }
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }
}

/// Scalar parameters from which a [`WorldTruth`] is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruthParams {
    pub alpha: f64,
    /// Firm-policy coefficients on ln(1−CITR), ln(1+ITC), ln(1+RTC).
    pub beta: [f64; 3],
    pub phi: f64,
    pub phi_external: f64,
    pub xi: f64,
    pub xi_external: f64,
    pub noise_sd: f64,
    pub amenity_sd: f64,
    pub cost_intercept: f64,
    pub cost_per_1000_miles: f64,
    pub cost_noise_sd: f64,
    pub firm_cost_intercept: f64,
    pub firm_cost_per_1000_miles: f64,
    /// Mean of the zone effects in ln(1+Y); keeps simulated outcomes positive.
    pub outcome_base: f64,
    pub zone_effect_sd: f64,
    pub year_effect_sd: f64,
    /// Level gap between the all-inventor and external-inventor outcomes.
    pub external_gap: f64,
}

impl Default for TruthParams {
    fn default() -> Self {
        TruthParams {
            alpha: 1.0,
            beta: [0.0; 3],
            phi: 0.06,
            phi_external: 0.04,
            xi: 0.5,
            xi_external: 0.3,
            noise_sd: 0.1,
            amenity_sd: 0.3,
            cost_intercept: 5.5,
            cost_per_1000_miles: 1.0,
            cost_noise_sd: 0.2,
            firm_cost_intercept: 5.5,
            firm_cost_per_1000_miles: 1.0,
            outcome_base: 4.0,
            zone_effect_sd: 0.5,
            year_effect_sd: 0.1,
            external_gap: 1.0,
        }
    }
}

/// Realised structural primitives of one world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub params: TruthParams,
    /// Inventor amenities Z_d (dense zone order).
    pub amenities: Vec<f64>,
    /// Firm production amenities Z′_d.
    pub firm_amenities: Vec<f64>,
    /// Inventor moving costs C_od, row-major n × n, zero diagonal.
    pub costs: Vec<f64>,
    /// Firm moving costs C′_od, row-major n × n, zero diagonal.
    pub firm_costs: Vec<f64>,
    /// δ_d in the outcome equation.
    pub zone_effects: Vec<f64>,
    /// δ_t in the outcome equation.
    pub year_effects: Vec<f64>,
}

impl WorldTruth {
    pub fn draw(cfg: &SimConfig, params: &TruthParams) -> Result<WorldTruth> {
        cfg.validate()?;
        structural_to_reduced(params.alpha, 0.0)?;
        let geo = generate_geography(cfg)?;
        let n = geo.len();
        let mut rng = stream(cfg.seed, "truth", cfg.replication);
        let amen = Normal::new(0.0, params.amenity_sd.max(0.0)).map_err(invalid)?;
        let amenities = (0..n).map(|_| amen.sample(&mut rng)).collect();
        let firm_amenities = (0..n).map(|_| amen.sample(&mut rng)).collect();
        let noise = Normal::new(0.0, params.cost_noise_sd.max(0.0)).map_err(invalid)?;
        let mut costs = vec![0.0; n * n];
        let mut firm_costs = vec![0.0; n * n];
        for o in 0..n {
            for d in 0..n {
                if o == d {
                    continue;
                }
                let miles = geo.distance(o, d) / 1000.0;
                costs[o * n + d] =
                    (params.cost_intercept + params.cost_per_1000_miles * miles + noise.sample(&mut rng)).max(0.0);
                firm_costs[o * n + d] =
                    (params.firm_cost_intercept + params.firm_cost_per_1000_miles * miles + noise.sample(&mut rng))
                        .max(0.0);
            }
        }
        let ze = Normal::new(params.outcome_base, params.zone_effect_sd.max(0.0)).map_err(invalid)?;
        let zone_effects = (0..n).map(|_| ze.sample(&mut rng)).collect();
        let ye = Normal::new(0.0, params.year_effect_sd.max(0.0)).map_err(invalid)?;
        let year_effects = (0..cfg.n_years).map(|_| ye.sample(&mut rng)).collect();
        Ok(WorldTruth {
            params: params.clone(),
            amenities,
            firm_amenities,
            costs,
            firm_costs,
            zone_effects,
            year_effects,
        })
    }

    pub fn reduced_form(&self) -> (f64, [f64; 3]) {
        let a = self.params.alpha;
        let eta = a / (1.0 + a);
        (eta, self.params.beta.map(|b| a * b / (1.0 + a)))
    }

    fn n(&self) -> usize {
        self.amenities.len()
    }

    /// Destination effect γ_d = (Z_d + αZ′_d)/(1+α).
    pub fn gamma_dest(&self, d: usize) -> f64 {
        let a = self.params.alpha;
        (self.amenities[d] + a * self.firm_amenities[d]) / (1.0 + a)
    }

    /// Origin effect γ_o = −(Z_o + αZ′_o)/(1+α).
    pub fn gamma_origin(&self, o: usize) -> f64 {
        -self.gamma_dest(o)
    }

    /// Pair effect γ_od = −(C_od + αC′_od)/(1+α).
    pub fn gamma_pair(&self, o: usize, d: usize) -> f64 {
        let a = self.params.alpha;
        let n = self.n();
        -(self.costs[o * n + d] + a * self.firm_costs[o * n + d]) / (1.0 + a)
    }
}

fn invalid<E: std::fmt::Display>(e: E) -> Error {
    Error::InvalidInput(e.to_string())
}

/// Zones scattered around state centres laid out on a lat/lon grid. Zone `i`
/// belongs to state `i mod n_states`.
pub fn generate_geography(cfg: &SimConfig) -> Result<GeoRegistry> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, "geography", cfg.replication);
    let cols = (cfg.n_states as f64).sqrt().ceil() as usize;
    let jitter = Uniform::new(-1.5, 1.5).map_err(invalid)?;
    let zones = (0..cfg.n_zones)
        .map(|i| {
            let s = i % cfg.n_states;
            let (row, col) = (s / cols, s % cols);
            Zone {
                id: ZoneId(1000 + i as u32),
                state: state_name(s),
                lat: 32.0 + 5.0 * row as f64 + jitter.sample(&mut rng),
                lon: -115.0 + 5.0 * col as f64 + jitter.sample(&mut rng),
            }
        })
        .collect();
    GeoRegistry::new(zones)
}

fn state_name(s: usize) -> StateId {
    StateId(format!("S{s:02}"))
}

fn reflect(mut x: f64, lo: f64, hi: f64) -> f64 {
    for _ in 0..8 {
        if x < lo {
            x = 2.0 * lo - x;
        } else if x > hi {
            x = 2.0 * hi - x;
        } else {
            break;
        }
    }
    x.clamp(lo, hi)
}

/// State policy paths: the top-earner tax follows the configured process;
/// other measures are tied to it, firm policies wander slowly and the legal
/// indicators switch on at random years.
pub fn generate_policies(cfg: &SimConfig) -> Result<PolicyPanel> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, "policies", cfg.replication);
    let ny = cfg.n_years;
    let step = Normal::new(0.0, 1.0).map_err(invalid)?;
    let mut rows = Vec::with_capacity(cfg.n_states * ny);
    for s in 0..cfg.n_states {
        let top: Vec<f64> = match &cfg.tax_process {
            TaxProcess::Scripted { paths } => paths[s].clone(),
            TaxProcess::RandomWalk { initial_low, initial_high, step_sd, lower, upper } => {
                let mut v = rng.random_range(*initial_low..=*initial_high);
                let mut path = Vec::with_capacity(ny);
                for _ in 0..ny {
                    path.push(v);
                    v = reflect(v + step_sd * step.sample(&mut rng), *lower, *upper);
                }
                path
            }
        };
        let mut citr = rng.random_range(0.0..0.10);
        let mut itc = rng.random_range(0.0..0.05);
        let mut rtc = rng.random_range(0.0..0.10);
        let mut aptr = rng.random_range(0.005..0.03);
        let switch = |rng: &mut StreamRng| -> usize {
            if rng.random_bool(0.5) {
                rng.random_range(0..ny)
            } else {
                ny
            }
        };
        let (ts, ud, uf, ut) = (switch(&mut rng), switch(&mut rng), switch(&mut rng), switch(&mut rng));
        for (t, &tau) in top.iter().enumerate() {
            rows.push(PolicyRow {
                atr95: tau,
                atr99: (tau + 0.015).min(0.95),
                atr50: 0.6 * tau,
                mtr: (tau + 0.03).min(0.95),
                aptr,
                citr,
                itc,
                rtc,
                ts_low: (t >= ts) as u8 as f64,
                udda: (t >= ud) as u8 as f64,
                uflra: (t >= uf) as u8 as f64,
                ufta: (t >= ut) as u8 as f64,
            });
            citr = reflect(citr + 0.005 * step.sample(&mut rng), 0.0, 0.12);
            itc = reflect(itc + 0.003 * step.sample(&mut rng), 0.0, 0.10);
            rtc = reflect(rtc + 0.005 * step.sample(&mut rng), 0.0, 0.20);
            aptr = reflect(aptr + 0.001 * step.sample(&mut rng), 0.001, 0.05);
        }
    }
    let panel = PolicyPanel {
        states: (0..cfg.n_states).map(state_name).collect(),
        calendar: Calendar::new(cfg.first_year, ny),
        rows,
    };
    panel.validate()?;
    Ok(panel)
}

/// Serializable summary of a world's ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub alpha: f64,
    pub beta: [f64; 3],
    pub eta: f64,
    pub eta_prime: [f64; 3],
    pub phi_true: f64,
    pub phi_external_true: f64,
    pub xi_true: f64,
    pub xi_external_true: f64,
    pub noise_sd: f64,
    pub log_odds_noise_sd: f64,
    pub share_exogeneity_satisfied: bool,
    pub endogenous_flows: bool,
    pub zone_ids: Vec<u32>,
    pub years: Vec<i32>,
    pub amenities: Vec<f64>,
    pub firm_amenities: Vec<f64>,
    pub costs: Vec<f64>,
    pub firm_costs: Vec<f64>,
    pub zone_effects: Vec<f64>,
    pub year_effects: Vec<f64>,
    /// Zone component of ln w_dt relative to the first zone, zone-major.
    pub equilibrium_wages: Vec<f64>,
    /// Outcome shocks ε_dt (all-inventor equation), zone-major.
    pub outcome_shocks: Vec<f64>,
}

/// A simulated world: panels plus everything needed to check estimators.
#[derive(Debug, Clone)]
pub struct World {
    pub panels: Panels,
    pub truth: WorldTruth,
    pub config: SimConfig,
    pub tax_field: TaxField,
    /// True choice probabilities, indexed `(t * n + o) * n + c`.
    pub probabilities: Vec<f64>,
    /// Σ_{o≠d} P_odt I_ot, zone-major.
    pub expected_inflows: Vec<f64>,
    /// Outcome shocks ε_dt, zone-major.
    pub shocks: Vec<f64>,
    /// Pair-year log-odds shocks u_odt, indexed like `probabilities`
    /// (empty when the shock scale is zero).
    pub pair_shocks: Vec<f64>,
}

/// Generates geography and policies from the configuration and simulates.
pub fn simulate_world(cfg: &SimConfig, truth: &WorldTruth) -> Result<World> {
    let policies = generate_policies(cfg)?;
    simulate_world_with_policies(cfg, truth, &policies)
}

/// Simulates with an explicit policy panel (used for counterfactual
/// re-simulation). All random draws other than flows' responses to policy are
/// shared with [`simulate_world`] for the same configuration.
pub fn simulate_world_with_policies(cfg: &SimConfig, truth: &WorldTruth, policies: &PolicyPanel) -> Result<World> {
    cfg.validate()?;
    let geo = generate_geography(cfg)?;
    let n = geo.len();
    let ny = cfg.n_years;
    if truth.n() != n || truth.year_effects.len() != ny {
        return Err(Error::InvalidInput("truth was drawn for a different configuration".into()));
    }
    let cal = Calendar::new(cfg.first_year, ny);
    let tax = TaxField::Atr95;
    let rows = policies.zone_rows(&geo, &cal)?;
    let (eta, eta_p) = truth.reduced_form();
    let p = &truth.params;

    // Outcome shocks, drawn before flows so the endogenous channel can use them.
    let mut shock_rng = stream(cfg.seed, "outcome-shocks", cfg.replication);
    let eps_dist = Normal::new(0.0, p.noise_sd.max(0.0)).map_err(invalid)?;
    let mut shocks: Vec<f64> = (0..n * ny).map(|_| eps_dist.sample(&mut shock_rng)).collect();
    let ext_shocks: Vec<f64> = (0..n * ny).map(|_| eps_dist.sample(&mut shock_rng)).collect();
    if !cfg.share_exogeneity_satisfied {
        let ns = geo.states().len();
        for d in 0..n {
            let other = &geo.states()[(geo.state_index(d) + 1) % ns];
            for t in 0..ny {
                let tau = policies
                    .lookup(other, cal.year(t))
                    .ok_or_else(|| Error::InvalidInput(format!("no policy for {other}")))?
                    .ln_net_of_tax(tax);
                shocks[d * ny + t] += cfg.exogeneity_violation * (tau + 0.25);
            }
        }
    }

    let pair_shocks: Vec<f64> = if cfg.log_odds_noise_sd > 0.0 {
        let mut r = stream(cfg.seed, "pair-shocks", cfg.replication);
        let u = Normal::new(0.0, cfg.log_odds_noise_sd).map_err(invalid)?;
        (0..ny * n * n).map(|_| u.sample(&mut r)).collect()
    } else {
        Vec::new()
    };

    // Destination-level part of every choice index.
    let base_index = |c: usize, t: usize| -> f64 {
        let row = &rows[c * ny + t];
        let corp = row.corporate_terms();
        let mut v = eta * row.ln_net_of_tax(tax) + truth.gamma_dest(c);
        for k in 0..3 {
            v += eta_p[k] * corp[k];
        }
        if cfg.endogenous_flows {
            v += cfg.endogeneity_strength * shocks[c * ny + t];
        }
        v
    };

    let mut probabilities = vec![0.0; ny * n * n];
    let mut flows = FlowPanel::empty(n, cal);
    let mut stock_rng = stream(cfg.seed, "stocks", cfg.replication);
    let spread = cfg.stock_spread;
    for o in 0..n {
        let f = if spread > 0.0 { stock_rng.random_range(1.0 - spread..=1.0 + spread) } else { 1.0 };
        flows.stocks[o * ny] = (cfg.stock_init as f64 * f).round();
    }

    for t in 0..ny {
        let base: Vec<f64> = (0..n).map(|c| base_index(c, t)).collect();
        // Probabilities for every origin in parallel.
        let block: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|o| {
                let idx: Vec<f64> = (0..n)
                    .map(|c| {
                        if c == o {
                            base[c]
                        } else {
                            let u = if pair_shocks.is_empty() { 0.0 } else { pair_shocks[(t * n + o) * n + c] };
                            base[c] + truth.gamma_pair(o, c) + u
                        }
                    })
                    .collect();
                softmax(&idx)
            })
            .collect();
        for (o, row) in block.into_iter().enumerate() {
            probabilities[(t * n + o) * n..(t * n + o + 1) * n].copy_from_slice(&row);
        }

        // Realised choices, one stream per (replication, year, origin).
        let draws: Vec<Vec<u64>> = (0..n)
            .into_par_iter()
            .map(|o| {
                let stock = flows.stocks[o * ny + t] as u64;
                let probs = &probabilities[(t * n + o) * n..(t * n + o + 1) * n];
                let mut r = stream(cfg.seed ^ ((t as u64) << 32 | o as u64), "flows", cfg.replication);
                if cfg.microsimulation {
                    gumbel_choices(stock, probs, &mut r)
                } else {
                    multinomial(stock, probs, &mut r)
                }
            })
            .collect();
        let mut next = vec![0.0; n];
        for (o, counts) in draws.iter().enumerate() {
            for (c, &m) in counts.iter().enumerate() {
                if c == o {
                    flows.stays[o * ny + t] = m as f64;
                } else if m > 0 {
                    flows.set_flow(o, c, t, m as f64);
                }
                next[c] += m as f64;
            }
        }
        if t + 1 < ny {
            for o in 0..n {
                flows.stocks[o * ny + t + 1] = next[o];
            }
        }
    }

    let mut expected_inflows = vec![0.0; n * ny];
    for t in 0..ny {
        for o in 0..n {
            let stock = flows.stocks[o * ny + t];
            for d in (0..n).filter(|&d| d != o) {
                expected_inflows[d * ny + t] += probabilities[(t * n + o) * n + d] * stock;
            }
        }
    }

    // Outcomes.
    let inflows = flows.inflows();
    let mut y_all = vec![0.0; n * ny];
    let mut y_ext = vec![0.0; n * ny];
    let mut y_int = vec![0.0; n * ny];
    for d in 0..n {
        for t in 0..ny {
            let i = d * ny + t;
            let lt = rows[i].ln_net_of_tax(tax);
            let m = inflows[i];
            let fe = truth.zone_effects[d] + truth.year_effects[t];
            let la = p.phi * m + p.xi * lt + fe + shocks[i];
            let le = p.phi_external * m + p.xi_external * lt + fe - p.external_gap + ext_shocks[i];
            let a = la.exp_m1().max(0.0);
            let e = le.exp_m1().clamp(0.0, a);
            y_all[i] = a;
            y_ext[i] = e;
            y_int[i] = a - e;
        }
    }
    let mut ctrl_rng = stream(cfg.seed, "controls", cfg.replication);
    let mut mfg = vec![0.0; n * ny];
    for d in 0..n {
        let mut level = 10.0 + ctrl_rng.random_range(-1.0..1.0);
        for t in 0..ny {
            mfg[d * ny + t] = level;
            level += 0.05 * ctrl_rng.random_range(-1.0..1.0);
        }
    }
    let mut outcomes = OutcomePanel { n_zones: n, calendar: Some(cal), ..Default::default() };
    outcomes.outcomes.insert("y_all".into(), y_all);
    outcomes.outcomes.insert("y_external".into(), y_ext);
    outcomes.outcomes.insert("y_internal".into(), y_int);
    outcomes.controls.insert("ln_mfg_emp".into(), mfg);

    flows.validate(&geo)?;
    Ok(World {
        panels: Panels { geo, policies: policies.clone(), flows, outcomes },
        truth: truth.clone(),
        config: cfg.clone(),
        tax_field: tax,
        probabilities,
        expected_inflows,
        shocks,
        pair_shocks,
    })
}

/// Numerically stable softmax.
pub fn softmax(idx: &[f64]) -> Vec<f64> {
    let m = idx.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = idx.iter().map(|&v| if v.is_finite() { (v - m).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Multinomial draw by sequential conditional binomials.
fn multinomial(n: u64, probs: &[f64], rng: &mut StreamRng) -> Vec<u64> {
    let mut out = vec![0u64; probs.len()];
    let mut left = n;
    let mut mass = 1.0;
    for (k, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if k + 1 == probs.len() {
            out[k] = left;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let m = Binomial::new(left, q).map(|b| b.sample(rng)).unwrap_or(0);
        out[k] = m;
        left -= m;
        mass -= p;
    }
    out
}

/// One Gumbel-perturbed utility maximisation per inventor.
fn gumbel_choices(n: u64, probs: &[f64], rng: &mut StreamRng) -> Vec<u64> {
    let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let idx: Vec<f64> = probs.iter().map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect();
    let mut out = vec![0u64; probs.len()];
    for _ in 0..n {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (c, &v) in idx.iter().enumerate() {
            let u = v + g.sample(rng);
            if u > best.1 {
                best = (c, u);
            }
        }
        out[best.0] += 1;
    }
    out
}

impl World {
    pub fn n_zones(&self) -> usize {
        self.panels.geo.len()
    }

    pub fn n_years(&self) -> usize {
        self.config.n_years
    }

    pub fn probability(&self, o: usize, c: usize, t: usize) -> f64 {
        let n = self.n_zones();
        self.probabilities[(t * n + o) * n + c]
    }

    fn policy(&self, z: usize, t: usize) -> &PolicyRow {
        self.panels
            .policies
            .lookup(self.panels.geo.state_of(z), self.config.first_year + t as i32)
            .expect("policies cover the simulated calendar")
    }

    /// Shocks that enter the log odds beyond the structural terms.
    fn extra_log_odds(&self, o: usize, d: usize, t: usize) -> f64 {
        let n = self.n_zones();
        let ny = self.n_years();
        let mut extra = 0.0;
        if !self.pair_shocks.is_empty() {
            extra += self.pair_shocks[(t * n + o) * n + d];
        }
        if self.config.endogenous_flows {
            extra += self.config.endogeneity_strength * (self.shocks[d * ny + t] - self.shocks[o * ny + t]);
        }
        extra
    }

    /// ln(P_odt/P_oot) from the simulated choice probabilities.
    pub fn realized_log_odds(&self, o: usize, d: usize, t: usize) -> f64 {
        (self.probability(o, d, t) / self.probability(o, o, t)).ln()
    }

    /// Right-hand side of the estimating equation evaluated at the true
    /// reduced-form parameters and fixed effects.
    pub fn reduced_form_log_odds(&self, o: usize, d: usize, t: usize) -> f64 {
        let (eta, eta_p) = self.truth.reduced_form();
        let (po, pd) = (self.policy(o, t), self.policy(d, t));
        let (co, cd) = (po.corporate_terms(), pd.corporate_terms());
        let mut v = eta * (pd.ln_net_of_tax(self.tax_field) - po.ln_net_of_tax(self.tax_field));
        for k in 0..3 {
            v += eta_p[k] * (cd[k] - co[k]);
        }
        v + self.truth.gamma_dest(d)
            + self.truth.gamma_origin(o)
            + self.truth.gamma_pair(o, d)
            + self.extra_log_odds(o, d, t)
    }

    /// Zone component of the equilibrium log wage:
    /// (β·ln τ′_d + Z′_d − α ln(1−τ_d) − Z_d)/(1+α).
    pub fn wage_component(&self, z: usize, t: usize) -> f64 {
        let p = &self.truth.params;
        let row = self.policy(z, t);
        let corp = row.corporate_terms();
        let firm: f64 = (0..3).map(|k| p.beta[k] * corp[k]).sum();
        (firm + self.truth.firm_amenities[z] - p.alpha * row.ln_net_of_tax(self.tax_field) - self.truth.amenities[z])
            / (1.0 + p.alpha)
    }

    /// ln w_dt − ln w_ot implied by equating inventor and firm log odds.
    /// The pair term (C_od − C′_od)/(1+α) accompanies the zone components.
    /// Log-odds shocks enter both sides alike and leave wages unchanged.
    pub fn wage_gap(&self, o: usize, d: usize, t: usize) -> f64 {
        let p = &self.truth.params;
        let n = self.n_zones();
        let pair = (self.truth.costs[o * n + d] - self.truth.firm_costs[o * n + d]) / (1.0 + p.alpha);
        self.wage_component(d, t) - self.wage_component(o, t) + pair
    }

    /// Inventor log odds computed from utilities and equilibrium wages:
    /// α Δln(1−τ) + α Δln w + ΔZ − C_od (+ shocks).
    pub fn inventor_log_odds(&self, o: usize, d: usize, t: usize) -> f64 {
        let p = &self.truth.params;
        let n = self.n_zones();
        let (po, pd) = (self.policy(o, t), self.policy(d, t));
        p.alpha * (pd.ln_net_of_tax(self.tax_field) - po.ln_net_of_tax(self.tax_field))
            + p.alpha * self.wage_gap(o, d, t)
            + (self.truth.amenities[d] - self.truth.amenities[o])
            - self.truth.costs[o * n + d]
            + self.extra_log_odds(o, d, t)
    }

    /// Firm log odds at the same wages: β Δln τ′ − Δln w + ΔZ′ − C′_od.
    pub fn firm_log_odds(&self, o: usize, d: usize, t: usize) -> f64 {
        let p = &self.truth.params;
        let n = self.n_zones();
        let (co, cd) = (self.policy(o, t).corporate_terms(), self.policy(d, t).corporate_terms());
        let firm: f64 = (0..3).map(|k| p.beta[k] * (cd[k] - co[k])).sum();
        firm - self.wage_gap(o, d, t) + (self.truth.firm_amenities[d] - self.truth.firm_amenities[o])
            - self.truth.firm_costs[o * n + d]
            + self.extra_log_odds(o, d, t)
    }

    pub fn truth_record(&self) -> TruthRecord {
        let p = &self.truth.params;
        let (eta, eta_prime) = self.truth.reduced_form();
        let n = self.n_zones();
        let ny = self.n_years();
        let mut wages = vec![0.0; n * ny];
        for z in 0..n {
            for t in 0..ny {
                wages[z * ny + t] = self.wage_component(z, t) - self.wage_component(0, t);
            }
        }
        TruthRecord {
            alpha: p.alpha,
            beta: p.beta,
            eta,
            eta_prime,
            phi_true: p.phi,
            phi_external_true: p.phi_external,
            xi_true: p.xi,
            xi_external_true: p.xi_external,
            noise_sd: p.noise_sd,
            log_odds_noise_sd: self.config.log_odds_noise_sd,
            share_exogeneity_satisfied: self.config.share_exogeneity_satisfied,
            endogenous_flows: self.config.endogenous_flows,
            zone_ids: self.panels.geo.zones().iter().map(|z| z.id.0).collect(),
            years: (0..ny).map(|t| self.config.first_year + t as i32).collect(),
            amenities: self.truth.amenities.clone(),
            firm_amenities: self.truth.firm_amenities.clone(),
            costs: self.truth.costs.clone(),
            firm_costs: self.truth.firm_costs.clone(),
            zone_effects: self.truth.zone_effects.clone(),
            year_effects: self.truth.year_effects.clone(),
            equilibrium_wages: wages,
            outcome_shocks: self.shocks.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_form_mapping() {
        assert_eq!(structural_to_reduced(1.0, 0.0).unwrap(), (0.5, 0.0));
        assert_eq!(structural_to_reduced(0.0, 3.0).unwrap(), (0.0, 0.0));
        assert_eq!(structural_to_reduced(3.0, 2.0).unwrap(), (0.75, 1.5));
        assert!(matches!(structural_to_reduced(-1.0, 0.0), Err(Error::SingularAlpha)));
    }

    #[test]
    fn softmax_arithmetic() {
        let p = softmax(&[0.0, 2f64.ln(), 2f64.ln()]);
        for (a, b) in p.iter().zip([0.2, 0.4, 0.4]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn multinomial_conserves_count() {
        let mut r = stream(1, "t", 0);
        let m = multinomial(1000, &[0.2, 0.3, 0.5], &mut r);
        assert_eq!(m.iter().sum::<u64>(), 1000);
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SimConfig::default();
        let truth = WorldTruth::draw(&cfg, &TruthParams::default()).unwrap();
        let a = simulate_world(&cfg, &truth).unwrap();
        let b = simulate_world(&cfg, &truth).unwrap();
        assert_eq!(a.panels.flows, b.panels.flows);
        assert_eq!(a.panels.outcomes, b.panels.outcomes);
    }

    #[test]
    fn stocks_are_conserved() {
        let cfg = SimConfig::default();
        let truth = WorldTruth::draw(&cfg, &TruthParams::default()).unwrap();
        let w = simulate_world(&cfg, &truth).unwrap();
        let f = &w.panels.flows;
        let total = |t| (0..w.n_zones()).map(|o| f.stock(o, t)).sum::<f64>();
        assert_eq!(total(0), total(cfg.n_years - 1));
        for o in 0..w.n_zones() {
            for t in 0..cfg.n_years {
                let out: f64 = f.stay(o, t) + f.outflows(o, t).iter().map(|x| x.1).sum::<f64>();
                assert_eq!(out, f.stock(o, t));
            }
        }
    }
}

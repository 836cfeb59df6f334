//! Pipeline stages. Each writes its artifacts through [`Outputs`].

use serde::Serialize;
use shiftshare::choice::write_estimates_csv;
use shiftshare::counterfactual::{run_counterfactual, CounterfactualSpec};
use shiftshare::diagnostics::balance::write_balance_csv;
use shiftshare::diagnostics::rings::fit_rings;
use shiftshare::diagnostics::shift::OriginControls;
use shiftshare::diagnostics::{
    distance_ring_design, herfindahl_diagnostics, origin_level_transform, permutation_placebo, rotemberg_decompose,
    share_balance, BalanceOptions, PlaceboOptions,
};
use shiftshare::dynamics::{build_event_design, fit_distributed_lag, fit_iv_event_study};
use shiftshare::frame::ZoneYearFrame;
use shiftshare::geo::ZoneId;
use shiftshare::instruments::write_instruments_csv;
use shiftshare::iv::IvFit;
use shiftshare::output::{fmt, CsvOut};
use shiftshare::panel::{load_panels, write_panels, PanelPaths, Panels, Schema};
use shiftshare::regression::RegressionSpec;
use shiftshare::simulator::{simulate_world, World, WorldTruth};
use shiftshare::workflow::{prepare_baseline, Baseline};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, StageExt};
use crate::manifest::Outputs;

/// Panels plus, for simulated runs, the world they came from.
pub struct Data {
    pub panels: Panels,
    pub world: Option<World>,
}

pub fn load_data(cfg: &RunConfig, out: &mut Outputs) -> CliResult<Data> {
    match &cfg.data_dir {
        Some(dir) => {
            let paths = PanelPaths::in_dir(dir);
            let panels = load_panels(&paths, &Schema::default()).stage("ingest")?;
            for p in [&paths.zones, &paths.policies, &paths.flows, &paths.stocks, &paths.stays]
                .into_iter()
                .chain(paths.outcomes.iter())
                .chain(paths.controls.iter())
            {
                out.record_input(p.into());
            }
            out.switch("data", "files");
            Ok(Data { panels, world: None })
        }
        None => {
            let sim = cfg.sim_config();
            let truth = WorldTruth::draw(&sim, &cfg.truth_params()).stage("simulate")?;
            let world = simulate_world(&sim, &truth).stage("simulate")?;
            out.switch("data", "simulated");
            Ok(Data { panels: world.panels.clone(), world: Some(world) })
        }
    }
}

pub fn baseline(cfg: &RunConfig, data: &Data, out: &mut Outputs) -> CliResult<Baseline> {
    out.switch("tax", cfg.tax.name());
    out.switch("impute", format!("{:?}", cfg.impute));
    out.switch("corporate", cfg.corporate);
    out.switch("transform", cfg.transform.label());
    prepare_baseline(&data.panels, &cfg.baseline_options(cfg.tax)).stage("choice-fit")
}

/// Aborts naming the first referenced column the frame lacks.
pub fn check_columns(frame: &ZoneYearFrame, names: &[&String]) -> CliResult<()> {
    match names.iter().find(|n| !frame.has(n)) {
        Some(n) => Err(CliError::Config(format!("column `{n}` is not in the data"))),
        None => Ok(()),
    }
}

fn check_spec(frame: &ZoneYearFrame, spec: &RegressionSpec) -> CliResult<()> {
    let names: Vec<&String> = std::iter::once(&spec.outcome)
        .chain(&spec.endogenous)
        .chain(&spec.instruments)
        .chain(&spec.exogenous)
        .collect();
    check_columns(frame, &names)
}

pub fn simulate(data: &Data, out: &mut Outputs) -> CliResult<()> {
    let world = data.world.as_ref().ok_or_else(|| CliError::Config("`simulate` needs no `data_dir`".into()))?;
    for name in ["zones.csv", "policies.csv", "flows.csv", "stocks.csv", "stays.csv", "outcomes.csv", "controls.csv"] {
        out.file(name);
    }
    write_panels(&out.dir, &data.panels).stage("simulate")?;
    out.write_json("truth.json", &world.truth_record())?;
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary {
    n_zones: usize,
    n_states: usize,
    first_year: i32,
    n_years: usize,
    total_moves: f64,
    total_stock: f64,
    outcomes: Vec<String>,
    controls: Vec<String>,
}

pub fn ingest(data: &Data, out: &mut Outputs) -> CliResult<()> {
    let p = &data.panels;
    let cal = p.flows.calendar;
    let moves: f64 = p.flows.inflows().iter().filter(|v| v.is_finite()).sum();
    let summary = IngestSummary {
        n_zones: p.geo.len(),
        n_states: p.geo.states().len(),
        first_year: cal.first_year,
        n_years: cal.n_years,
        total_moves: moves,
        total_stock: p.flows.stocks.iter().filter(|v| v.is_finite()).sum(),
        outcomes: p.outcomes.outcomes.keys().cloned().collect(),
        controls: p.outcomes.controls.keys().cloned().collect(),
    };
    out.write_json("ingest.json", &summary)?;
    Ok(())
}

pub fn choice_fit(data: &Data, base: &Baseline, out: &mut Outputs) -> CliResult<()> {
    write_estimates_csv(&base.choice, &out.file("estimates.csv")).stage("choice-fit")?;
    base.shares.write_csv(&out.file("probabilities.csv"), &data.panels.geo).stage("choice-fit")?;
    Ok(())
}

pub fn build_iv(data: &Data, base: &Baseline, out: &mut Outputs) -> CliResult<()> {
    write_instruments_csv(&out.file("instruments.csv"), &base.instruments, &data.panels.geo).stage("build-iv")?;
    Ok(())
}

fn write_fit_rows(w: &mut CsvOut, spec_id: &str, fit: &IvFit) -> shiftshare::Result<()> {
    let se = fit.se();
    for (i, term) in fit.terms.iter().enumerate() {
        w.row(&[spec_id.to_string(), term.clone(), fmt(fit.coef[i]), fmt(se[i]), fit.vce.label.clone()])?;
    }
    Ok(())
}

fn write_diag_rows(w: &mut CsvOut, spec_id: &str, fit: &IvFit) -> shiftshare::Result<()> {
    let mut row = |name: String, v: f64| w.row(&[spec_id.to_string(), name, fmt(v)]);
    row("n_obs".into(), fit.n_obs as f64)?;
    row("r2".into(), fit.r2)?;
    row("r2_within".into(), fit.r2_within)?;
    row("rss".into(), fit.rss)?;
    for (k, g) in fit.vce.n_clusters.iter().enumerate() {
        row(format!("n_clusters_{k}"), *g as f64)?;
    }
    for fs in &fit.first_stages {
        row(format!("first_stage_f_{}", fs.endogenous), fs.f_stat)?;
        row(format!("partial_r2_{}", fs.endogenous), fs.partial_r2)?;
    }
    if let Some(d) = &fit.diagnostics {
        if let Some(ef) = &d.effective_f {
            row("effective_f".into(), ef.f_eff)?;
            for c in &ef.critical {
                row(format!("critical_tau_{}", c.tau), c.value)?;
            }
        }
        for s in &d.sw {
            row(format!("sw_f_{}", s.endogenous), s.f)?;
            row(format!("sw_chi2_p_{}", s.endogenous), s.chi2_p)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Recovery {
    parameter: &'static str,
    truth: f64,
    estimate: f64,
    se: f64,
    delta: f64,
}

pub fn fit(cfg: &RunConfig, data: &Data, base: &Baseline, out: &mut Outputs) -> CliResult<()> {
    let mut fits = Vec::new();
    for (scope, outcome) in [("all", &cfg.outcome), ("external", &cfg.outcome_external)] {
        if scope == "external" && !base.frame.has(outcome) {
            out.notes.push(format!("external outcome `{outcome}` absent; skipped"));
            continue;
        }
        let spec = cfg.spec(outcome)?;
        check_spec(&base.frame, &spec)?;
        fits.push((format!("{scope}_2sls"), spec.fit(&base.frame).stage("fit")?));
        fits.push((format!("{scope}_ols"), spec.fit_ols(&base.frame).stage("fit")?));
    }
    let mut w = CsvOut::create(out.file("fit_results.csv"), &["spec_id", "term", "estimate", "se", "stat_type"])
        .stage("fit")?;
    let mut d = CsvOut::create(out.file("diagnostics.csv"), &["spec_id", "name", "value"]).stage("fit")?;
    for (id, f) in &fits {
        write_fit_rows(&mut w, id, f).stage("fit")?;
        write_diag_rows(&mut d, id, f).stage("fit")?;
        out.notes.extend(f.notes.iter().map(|n| format!("{id}: {n}")));
    }
    out.record(w.finish().stage("fit")?);
    out.record(d.finish().stage("fit")?);

    if let Some(world) = &data.world {
        let t = world.truth_record();
        let mut rec = vec![];
        let mut push = |parameter, truth: f64, fit: Option<&IvFit>| {
            if let Some(f) = fit {
                rec.push(Recovery { parameter, truth, estimate: f.coef[0], se: f.se()[0], delta: f.coef[0] - truth });
            }
        };
        let get = |id: &str| fits.iter().find(|(i, _)| i == id).map(|(_, f)| f);
        push("phi", t.phi_true, get("all_2sls"));
        push("phi_external", t.phi_external_true, get("external_2sls"));
        rec.push(Recovery {
            parameter: "eta",
            truth: t.eta,
            estimate: base.choice.eta,
            se: base.choice.se.first().copied().unwrap_or(f64::NAN),
            delta: base.choice.eta - t.eta,
        });
        out.write_json("recovery.json", &rec)?;
    }
    Ok(())
}

pub fn event_study(cfg: &RunConfig, base: &Baseline, out: &mut Outputs) -> CliResult<()> {
    let spec = cfg.spec(&cfg.outcome)?;
    check_spec(&base.frame, &RegressionSpec { instruments: cfg.event_instruments.clone(), ..spec.clone() })?;
    let design = build_event_design(&base.frame, &spec.endogenous[0], &cfg.event_instruments, cfg.window()?)
        .stage("event-study")?;
    let es = fit_iv_event_study(&base.frame, &design, &spec).stage("event-study")?;
    es.write_csv(&out.file("event_study.csv")).stage("event-study")?;
    let dl = fit_distributed_lag(&base.frame, &design, &spec).stage("event-study")?;
    let mut w = CsvOut::create(out.file("distributed_lag.csv"), &["term", "estimate", "se"]).stage("event-study")?;
    let se = dl.se();
    for (i, t) in dl.terms.iter().enumerate() {
        w.row(&[t.clone(), fmt(dl.coef[i]), fmt(se[i])]).stage("event-study")?;
    }
    out.record(w.finish().stage("event-study")?);
    out.switch("event_window", format!("[{}, {}]", cfg.event_lo, cfg.event_hi));
    Ok(())
}

#[derive(Serialize)]
struct ShiftSummary {
    phi_destination: f64,
    phi_origin: f64,
    se_origin: f64,
    n_origin_years: usize,
    effective_cells: f64,
    largest_cell: f64,
    effective_zones: f64,
    largest_zone: f64,
    rotemberg_weight_sum: f64,
    rotemberg_weighted_estimate: f64,
    rotemberg_phi: f64,
    rotemberg_share_negative: f64,
    notes: Vec<String>,
}

pub fn diagnose(cfg: &RunConfig, data: &Data, base: &Baseline, out: &mut Outputs) -> CliResult<()> {
    let p = &data.panels;
    let spec = cfg.spec(&cfg.outcome)?;
    check_spec(&base.frame, &spec)?;
    let rot = rotemberg_decompose(
        &base.frame,
        &spec,
        &base.shares,
        &p.flows.stocks,
        &p.geo,
        cfg.rotemberg_variant,
        cfg.rotemberg_level,
    )
    .stage("diagnose")?;
    rot.write_csv(&out.file("rotemberg.csv")).stage("diagnose")?;

    if cfg.balance_characteristics.is_empty() {
        out.notes.push("no balance characteristics configured; balance.csv not written".into());
    } else {
        check_columns(&base.frame, &cfg.balance_characteristics.iter().collect::<Vec<_>>())?;
        let mut origins: Vec<usize> = Vec::new();
        for e in rot.top(cfg.balance_top_origins) {
            let o = p.geo.require_index(ZoneId(e.origin)).stage("diagnose")?;
            if !origins.contains(&o) {
                origins.push(o);
            }
        }
        let rows = share_balance(
            &base.frame,
            &base.shares,
            &origins,
            &cfg.balance_characteristics,
            &BalanceOptions::default(),
        )
        .stage("diagnose")?;
        write_balance_csv(&out.file("balance.csv"), &rows).stage("diagnose")?;
    }

    let rings = distance_ring_design(&base.frame, &p.geo, &cfg.ring_edges).stage("diagnose")?;
    rings.write_csv(&out.file("rings.csv"), &base.frame).stage("diagnose")?;
    match fit_rings(&base.frame, &p.geo, &cfg.ring_edges, &spec) {
        Ok(f) => {
            let mut w =
                CsvOut::create(out.file("ring_estimates.csv"), &["spec_id", "term", "estimate", "se", "stat_type"])
                    .stage("diagnose")?;
            write_fit_rows(&mut w, "rings", &f).stage("diagnose")?;
            out.record(w.finish().stage("diagnose")?);
        }
        Err(e) => out.notes.push(format!("ring regression failed: {e}")),
    }

    let ol = origin_level_transform(
        &base.frame,
        &spec,
        &base.shares,
        &p.flows.stocks,
        &p.geo,
        cfg.rotemberg_variant,
        OriginControls::default(),
    )
    .stage("diagnose")?;
    let h = herfindahl_diagnostics(&ol.dataset).stage("diagnose")?;
    let mut notes = rot.notes.clone();
    notes.extend(ol.notes.iter().cloned());
    let summary = ShiftSummary {
        phi_destination: ol.phi_destination(),
        phi_origin: ol.phi_origin(),
        se_origin: ol.origin.se()[0],
        n_origin_years: ol.dataset.len(),
        effective_cells: h.effective_cells,
        largest_cell: h.largest_cell,
        effective_zones: h.effective_zones,
        largest_zone: h.largest_zone,
        rotemberg_weight_sum: rot.weight_sum(),
        rotemberg_weighted_estimate: rot.weighted_estimate(),
        rotemberg_phi: rot.phi,
        rotemberg_share_negative: rot.share_negative,
        notes,
    };
    out.write_json("shift_share.json", &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct PlaceboSummary {
    n_draws: usize,
    baseline: f64,
    mean: f64,
    sd: f64,
    ci_low: f64,
    ci_high: f64,
    interval_rejects: bool,
    draw_rejection_rate: f64,
    excluded_zones: Vec<u32>,
    notes: Vec<String>,
}

pub fn placebo(cfg: &RunConfig, data: &Data, base: &Baseline, out: &mut Outputs) -> CliResult<()> {
    let spec = cfg.spec(&cfg.outcome)?;
    check_spec(&base.frame, &spec)?;
    let opts = PlaceboOptions { n_draws: cfg.placebo_draws, seed: cfg.seed, ..Default::default() };
    let r = permutation_placebo(&base.frame, &spec, &data.panels.geo, &opts).stage("placebo")?;
    r.write_csv(&out.file("placebo.csv")).stage("placebo")?;
    out.write_json(
        "placebo.json",
        &PlaceboSummary {
            n_draws: r.draws.len(),
            baseline: r.baseline,
            mean: r.mean,
            sd: r.sd,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            interval_rejects: r.interval_rejects,
            draw_rejection_rate: r.draw_rejection_rate,
            excluded_zones: r.excluded_zones.clone(),
            notes: r.notes.clone(),
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct CounterfactualSummary {
    field: String,
    years: Vec<i32>,
    phi_all: f64,
    phi_external: f64,
    xi: f64,
    national_direct_share: f64,
    national_indirect_share: f64,
    guarded_cells: usize,
    notes: Vec<String>,
}

pub fn counterfactual(cfg: &RunConfig, data: &Data, base: &Baseline, out: &mut Outputs) -> CliResult<()> {
    let mut all = cfg.spec(&cfg.outcome)?;
    all.instruments = cfg.counterfactual_instruments.clone();
    let external = RegressionSpec { outcome: cfg.outcome_external.clone(), ..all.clone() };
    check_spec(&base.frame, &all)?;
    check_spec(&base.frame, &external)?;
    let spec = CounterfactualSpec {
        all,
        external,
        field: cfg.tax,
        years: (!cfg.counterfactual_years.is_empty()).then(|| cfg.counterfactual_years.clone()),
    };
    let r = run_counterfactual(&data.panels, base, &cfg.baseline_options(cfg.tax), &spec).stage("counterfactual")?;
    r.write_csv(&out.file("counterfactual.csv"), &base.frame).stage("counterfactual")?;
    r.write_states_csv(&out.file("states.csv")).stage("counterfactual")?;
    out.write_json(
        "counterfactual.json",
        &CounterfactualSummary {
            field: r.field.name().to_string(),
            years: r.years.clone(),
            phi_all: r.phi_all,
            phi_external: r.phi_ext,
            xi: r.xi,
            national_direct_share: r.national_direct_share,
            national_indirect_share: r.national_indirect_share,
            guarded_cells: r.flows.guarded,
            notes: r.notes.clone(),
        },
    )?;
    Ok(())
}

//! Panel data model: policies, flows, outcomes and the log-odds records used
//! by the location-choice regression.
//!
//! Zone-year arrays are stored zone-major (`zone * n_years + year_index`)
//! with zones in the dense order of the [`GeoRegistry`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fe::{CellKeys, Dim};
use crate::geo::{GeoRegistry, StateId, ZoneId};

/// Contiguous run of years shared by zone-year panels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    pub first_year: i32,
    pub n_years: usize,
}

impl Calendar {
    pub fn new(first_year: i32, n_years: usize) -> Self {
        Calendar { first_year, n_years }
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        (0..self.n_years).map(move |t| self.first_year + t as i32)
    }

    pub fn year(&self, t: usize) -> i32 {
        self.first_year + t as i32
    }

    pub fn index(&self, year: i32) -> Option<usize> {
        let t = year - self.first_year;
        (t >= 0 && (t as usize) < self.n_years).then_some(t as usize)
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.n_years as i32 - 1
    }
}

/// Personal income tax measures that can serve as τ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaxField {
    Atr95,
    Atr99,
    Atr50,
    Mtr,
    Aptr,
}

impl TaxField {
    pub const ALL: [TaxField; 5] = [TaxField::Atr95, TaxField::Atr99, TaxField::Atr50, TaxField::Mtr, TaxField::Aptr];

    pub fn name(self) -> &'static str {
        match self {
            TaxField::Atr95 => "atr95",
            TaxField::Atr99 => "atr99",
            TaxField::Atr50 => "atr50",
            TaxField::Mtr => "mtr",
            TaxField::Aptr => "aptr",
        }
    }
}

impl fmt::Display for TaxField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaxField {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaxField::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| Error::InvalidInput(format!("unknown tax field `{s}`")))
    }
}

/// Firm-side policy components entering τ′, in the order CITR, ITC, RTC.
pub const CORPORATE_TERMS: [&str; 3] = ["citr", "itc", "rtc"];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyRow {
    pub atr95: f64,
    pub atr99: f64,
    pub atr50: f64,
    pub mtr: f64,
    pub aptr: f64,
    pub citr: f64,
    pub itc: f64,
    pub rtc: f64,
    pub ts_low: f64,
    pub udda: f64,
    pub uflra: f64,
    pub ufta: f64,
}

impl PolicyRow {
    pub fn tax(&self, field: TaxField) -> f64 {
        match field {
            TaxField::Atr95 => self.atr95,
            TaxField::Atr99 => self.atr99,
            TaxField::Atr50 => self.atr50,
            TaxField::Mtr => self.mtr,
            TaxField::Aptr => self.aptr,
        }
    }

    pub fn set_tax(&mut self, field: TaxField, v: f64) {
        match field {
            TaxField::Atr95 => self.atr95 = v,
            TaxField::Atr99 => self.atr99 = v,
            TaxField::Atr50 => self.atr50 = v,
            TaxField::Mtr => self.mtr = v,
            TaxField::Aptr => self.aptr = v,
        }
    }

    /// ln(1−τ) for the chosen personal tax measure.
    pub fn ln_net_of_tax(&self, field: TaxField) -> f64 {
        (1.0 - self.tax(field)).ln()
    }

    /// Transformed firm policies: ln(1−CITR), ln(1+ITC), ln(1+RTC).
    pub fn corporate_terms(&self) -> [f64; 3] {
        [(1.0 - self.citr).ln(), (1.0 + self.itc).ln(), (1.0 + self.rtc).ln()]
    }

    /// Looks up any policy column by name.
    pub fn value(&self, name: &str) -> Option<f64> {
        Some(match name {
            "atr95" => self.atr95,
            "atr99" => self.atr99,
            "atr50" => self.atr50,
            "mtr" => self.mtr,
            "aptr" => self.aptr,
            "citr" => self.citr,
            "itc" => self.itc,
            "rtc" => self.rtc,
            "ts_low" => self.ts_low,
            "udda" => self.udda,
            "uflra" => self.uflra,
            "ufta" => self.ufta,
            _ => return None,
        })
    }
}

/// State × year policy variables, rectangular over states × years.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPanel {
    pub states: Vec<StateId>,
    pub calendar: Calendar,
    /// State-major: `state * n_years + t`.
    pub rows: Vec<PolicyRow>,
}

impl PolicyPanel {
    pub fn row(&self, state: usize, t: usize) -> &PolicyRow {
        &self.rows[state * self.calendar.n_years + t]
    }

    pub fn row_mut(&mut self, state: usize, t: usize) -> &mut PolicyRow {
        &mut self.rows[state * self.calendar.n_years + t]
    }

    pub fn state_index(&self, s: &StateId) -> Option<usize> {
        self.states.binary_search(s).ok()
    }

    /// Row for a state at a calendar year, if covered.
    pub fn lookup(&self, s: &StateId, year: i32) -> Option<&PolicyRow> {
        let si = self.state_index(s)?;
        let t = self.calendar.index(year)?;
        Some(self.row(si, t))
    }

    /// Per-zone policy rows for every year of `cal`, erroring on gaps.
    pub fn zone_rows(&self, geo: &GeoRegistry, cal: &Calendar) -> Result<Vec<PolicyRow>> {
        let mut out = Vec::with_capacity(geo.len() * cal.n_years);
        for z in 0..geo.len() {
            for year in cal.years() {
                let row = self.lookup(geo.state_of(z), year).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "no policy coverage for state {} in {year} (zone {})",
                        geo.state_of(z),
                        geo.id(z)
                    ))
                })?;
                out.push(*row);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.rows.len() != self.states.len() * self.calendar.n_years {
            problems.push("policy panel is not rectangular over states × years".to_string());
        }
        for (si, s) in self.states.iter().enumerate() {
            for t in 0..self.calendar.n_years {
                let Some(r) = self.rows.get(si * self.calendar.n_years + t) else { continue };
                let year = self.calendar.year(t);
                for f in TaxField::ALL {
                    let v = r.tax(f);
                    if !(0.0..1.0).contains(&v) {
                        problems.push(format!("tax rate out of domain at ({s}, {year}): {}={v}", f.name()));
                    }
                }
                if !(0.0..1.0).contains(&r.citr) {
                    problems.push(format!("tax rate out of domain at ({s}, {year}): citr={}", r.citr));
                }
                for (name, v) in [("itc", r.itc), ("rtc", r.rtc)] {
                    if !(v >= 0.0 && v.is_finite()) {
                        problems.push(format!("credit rate out of domain at ({s}, {year}): {name}={v}"));
                    }
                }
                for (name, v) in [("ts_low", r.ts_low), ("udda", r.udda), ("uflra", r.uflra), ("ufta", r.ufta)] {
                    if v != 0.0 && v != 1.0 {
                        problems.push(format!("non-binary indicator at ({s}, {year}): {name}={v}"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Origin–destination flows, stays and stocks on a common calendar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPanel {
    pub n_zones: usize,
    pub calendar: Calendar,
    /// Indexed `origin * n_years + t`; each list holds (destination, count)
    /// pairs with destination ≠ origin, sorted by destination.
    pub flows: Vec<Vec<(u32, f64)>>,
    /// M_oot, indexed `origin * n_years + t`.
    pub stays: Vec<f64>,
    /// I_ot, indexed `origin * n_years + t`.
    pub stocks: Vec<f64>,
}

impl FlowPanel {
    pub fn empty(n_zones: usize, calendar: Calendar) -> Self {
        let cells = n_zones * calendar.n_years;
        FlowPanel {
            n_zones,
            calendar,
            flows: vec![Vec::new(); cells],
            stays: vec![0.0; cells],
            stocks: vec![0.0; cells],
        }
    }

    pub fn cell(&self, zone: usize, t: usize) -> usize {
        zone * self.calendar.n_years + t
    }

    pub fn stock(&self, o: usize, t: usize) -> f64 {
        self.stocks[self.cell(o, t)]
    }

    pub fn stay(&self, o: usize, t: usize) -> f64 {
        self.stays[self.cell(o, t)]
    }

    /// M_odt for d ≠ o (zero when absent).
    pub fn flow(&self, o: usize, d: usize, t: usize) -> f64 {
        let list = &self.flows[self.cell(o, t)];
        list.binary_search_by_key(&(d as u32), |&(dd, _)| dd).map(|i| list[i].1).unwrap_or(0.0)
    }

    pub fn outflows(&self, o: usize, t: usize) -> &[(u32, f64)] {
        &self.flows[self.cell(o, t)]
    }

    /// Total inflow M_dt = Σ_{o≠d} M_odt, zone-major.
    pub fn inflows(&self) -> Vec<f64> {
        let ny = self.calendar.n_years;
        let mut m = vec![0.0; self.n_zones * ny];
        for o in 0..self.n_zones {
            for t in 0..ny {
                for &(d, c) in self.outflows(o, t) {
                    m[d as usize * ny + t] += c;
                }
            }
        }
        m
    }

    pub fn set_flow(&mut self, o: usize, d: usize, t: usize, count: f64) {
        let cell = self.cell(o, t);
        let list = &mut self.flows[cell];
        match list.binary_search_by_key(&(d as u32), |&(dd, _)| dd) {
            Ok(i) => list[i].1 = count,
            Err(i) => list.insert(i, (d as u32, count)),
        }
    }

    pub fn validate(&self, geo: &GeoRegistry) -> Result<()> {
        let mut problems = Vec::new();
        let ny = self.calendar.n_years;
        let count_ok = |v: f64| v >= 0.0 && v.is_finite() && v.fract() == 0.0;
        for o in 0..self.n_zones {
            for t in 0..ny {
                let year = self.calendar.year(t);
                let zid = geo.id(o);
                let (stay, stock) = (self.stay(o, t), self.stock(o, t));
                if !count_ok(stay) {
                    problems.push(format!("negative count at stays ({zid}, {year}): {stay}"));
                }
                if !count_ok(stock) {
                    problems.push(format!("negative count at stocks ({zid}, {year}): {stock}"));
                }
                let mut out = stay;
                for &(d, c) in self.outflows(o, t) {
                    if !count_ok(c) {
                        problems.push(format!("negative count at flows ({zid}, {}, {year}): {c}", geo.id(d as usize)));
                    }
                    out += c;
                }
                if out > stock + 1e-9 {
                    problems.push(format!("stays plus outflows exceed stock at ({zid}, {year}): {out} > {stock}"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Zone × year outcomes (by scope) and controls. Missing values are NaN.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutcomePanel {
    pub n_zones: usize,
    pub calendar: Option<Calendar>,
    pub outcomes: BTreeMap<String, Vec<f64>>,
    pub controls: BTreeMap<String, Vec<f64>>,
}

impl OutcomePanel {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (scope, v) in &self.outcomes {
            for (i, &x) in v.iter().enumerate() {
                if !x.is_nan() && x < 0.0 {
                    problems.push(format!("negative outcome {scope} at cell {i}: {x}"));
                }
            }
        }
        if let Some(all) = self.outcomes.get("y_all") {
            for part in ["y_external", "y_internal"] {
                if let Some(p) = self.outcomes.get(part) {
                    for (i, (&a, &b)) in all.iter().zip(p).enumerate() {
                        if !a.is_nan() && !b.is_nan() && b > a + 1e-9 {
                            problems.push(format!("{part} exceeds y_all at cell {i}: {b} > {a}"));
                        }
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// One cell of the log-odds regression: ln(M_odt / M_oot) against
/// destination-minus-origin policy transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogOddsRecord {
    pub origin: usize,
    pub dest: usize,
    pub t: usize,
    pub year: i32,
    pub lhs: f64,
    /// ln(1−τ_{σ(d)t}) − ln(1−τ_{σ(o)t}).
    pub d_tax: f64,
    /// Differences of ln(1−CITR), ln(1+ITC), ln(1+RTC).
    pub d_corp: [f64; 3],
    pub weight: Option<f64>,
}

/// Builds one record per (o, d, t) with M_odt > 0 and M_oot > 0.
pub fn build_log_odds(
    flows: &FlowPanel,
    policies: &PolicyPanel,
    geo: &GeoRegistry,
    tax: TaxField,
) -> Result<Vec<LogOddsRecord>> {
    if flows.n_zones != geo.len() {
        return Err(Error::InvalidInput("flow panel and registry disagree on zone count".into()));
    }
    let cal = flows.calendar;
    let rows = policies.zone_rows(geo, &cal)?;
    let ny = cal.n_years;
    let mut out = Vec::new();
    for o in 0..flows.n_zones {
        for t in 0..ny {
            let stay = flows.stay(o, t);
            if stay <= 0.0 {
                continue;
            }
            let po = &rows[o * ny + t];
            let (to, co) = (po.ln_net_of_tax(tax), po.corporate_terms());
            for &(d, m) in flows.outflows(o, t) {
                if m <= 0.0 {
                    continue;
                }
                let d = d as usize;
                let pd = &rows[d * ny + t];
                let cd = pd.corporate_terms();
                out.push(LogOddsRecord {
                    origin: o,
                    dest: d,
                    t,
                    year: cal.year(t),
                    lhs: m.ln() - stay.ln(),
                    d_tax: pd.ln_net_of_tax(tax) - to,
                    d_corp: [cd[0] - co[0], cd[1] - co[1], cd[2] - co[2]],
                    weight: None,
                });
            }
        }
    }
    Ok(out)
}

/// Factor keys for log-odds records (origin, destination, year, states).
pub struct LogOddsKeys<'a> {
    pub records: &'a [LogOddsRecord],
    pub geo: &'a GeoRegistry,
}

impl CellKeys for LogOddsKeys<'_> {
    fn rows(&self) -> usize {
        self.records.len()
    }

    fn key(&self, row: usize, dim: Dim) -> Option<i64> {
        let r = &self.records[row];
        Some(match dim {
            Dim::Origin => self.geo.id(r.origin).0 as i64,
            Dim::Destination => self.geo.id(r.dest).0 as i64,
            Dim::Year => r.year as i64,
            Dim::OriginState => self.geo.state_index(r.origin) as i64,
            Dim::DestinationState => self.geo.state_index(r.dest) as i64,
            Dim::Zone | Dim::State => return None,
        })
    }
}

/// One residence observation of an inventor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidenceRecord {
    pub inventor: String,
    pub year: i32,
    pub zone: ZoneId,
    pub top: bool,
    /// How often the zone was observed for this inventor-year, used to
    /// resolve several zones within one year.
    pub frequency: Option<u32>,
}

/// Tallies flows, stays and stocks from per-inventor residence histories.
///
/// A top-flagged inventor resident in `o` in year `t` counts toward I_ot; if
/// the inventor is observed in `t+1` in zone `d`, the move (or stay when
/// `d == o`) is recorded in period `t`.
pub fn build_flow_tables(records: &[ResidenceRecord], geo: &GeoRegistry) -> Result<FlowPanel> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no residence records".into()));
    }
    // Resolve one zone per inventor-year.
    let mut by_inventor: BTreeMap<&str, BTreeMap<i32, Vec<&ResidenceRecord>>> = BTreeMap::new();
    for r in records {
        by_inventor.entry(r.inventor.as_str()).or_default().entry(r.year).or_default().push(r);
    }
    let (mut lo, mut hi) = (i32::MAX, i32::MIN);
    let mut resolved: Vec<BTreeMap<i32, (usize, bool)>> = Vec::new();
    for (inv, years) in &by_inventor {
        let mut path = BTreeMap::new();
        for (&year, recs) in years {
            let distinct: BTreeSet<ZoneId> = recs.iter().map(|r| r.zone).collect();
            let chosen = if distinct.len() == 1 {
                recs[0]
            } else {
                if recs.iter().any(|r| r.frequency.is_none()) {
                    return Err(Error::validation(format!(
                        "inventor {inv} has several zones in {year} and no frequency data"
                    )));
                }
                // Most frequent; ties go to the first observed record.
                let mut best = recs[0];
                for r in &recs[1..] {
                    if r.frequency > best.frequency {
                        best = r;
                    }
                }
                best
            };
            let top = recs.iter().any(|r| r.top && r.zone == chosen.zone);
            path.insert(year, (geo.require_index(chosen.zone)?, top));
            lo = lo.min(year);
            hi = hi.max(year);
        }
        resolved.push(path);
    }
    let cal = Calendar::new(lo, (hi - lo + 1) as usize);
    let mut panel = FlowPanel::empty(geo.len(), cal);
    for path in &resolved {
        for (&year, &(o, top)) in path {
            if !top {
                continue;
            }
            let t = cal.index(year).expect("year within calendar");
            let cell = panel.cell(o, t);
            panel.stocks[cell] += 1.0;
            if let Some(&(d, _)) = path.get(&(year + 1)) {
                if d == o {
                    panel.stays[cell] += 1.0;
                } else {
                    let prev = panel.flow(o, d, t);
                    panel.set_flow(o, d, t, prev + 1.0);
                }
            }
        }
    }
    Ok(panel)
}

/// Input locations for [`load_panels`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PanelPaths {
    pub zones: String,
    pub policies: String,
    pub flows: String,
    pub stocks: String,
    pub stays: String,
    pub outcomes: Option<String>,
    pub controls: Option<String>,
}

impl PanelPaths {
    /// Conventional file names inside one directory.
    pub fn in_dir(dir: &std::path::Path) -> Self {
        let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
        let opt = |name: &str| {
            let path = dir.join(name);
            path.exists().then(|| path.to_string_lossy().into_owned())
        };
        PanelPaths {
            zones: p("zones.csv"),
            policies: p("policies.csv"),
            flows: p("flows.csv"),
            stocks: p("stocks.csv"),
            stays: p("stays.csv"),
            outcomes: opt("outcomes.csv"),
            controls: opt("controls.csv"),
        }
    }
}

/// Optional renaming from canonical column names to the names used in files.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Schema {
    pub renames: BTreeMap<String, String>,
}

impl Schema {
    fn column<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.renames.get(canonical).map(String::as_str).unwrap_or(canonical)
    }
}

#[derive(Debug, Clone)]
pub struct Panels {
    pub geo: GeoRegistry,
    pub policies: PolicyPanel,
    pub flows: FlowPanel,
    pub outcomes: OutcomePanel,
}

struct Table {
    path: String,
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &str) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let header = rdr.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
        let rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>().map_err(|e| csv_error(path, e))?;
        Ok(Table { path: path.to_string(), header, rows })
    }

    fn col(&self, schema: &Schema, name: &str) -> Result<usize> {
        let actual = schema.column(name);
        self.header
            .iter()
            .position(|h| h == actual)
            .ok_or_else(|| Error::MissingColumn { path: self.path.clone(), column: actual.to_string() })
    }

    fn num(&self, row: usize, col: usize) -> Result<f64> {
        let raw = &self.rows[row][col];
        if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
            return Ok(f64::NAN);
        }
        raw.parse::<f64>().map_err(|_| Error::Csv {
            path: self.path.clone(),
            message: format!("row {}: `{raw}` in column `{}` is not a number", row + 2, self.header[col]),
        })
    }

    fn int(&self, row: usize, col: usize) -> Result<i64> {
        let raw = &self.rows[row][col];
        raw.parse::<i64>().map_err(|_| Error::Csv {
            path: self.path.clone(),
            message: format!("row {}: `{raw}` in column `{}` is not an integer", row + 2, self.header[col]),
        })
    }
}

fn csv_error(path: &str, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io { path: path.to_string(), source: std::io::Error::other(e.to_string()) },
        _ => Error::Csv { path: path.to_string(), message: e.to_string() },
    }
}

fn read_geo(path: &str, schema: &Schema) -> Result<GeoRegistry> {
    let t = Table::read(path)?;
    let (ci, cs, cla, clo) =
        (t.col(schema, "zone_id")?, t.col(schema, "state_id")?, t.col(schema, "lat")?, t.col(schema, "lon")?);
    let mut zones = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        zones.push(crate::geo::Zone {
            id: ZoneId(t.int(r, ci)? as u32),
            state: StateId(t.rows[r][cs].to_string()),
            lat: t.num(r, cla)?,
            lon: t.num(r, clo)?,
        });
    }
    GeoRegistry::new(zones)
}

fn read_policies(path: &str, schema: &Schema) -> Result<PolicyPanel> {
    let t = Table::read(path)?;
    let cs = t.col(schema, "state_id")?;
    let cy = t.col(schema, "year")?;
    const FIELDS: [&str; 12] =
        ["atr95", "atr99", "atr50", "mtr", "aptr", "citr", "itc", "rtc", "ts_low", "udda", "uflra", "ufta"];
    let cols = FIELDS.iter().map(|f| t.col(schema, f)).collect::<Result<Vec<_>>>()?;
    let mut cells: BTreeMap<(String, i64), PolicyRow> = BTreeMap::new();
    let mut problems = Vec::new();
    for r in 0..t.rows.len() {
        let state = t.rows[r][cs].to_string();
        let year = t.int(r, cy)?;
        let v = cols.iter().map(|&c| t.num(r, c)).collect::<Result<Vec<_>>>()?;
        let row = PolicyRow {
            atr95: v[0],
            atr99: v[1],
            atr50: v[2],
            mtr: v[3],
            aptr: v[4],
            citr: v[5],
            itc: v[6],
            rtc: v[7],
            ts_low: v[8],
            udda: v[9],
            uflra: v[10],
            ufta: v[11],
        };
        if cells.insert((state.clone(), year), row).is_some() {
            problems.push(format!("duplicate policy row at ({state}, {year})"));
        }
    }
    let states: Vec<StateId> =
        cells.keys().map(|(s, _)| StateId(s.clone())).collect::<BTreeSet<_>>().into_iter().collect();
    let years: BTreeSet<i64> = cells.keys().map(|&(_, y)| y).collect();
    let (Some(&lo), Some(&hi)) = (years.first(), years.last()) else {
        return Err(Error::validation(format!("{path}: no policy rows")));
    };
    let cal = Calendar::new(lo as i32, (hi - lo + 1) as usize);
    let mut rows = Vec::with_capacity(states.len() * cal.n_years);
    for s in &states {
        for y in cal.years() {
            match cells.get(&(s.0.clone(), y as i64)) {
                Some(r) => rows.push(*r),
                None => {
                    problems.push(format!("non-rectangular policy panel: missing ({s}, {y})"));
                    rows.push(PolicyRow::default());
                }
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let panel = PolicyPanel { states, calendar: cal, rows };
    panel.validate()?;
    Ok(panel)
}

/// Reads and validates all panels.
pub fn load_panels(paths: &PanelPaths, schema: &Schema) -> Result<Panels> {
    let geo = read_geo(&paths.zones, schema)?;
    let policies = read_policies(&paths.policies, schema)?;
    let mut problems = Vec::new();

    let stocks = Table::read(&paths.stocks)?;
    let (sz, sy, sv) = (stocks.col(schema, "zone")?, stocks.col(schema, "year")?, stocks.col(schema, "stock")?);
    let stays = Table::read(&paths.stays)?;
    let (tz, ty, tv) = (stays.col(schema, "zone")?, stays.col(schema, "year")?, stays.col(schema, "count")?);
    let flows = Table::read(&paths.flows)?;
    let (fo, fd, fy, fv) = (
        flows.col(schema, "origin")?,
        flows.col(schema, "dest")?,
        flows.col(schema, "year")?,
        flows.col(schema, "count")?,
    );

    let mut years = BTreeSet::new();
    for r in 0..stocks.rows.len() {
        years.insert(stocks.int(r, sy)?);
    }
    let (Some(&lo), Some(&hi)) = (years.first(), years.last()) else {
        return Err(Error::validation(format!("{}: no stock rows", paths.stocks)));
    };
    let cal = Calendar::new(lo as i32, (hi - lo + 1) as usize);
    let mut panel = FlowPanel::empty(geo.len(), cal);
    let mut seen = vec![false; geo.len() * cal.n_years];

    let zone_of = |t: &Table, r: usize, c: usize| -> Result<usize> {
        let id = ZoneId(t.int(r, c)? as u32);
        geo.index_of(id)
            .ok_or_else(|| Error::validation(format!("{}: row {} references unknown zone {id}", t.path, r + 2)))
    };
    let year_of = |t: &Table, r: usize, c: usize| -> Result<usize> {
        let y = t.int(r, c)?;
        cal.index(y as i32)
            .ok_or_else(|| Error::validation(format!("{}: row {} year {y} outside stock years", t.path, r + 2)))
    };
    let count_of =
        |t: &Table, r: usize, c: usize, what: &str, coords: String, problems: &mut Vec<String>| -> Result<f64> {
            let v = t.num(r, c)?;
            if !(v >= 0.0) {
                problems.push(format!("negative count at {what} {coords}: {v}"));
            } else if v.fract() != 0.0 {
                problems.push(format!("non-integer count at {what} {coords}: {v}"));
            }
            Ok(v)
        };

    for r in 0..stocks.rows.len() {
        let (z, t) = (zone_of(&stocks, r, sz)?, year_of(&stocks, r, sy)?);
        let coords = format!("({}, {})", geo.id(z), cal.year(t));
        let v = count_of(&stocks, r, sv, "stocks", coords, &mut problems)?;
        let cell = panel.cell(z, t);
        panel.stocks[cell] = v;
        seen[cell] = true;
    }
    for r in 0..stays.rows.len() {
        let (z, t) = (zone_of(&stays, r, tz)?, year_of(&stays, r, ty)?);
        let coords = format!("({}, {})", geo.id(z), cal.year(t));
        let v = count_of(&stays, r, tv, "stays", coords, &mut problems)?;
        let cell = panel.cell(z, t);
        panel.stays[cell] = v;
    }
    for r in 0..flows.rows.len() {
        let (o, d, t) = (zone_of(&flows, r, fo)?, zone_of(&flows, r, fd)?, year_of(&flows, r, fy)?);
        let coords = format!("({}, {}, {})", geo.id(o), geo.id(d), cal.year(t));
        let v = count_of(&flows, r, fv, "flows", coords.clone(), &mut problems)?;
        if o == d {
            problems.push(format!("flow row with origin = dest at {coords}; stays belong in stays.csv"));
            continue;
        }
        panel.set_flow(o, d, t, v);
    }
    for z in 0..geo.len() {
        for t in 0..cal.n_years {
            if !seen[panel.cell(z, t)] {
                problems.push(format!("non-rectangular stock panel: missing ({}, {})", geo.id(z), cal.year(t)));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    panel.validate(&geo)?;

    let mut outcomes = OutcomePanel { n_zones: geo.len(), calendar: Some(cal), ..Default::default() };
    let cells = geo.len() * cal.n_years;
    for (path, target, key) in [
        (paths.outcomes.as_deref(), &mut outcomes.outcomes, "scope"),
        (paths.controls.as_deref(), &mut outcomes.controls, "name"),
    ] {
        let Some(path) = path else { continue };
        let t = Table::read(path)?;
        let (cz, cy, ck, cv) =
            (t.col(schema, "zone")?, t.col(schema, "year")?, t.col(schema, key)?, t.col(schema, "value")?);
        let mut filled: HashMap<String, Vec<bool>> = HashMap::new();
        for r in 0..t.rows.len() {
            let (z, ti) = (zone_of(&t, r, cz)?, year_of(&t, r, cy)?);
            let name = t.rows[r][ck].to_string();
            let v = t.num(r, cv)?;
            let col = target.entry(name.clone()).or_insert_with(|| vec![f64::NAN; cells]);
            col[z * cal.n_years + ti] = v;
            filled.entry(name).or_insert_with(|| vec![false; cells])[z * cal.n_years + ti] = true;
        }
        for (name, f) in filled {
            if let Some(i) = f.iter().position(|&x| !x) {
                problems.push(format!(
                    "{path}: `{name}` not rectangular, missing ({}, {}); record missing values explicitly as NA",
                    geo.id(i / cal.n_years),
                    cal.year(i % cal.n_years)
                ));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    outcomes.validate()?;
    Ok(Panels { geo, policies, flows: panel, outcomes })
}

/// Writes panels in the CSV schemas accepted by [`load_panels`].
pub fn write_panels(dir: &std::path::Path, p: &Panels) -> Result<Vec<std::path::PathBuf>> {
    use crate::output::CsvOut;
    let geo = &p.geo;
    let cal = p.flows.calendar;
    let mut written = Vec::new();

    let mut w = CsvOut::create(dir.join("zones.csv"), &["zone_id", "state_id", "lat", "lon"])?;
    for z in geo.zones() {
        w.row(&[z.id.to_string(), z.state.to_string(), z.lat.to_string(), z.lon.to_string()])?;
    }
    written.push(w.finish()?);

    let mut w = CsvOut::create(
        dir.join("policies.csv"),
        &[
            "state_id", "year", "atr95", "atr99", "atr50", "mtr", "aptr", "citr", "itc", "rtc", "ts_low", "udda",
            "uflra", "ufta",
        ],
    )?;
    for (si, s) in p.policies.states.iter().enumerate() {
        for t in 0..p.policies.calendar.n_years {
            let r = p.policies.row(si, t);
            let mut rec = vec![s.to_string(), p.policies.calendar.year(t).to_string()];
            rec.extend(
                [r.atr95, r.atr99, r.atr50, r.mtr, r.aptr, r.citr, r.itc, r.rtc, r.ts_low, r.udda, r.uflra, r.ufta]
                    .iter()
                    .map(f64::to_string),
            );
            w.row(&rec)?;
        }
    }
    written.push(w.finish()?);

    let mut flows = CsvOut::create(dir.join("flows.csv"), &["origin", "dest", "year", "count"])?;
    let mut stocks = CsvOut::create(dir.join("stocks.csv"), &["zone", "year", "stock"])?;
    let mut stays = CsvOut::create(dir.join("stays.csv"), &["zone", "year", "count"])?;
    for o in 0..geo.len() {
        for t in 0..cal.n_years {
            let year = cal.year(t).to_string();
            stocks.row(&[geo.id(o).to_string(), year.clone(), p.flows.stock(o, t).to_string()])?;
            stays.row(&[geo.id(o).to_string(), year.clone(), p.flows.stay(o, t).to_string()])?;
            for &(d, c) in p.flows.outflows(o, t) {
                if c > 0.0 {
                    flows.row(&[geo.id(o).to_string(), geo.id(d as usize).to_string(), year.clone(), c.to_string()])?;
                }
            }
        }
    }
    written.push(flows.finish()?);
    written.push(stocks.finish()?);
    written.push(stays.finish()?);

    for (file, key, data) in
        [("outcomes.csv", "scope", &p.outcomes.outcomes), ("controls.csv", "name", &p.outcomes.controls)]
    {
        if data.is_empty() {
            continue;
        }
        let mut w = CsvOut::create(dir.join(file), &["zone", "year", key, "value"])?;
        for z in 0..geo.len() {
            for t in 0..cal.n_years {
                for (name, v) in data {
                    let x = v[z * cal.n_years + t];
                    let val = if x.is_nan() { "NA".to_string() } else { x.to_string() };
                    w.row(&[geo.id(z).to_string(), cal.year(t).to_string(), name.clone(), val])?;
                }
            }
        }
        written.push(w.finish()?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::Zone;

    fn geo2() -> GeoRegistry {
        GeoRegistry::new(vec![
            Zone { id: ZoneId(1), state: "A".into(), lat: 40.0, lon: -100.0 },
            Zone { id: ZoneId(2), state: "B".into(), lat: 41.0, lon: -100.0 },
        ])
        .unwrap()
    }

    fn policies(ta: f64, tb: f64) -> PolicyPanel {
        let row = |t| PolicyRow { atr95: t, ..Default::default() };
        PolicyPanel {
            states: vec!["A".into(), "B".into()],
            calendar: Calendar::new(2000, 1),
            rows: vec![row(ta), row(tb)],
        }
    }

    #[test]
    fn log_odds_lhs_and_deltas() {
        let geo = geo2();
        let mut flows = FlowPanel::empty(2, Calendar::new(2000, 1));
        flows.set_flow(0, 1, 0, 2.0);
        flows.stays[0] = 8.0;
        flows.stocks[0] = 10.0;
        let recs = build_log_odds(&flows, &policies(0.2, 0.3), &geo, TaxField::Atr95).unwrap();
        assert_eq!(recs.len(), 1);
        assert!((recs[0].lhs - 0.25f64.ln()).abs() < 1e-15);
        assert!((recs[0].d_tax - (0.7f64.ln() - 0.8f64.ln())).abs() < 1e-15);
        let eq = build_log_odds(&flows, &policies(0.25, 0.25), &geo, TaxField::Atr95).unwrap();
        assert_eq!(eq[0].d_tax, 0.0);
        assert_eq!(eq[0].d_corp, [0.0; 3]);
    }

    #[test]
    fn single_migration_and_stay() {
        let geo = geo2();
        let rec = |inv: &str, year, zone| ResidenceRecord {
            inventor: inv.into(),
            year,
            zone: ZoneId(zone),
            top: true,
            frequency: None,
        };
        let p = build_flow_tables(&[rec("a", 2000, 1), rec("a", 2001, 2)], &geo).unwrap();
        assert_eq!(p.flow(0, 1, 0), 1.0);
        assert_eq!(p.stock(0, 0), 1.0);
        let p = build_flow_tables(&[rec("a", 2000, 1), rec("a", 2001, 1)], &geo).unwrap();
        assert_eq!(p.stay(0, 0), 1.0);
    }

    #[test]
    fn ambiguous_year_without_frequency_fails() {
        let geo = geo2();
        let r =
            |zone| ResidenceRecord { inventor: "x".into(), year: 2000, zone: ZoneId(zone), top: true, frequency: None };
        assert!(build_flow_tables(&[r(1), r(2)], &geo).is_err());
    }

    #[test]
    fn tax_of_one_is_rejected() {
        let p = policies(1.0, 0.2);
        let err = p.validate().unwrap_err().to_string();
        assert!(err.contains("tax rate out of domain at (A, 2000)"), "{err}");
    }
}

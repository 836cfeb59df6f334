//! High-dimensional fixed effects.
//!
//! Factors are built from products of cell dimensions (origin, destination,
//! year, states, ...). Absorption uses alternating projections: every sweep
//! subtracts the (weighted) group means of each factor in turn until the
//! largest correction falls below the tolerance. The same sweep schedule is
//! applied to every column of a design, so the demeaning operator is a single
//! linear map shared by all columns.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEMEAN_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 10_000;

/// A cell dimension that factors can be built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dim {
    Origin,
    Destination,
    Year,
    OriginState,
    DestinationState,
    Zone,
    State,
}

impl Dim {
    fn name(self) -> &'static str {
        match self {
            Dim::Origin => "origin",
            Dim::Destination => "dest",
            Dim::Year => "year",
            Dim::OriginState => "origin_state",
            Dim::DestinationState => "dest_state",
            Dim::Zone => "zone",
            Dim::State => "state",
        }
    }
}

impl FromStr for Dim {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "origin" => Dim::Origin,
            "dest" | "destination" => Dim::Destination,
            "year" => Dim::Year,
            "origin_state" => Dim::OriginState,
            "dest_state" | "destination_state" => Dim::DestinationState,
            "zone" => Dim::Zone,
            "state" => Dim::State,
            other => return Err(Error::InvalidInput(format!("unknown factor dimension `{other}`"))),
        })
    }
}

/// A fixed-effect or cluster factor: the product of one or more dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeTerm(pub Vec<Dim>);

impl FeTerm {
    pub fn single(d: Dim) -> Self {
        FeTerm(vec![d])
    }

    pub fn pair() -> Self {
        FeTerm(vec![Dim::Origin, Dim::Destination])
    }

    pub fn contains(&self, d: Dim) -> bool {
        self.0.contains(&d)
    }

    pub fn is_pair(&self) -> bool {
        self.contains(Dim::Origin) && self.contains(Dim::Destination)
    }
}

impl fmt::Display for FeTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.0.iter().map(|d| d.name()).collect();
        f.write_str(&names.join(" x "))
    }
}

impl FromStr for FeTerm {
    type Err = Error;
    /// Accepts `pair`, `state_x_year`-style aliases, or `a x b` products.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "pair" => return Ok(FeTerm::pair()),
            "state_x_year" => return Ok(FeTerm(vec![Dim::State, Dim::Year])),
            "origin_state_x_year" => return Ok(FeTerm(vec![Dim::OriginState, Dim::Year])),
            "dest_state_x_year" => return Ok(FeTerm(vec![Dim::DestinationState, Dim::Year])),
            "state_pair_x_year" => return Ok(FeTerm(vec![Dim::OriginState, Dim::DestinationState, Dim::Year])),
            _ => {}
        }
        let dims = s.split(['x', '*', '#']).map(|p| p.trim().parse()).collect::<Result<Vec<Dim>>>()?;
        if dims.is_empty() {
            return Err(Error::InvalidInput("empty factor term".into()));
        }
        Ok(FeTerm(dims))
    }
}

/// Fixed-effect terms and cluster dimensions for one regression.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeSpec {
    pub terms: Vec<FeTerm>,
    pub clusters: Vec<FeTerm>,
}

impl FeSpec {
    pub fn new(terms: Vec<FeTerm>, clusters: Vec<FeTerm>) -> Result<Self> {
        let spec = FeSpec { terms, clusters };
        spec.validate()?;
        Ok(spec)
    }

    /// Pair effects already absorb origin and destination effects, so the two
    /// are never combined in one specification.
    pub fn validate(&self) -> Result<()> {
        let has_pair = self.terms.iter().any(|t| *t == FeTerm::pair());
        let has_single =
            self.terms.iter().any(|t| *t == FeTerm::single(Dim::Origin) || *t == FeTerm::single(Dim::Destination));
        if has_pair && has_single {
            return Err(Error::InvalidInput(
                "pair fixed effects cannot be combined with origin or destination fixed effects".into(),
            ));
        }
        Ok(())
    }
}

/// Supplies the value of a dimension for a row of some table.
pub trait CellKeys {
    fn rows(&self) -> usize;
    fn key(&self, row: usize, dim: Dim) -> Option<i64>;
}

/// Integer-coded factor over the rows of a design.
#[derive(Debug, Clone)]
pub struct Factor {
    pub term: FeTerm,
    pub codes: Vec<u32>,
    /// Level keys in code order (sorted).
    pub levels: Vec<Vec<i64>>,
}

impl Factor {
    pub fn build(term: &FeTerm, keys: &dyn CellKeys) -> Result<Factor> {
        let n = keys.rows();
        let mut raw = Vec::with_capacity(n);
        for r in 0..n {
            let mut k = Vec::with_capacity(term.0.len());
            for &d in &term.0 {
                k.push(keys.key(r, d).ok_or_else(|| {
                    Error::InvalidInput(format!("dimension `{}` unavailable for factor `{term}`", d.name()))
                })?);
            }
            raw.push(k);
        }
        Ok(Factor::from_keys(term.clone(), raw))
    }

    pub fn from_keys(term: FeTerm, raw: Vec<Vec<i64>>) -> Factor {
        let mut dict: BTreeMap<Vec<i64>, u32> = BTreeMap::new();
        for k in &raw {
            dict.entry(k.clone()).or_insert(0);
        }
        for (i, v) in dict.values_mut().enumerate() {
            *v = i as u32;
        }
        let codes = raw.iter().map(|k| dict[k]).collect();
        let levels = dict.into_keys().collect();
        Factor { term, codes, levels }
    }

    /// Factor from plain integer codes (used for tests and synthetic designs).
    pub fn from_codes(name: &str, codes: &[i64]) -> Factor {
        let _ = name;
        Factor::from_keys(FeTerm(vec![Dim::Zone]), codes.iter().map(|&c| vec![c]).collect())
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn subset(&self, keep: &[bool]) -> Factor {
        let raw =
            self.codes.iter().zip(keep).filter(|(_, &k)| k).map(|(&c, _)| self.levels[c as usize].clone()).collect();
        Factor::from_keys(self.term.clone(), raw)
    }

    pub fn level_index(&self) -> HashMap<Vec<i64>, usize> {
        self.levels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect()
    }
}

/// Marks rows that sit alone in some factor level, iterating until no
/// singletons remain.
pub fn singleton_mask(factors: &[Factor]) -> Vec<bool> {
    let n = factors.first().map(|f| f.codes.len()).unwrap_or(0);
    let mut keep = vec![true; n];
    loop {
        let mut changed = false;
        for f in factors {
            let mut counts = vec![0usize; f.n_levels()];
            for (r, &c) in f.codes.iter().enumerate() {
                if keep[r] {
                    counts[c as usize] += 1;
                }
            }
            for (r, &c) in f.codes.iter().enumerate() {
                if keep[r] && counts[c as usize] == 1 {
                    keep[r] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            return keep;
        }
    }
}

/// Absorbs a set of factors from design columns.
#[derive(Debug, Clone)]
pub struct Absorber {
    factors: Vec<Factor>,
    weights: Option<Vec<f64>>,
    /// Per factor, per level: inverse of the summed weight (or count).
    inv_mass: Vec<Vec<f64>>,
    tol: f64,
    max_sweeps: usize,
}

impl Absorber {
    pub fn new(factors: Vec<Factor>, weights: Option<Vec<f64>>) -> Result<Absorber> {
        let inv_mass = factors
            .iter()
            .map(|f| {
                let mut mass = vec![0.0; f.n_levels()];
                for (r, &c) in f.codes.iter().enumerate() {
                    mass[c as usize] += weights.as_ref().map_or(1.0, |w| w[r]);
                }
                mass.into_iter().map(|m| if m > 0.0 { 1.0 / m } else { 0.0 }).collect()
            })
            .collect();
        if let Some(w) = &weights {
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::InvalidInput("regression weights must be finite and nonnegative".into()));
            }
        }
        Ok(Absorber { factors, weights, inv_mass, tol: DEMEAN_TOL, max_sweeps: MAX_SWEEPS })
    }

    pub fn with_tolerance(mut self, tol: f64, max_sweeps: usize) -> Self {
        self.tol = tol;
        self.max_sweeps = max_sweeps;
        self
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    fn weight(&self, r: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[r])
    }

    /// Subtracts the group means of factor `k` from `col`; returns the largest
    /// absolute correction.
    fn project_out(&self, k: usize, col: &mut [f64], means: &mut [f64]) -> f64 {
        let f = &self.factors[k];
        means.iter_mut().for_each(|m| *m = 0.0);
        for (r, &c) in f.codes.iter().enumerate() {
            means[c as usize] += self.weight(r) * col[r];
        }
        let mut biggest: f64 = 0.0;
        for (m, inv) in means.iter_mut().zip(&self.inv_mass[k]) {
            *m *= inv;
            biggest = biggest.max(m.abs());
        }
        for (r, &c) in f.codes.iter().enumerate() {
            col[r] -= means[c as usize];
        }
        biggest
    }

    /// Demeans every column in place with a shared sweep count. Returns the
    /// number of sweeps used.
    pub fn demean(&self, cols: &mut [Vec<f64>]) -> Result<usize> {
        if self.factors.is_empty() || cols.is_empty() {
            return Ok(0);
        }
        let scales: Vec<f64> = cols.iter().map(|c| c.iter().fold(1.0_f64, |a, &v| a.max(v.abs()))).collect();
        let max_levels = self.factors.iter().map(|f| f.n_levels()).max().unwrap_or(0);
        // One factor: a single projection is exact.
        let single = self.factors.len() == 1;
        for sweep in 1..=self.max_sweeps {
            let worst = cols
                .par_iter_mut()
                .zip(scales.par_iter())
                .map(|(col, &scale)| {
                    let mut buf = vec![0.0; max_levels];
                    let mut change: f64 = 0.0;
                    for k in 0..self.factors.len() {
                        change = change.max(self.project_out(k, col, &mut buf[..self.factors[k].n_levels()]));
                    }
                    change / scale
                })
                .reduce(|| 0.0, f64::max);
            if single || worst <= self.tol {
                return Ok(sweep);
            }
            if sweep == self.max_sweeps {
                return Err(Error::NotConverged { iterations: sweep, max_change: worst });
            }
        }
        unreachable!()
    }

    /// Solves `resid ≈ Σ_k D_k a_k` for the factor effects by Gauss–Seidel.
    /// `resid` is in the original (undemeaned) space. Effects are not yet
    /// normalised.
    pub fn recover_effects(&self, resid: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = resid.len();
        let mut effects: Vec<Vec<f64>> = self.factors.iter().map(|f| vec![0.0; f.n_levels()]).collect();
        if self.factors.is_empty() {
            return Ok(effects);
        }
        let scale = resid.iter().fold(1.0_f64, |a, &v| a.max(v.abs()));
        let mut total = vec![0.0; n];
        for sweep in 1..=self.max_sweeps {
            let mut worst: f64 = 0.0;
            for k in 0..self.factors.len() {
                let f = &self.factors[k];
                let mut acc = vec![0.0; f.n_levels()];
                for r in 0..n {
                    let c = f.codes[r] as usize;
                    let partial = resid[r] - (total[r] - effects[k][c]);
                    acc[c] += self.weight(r) * partial;
                }
                for (c, a) in acc.iter_mut().enumerate() {
                    *a *= self.inv_mass[k][c];
                }
                for r in 0..n {
                    let c = f.codes[r] as usize;
                    total[r] += acc[c] - effects[k][c];
                }
                for (old, new) in effects[k].iter_mut().zip(acc) {
                    worst = worst.max((new - *old).abs());
                    *old = new;
                }
            }
            if self.factors.len() == 1 || worst / scale <= self.tol * 1e-2 {
                return Ok(effects);
            }
            if sweep == self.max_sweeps {
                return Err(Error::NotConverged { iterations: sweep, max_change: worst });
            }
        }
        unreachable!()
    }

    /// Degrees of freedom absorbed by the factors. The first factor counts
    /// all its levels, the second its levels minus the connected components
    /// it forms with the first, further factors their levels minus one.
    pub fn absorbed_dof(&self) -> usize {
        let mut dof = 0usize;
        for (k, f) in self.factors.iter().enumerate() {
            dof += match k {
                0 => f.n_levels(),
                1 => f.n_levels().saturating_sub(components(&self.factors[0], f)),
                _ => f.n_levels().saturating_sub(1),
            };
        }
        dof
    }
}

fn components(a: &Factor, b: &Factor) -> usize {
    let na = a.n_levels();
    let mut parent: Vec<usize> = (0..na + b.n_levels()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (&ca, &cb) in a.codes.iter().zip(&b.codes) {
        let (ra, rb) = (find(&mut parent, ca as usize), find(&mut parent, na + cb as usize));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    let mut roots: Vec<usize> = (0..parent.len()).map(|x| find(&mut parent, x)).collect();
    roots.sort_unstable();
    roots.dedup();
    roots.len()
}

/// Fixed-effect estimates normalised to zero mean within each factor, with
/// the removed means collected in `intercept`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedEffects {
    pub terms: Vec<FeTerm>,
    pub levels: Vec<Vec<Vec<i64>>>,
    pub values: Vec<Vec<f64>>,
    pub intercept: f64,
}

impl FittedEffects {
    pub fn normalise(factors: &[Factor], raw: Vec<Vec<f64>>) -> FittedEffects {
        let mut intercept = 0.0;
        let mut values = raw;
        for v in values.iter_mut() {
            if v.is_empty() {
                continue;
            }
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter_mut().for_each(|x| *x -= mean);
            intercept += mean;
        }
        FittedEffects {
            terms: factors.iter().map(|f| f.term.clone()).collect(),
            levels: factors.iter().map(|f| f.levels.clone()).collect(),
            values,
            intercept,
        }
    }

    pub fn empty() -> FittedEffects {
        FittedEffects { terms: vec![], levels: vec![], values: vec![], intercept: 0.0 }
    }

    /// Lookup tables from level key to value, one per term.
    pub fn lookup(&self) -> Vec<HashMap<Vec<i64>, f64>> {
        self.levels
            .iter()
            .zip(&self.values)
            .map(|(ls, vs)| ls.iter().cloned().zip(vs.iter().copied()).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_terms() {
        assert_eq!("pair".parse::<FeTerm>().unwrap(), FeTerm::pair());
        assert_eq!("dest_state x year".parse::<FeTerm>().unwrap(), FeTerm(vec![Dim::DestinationState, Dim::Year]));
        assert!("nonsense".parse::<FeTerm>().is_err());
    }

    #[test]
    fn pair_and_origin_are_exclusive() {
        let err = FeSpec::new(vec![FeTerm::pair(), FeTerm::single(Dim::Origin)], vec![]).unwrap_err();
        assert!(err.to_string().contains("pair fixed effects"));
        assert!(FeSpec::new(vec![FeTerm::pair(), FeTerm::single(Dim::Year)], vec![]).is_ok());
    }

    #[test]
    fn one_way_demeaning_is_exact() {
        let f = Factor::from_codes("g", &[0, 0, 1, 1, 1]);
        let ab = Absorber::new(vec![f], None).unwrap();
        let mut cols = vec![vec![1.0, 3.0, 2.0, 4.0, 6.0]];
        assert_eq!(ab.demean(&mut cols).unwrap(), 1);
        assert_eq!(cols[0], vec![-1.0, 1.0, -2.0, 0.0, 2.0]);
    }

    #[test]
    fn two_way_recovers_additive_effects() {
        // y = a_i + b_t exactly on an unbalanced panel.
        let ids = [0, 0, 0, 1, 1, 2, 2, 2];
        let ts = [0, 1, 2, 0, 2, 1, 2, 0];
        let a = [1.0, -2.0, 0.5];
        let b = [0.3, 0.0, -1.1];
        let y: Vec<f64> = ids.iter().zip(&ts).map(|(&i, &t)| a[i as usize] + b[t as usize]).collect();
        let ab = Absorber::new(vec![Factor::from_codes("i", &ids), Factor::from_codes("t", &ts)], None).unwrap();
        let mut cols = vec![y.clone()];
        ab.demean(&mut cols).unwrap();
        assert!(cols[0].iter().all(|v| v.abs() < 1e-9));
        let eff = ab.recover_effects(&y).unwrap();
        for r in 0..y.len() {
            let fit = eff[0][ids[r] as usize] + eff[1][ts[r] as usize];
            assert!((fit - y[r]).abs() < 1e-9);
        }
        assert_eq!(ab.absorbed_dof(), 3 + 3 - 1);
    }

    #[test]
    fn singletons_are_dropped_iteratively() {
        // Row 5 is alone in year 3; dropping it leaves group 2 with one row.
        let g = Factor::from_codes("g", &[0, 0, 1, 1, 2, 2]);
        let t = Factor::from_codes("t", &[1, 2, 1, 2, 1, 3]);
        let keep = singleton_mask(&[g, t]);
        assert_eq!(keep, vec![true, true, true, true, false, false]);
    }
}

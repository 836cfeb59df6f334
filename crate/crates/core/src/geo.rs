//! Commuting-zone geography: zone → state mapping, centroids, great-circle
//! distances and the nearest-neighbour map used by the spatial-lag instrument.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EARTH_RADIUS_MILES: f64 = 3958.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ZoneId(pub u32);

impl fmt::Display for ZoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub String);

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StateId {
    fn from(s: &str) -> Self {
        StateId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: ZoneId,
    pub state: StateId,
    pub lat: f64,
    pub lon: f64,
}

/// Haversine distance in miles between two (lat, lon) points given in degrees.
pub fn great_circle_miles(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_MILES * h.sqrt().min(1.0).asin()
}

/// Immutable registry of zones. Zones are stored sorted by id; dense indices
/// (`0..len()`) are used throughout the estimation code.
#[derive(Debug, Clone)]
pub struct GeoRegistry {
    zones: Vec<Zone>,
    index: HashMap<ZoneId, usize>,
    states: Vec<StateId>,
    state_of: Vec<usize>,
    distance: Vec<f64>,
    neighbor: Vec<Option<usize>>,
}

impl GeoRegistry {
    pub fn new(mut zones: Vec<Zone>) -> Result<Self> {
        zones.sort_by_key(|z| z.id);
        let mut problems = Vec::new();
        for w in zones.windows(2) {
            if w[0].id == w[1].id {
                problems.push(format!("duplicate zone_id {}", w[0].id));
            }
        }
        for z in &zones {
            if !(z.lat.is_finite() && z.lon.is_finite()) || z.lat.abs() > 90.0 || z.lon.abs() > 180.0 {
                problems.push(format!("zone {}: centroid ({}, {}) out of range", z.id, z.lat, z.lon));
            }
            if z.state.0.is_empty() {
                problems.push(format!("zone {}: empty state_id", z.id));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let index = zones.iter().enumerate().map(|(i, z)| (z.id, i)).collect();
        let states: Vec<StateId> = zones.iter().map(|z| z.state.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let state_of = zones.iter().map(|z| states.binary_search(&z.state).expect("state collected above")).collect();
        let n = zones.len();
        let mut distance = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = great_circle_miles((zones[i].lat, zones[i].lon), (zones[j].lat, zones[j].lon));
                distance[i * n + j] = d;
                distance[j * n + i] = d;
            }
        }
        // Ties resolve to the smallest zone id because zones are sorted and
        // only a strictly smaller distance replaces the incumbent.
        let neighbor = (0..n)
            .map(|i| {
                let mut best: Option<(usize, f64)> = None;
                for j in (0..n).filter(|&j| j != i) {
                    let d = distance[i * n + j];
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((j, d));
                    }
                }
                best.map(|(j, _)| j)
            })
            .collect();
        Ok(GeoRegistry { zones, index, states, state_of, distance, neighbor })
    }

    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn zone(&self, idx: usize) -> &Zone {
        &self.zones[idx]
    }

    pub fn id(&self, idx: usize) -> ZoneId {
        self.zones[idx].id
    }

    pub fn index_of(&self, id: ZoneId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn require_index(&self, id: ZoneId) -> Result<usize> {
        self.index_of(id).ok_or_else(|| Error::InvalidInput(format!("zone {id} has no state mapping in the registry")))
    }

    /// Sorted list of distinct states.
    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    /// Dense state index of the zone at dense index `idx`.
    pub fn state_index(&self, idx: usize) -> usize {
        self.state_of[idx]
    }

    pub fn state_of(&self, idx: usize) -> &StateId {
        &self.zones[idx].state
    }

    pub fn state_index_of(&self, state: &StateId) -> Option<usize> {
        self.states.binary_search(state).ok()
    }

    /// Dense zone indices belonging to a dense state index.
    pub fn zones_in_state(&self, state_idx: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.state_of[i] == state_idx).collect()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.distance[a * self.len() + b]
    }

    /// Nearest other zone; `None` only for a single-zone registry.
    pub fn neighbor(&self, idx: usize) -> Option<usize> {
        self.neighbor[idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zone(id: u32, state: &str, lat: f64, lon: f64) -> Zone {
        Zone { id: ZoneId(id), state: state.into(), lat, lon }
    }

    #[test]
    fn one_degree_of_latitude() {
        let d = great_circle_miles((40.0, -100.0), (41.0, -100.0));
        assert!((d - 69.09).abs() < 0.05, "{d}");
    }

    #[test]
    fn neighbor_ties_go_to_smallest_id() {
        let geo =
            GeoRegistry::new(vec![zone(30, "B", 0.0, 1.0), zone(10, "A", 0.0, 0.0), zone(20, "A", 0.0, -1.0)]).unwrap();
        let center = geo.index_of(ZoneId(10)).unwrap();
        assert_eq!(geo.id(geo.neighbor(center).unwrap()), ZoneId(20));
        assert_eq!(geo.distance(0, 0), 0.0);
        assert_eq!(geo.distance(0, 2), geo.distance(2, 0));
        assert!(geo.distance(0, 1) > 0.0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = GeoRegistry::new(vec![zone(1, "A", 0.0, 0.0), zone(1, "B", 1.0, 1.0)]).unwrap_err();
        assert!(err.to_string().contains("duplicate zone_id 1"));
    }
}

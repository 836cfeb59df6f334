//! Sandwich covariance estimators: homoskedastic, heteroskedasticity-robust
//! (HC1) and one- or multi-way cluster-robust.
//!
//! Multiway clustering follows the inclusion–exclusion construction: the
//! covariance is the signed sum of one-way cluster covariances over every
//! nonempty subset of cluster dimensions, each subset clustered on the
//! intersection of its dimensions. An indefinite result is repaired by
//! clipping negative eigenvalues at zero.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::clip_to_psd;

/// How coefficient uncertainty is estimated.
#[derive(Debug, Clone, PartialEq)]
pub enum VceMode {
    Homoskedastic,
    /// Eicker–Huber–White with the N/(N−K) correction.
    Robust,
    /// One entry per cluster dimension; each holds a cluster code per row.
    Cluster(Vec<Vec<u32>>),
}

impl VceMode {
    pub fn label(&self) -> String {
        match self {
            VceMode::Homoskedastic => "homoskedastic".into(),
            VceMode::Robust => "robust".into(),
            VceMode::Cluster(d) => format!("cluster({}-way)", d.len()),
        }
    }

    /// Restricts cluster codes to the rows flagged in `keep`.
    pub fn subset(&self, keep: &[bool]) -> VceMode {
        match self {
            VceMode::Cluster(dims) => VceMode::Cluster(
                dims.iter().map(|c| c.iter().zip(keep).filter(|(_, &k)| k).map(|(&v, _)| v).collect()).collect(),
            ),
            other => other.clone(),
        }
    }
}

/// Estimated covariance together with bookkeeping for the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vce {
    pub matrix: DMatrix<f64>,
    pub label: String,
    /// Number of clusters per dimension (empty unless clustered).
    pub n_clusters: Vec<usize>,
    /// True when negative eigenvalues were clipped.
    pub psd_clipped: bool,
}

impl Vce {
    pub fn se(&self) -> Vec<f64> {
        (0..self.matrix.nrows()).map(|i| self.matrix[(i, i)].max(0.0).sqrt()).collect()
    }
}

/// Sum of within-cluster score outer products: Σ_g s_g s_g' with s_g = Σ_{i∈g} scores_i.
pub fn cluster_meat(scores: &DMatrix<f64>, codes: &[u32]) -> (DMatrix<f64>, usize) {
    let k = scores.ncols();
    let n_groups = codes.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut sums = DMatrix::<f64>::zeros(n_groups, k);
    for (i, &g) in codes.iter().enumerate() {
        for j in 0..k {
            sums[(g as usize, j)] += scores[(i, j)];
        }
    }
    let used = {
        let mut seen = vec![false; n_groups];
        codes.iter().for_each(|&c| seen[c as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };
    (sums.transpose() * sums, used)
}

/// Codes for the intersection of several cluster dimensions, densely renumbered.
pub fn intersect_codes(dims: &[&[u32]]) -> Vec<u32> {
    let n = dims.first().map(|d| d.len()).unwrap_or(0);
    let mut dict: HashMap<Vec<u32>, u32> = HashMap::new();
    (0..n)
        .map(|i| {
            let key: Vec<u32> = dims.iter().map(|d| d[i]).collect();
            let next = dict.len() as u32;
            *dict.entry(key).or_insert(next)
        })
        .collect()
}

/// Renumbers arbitrary integer keys to dense cluster codes.
pub fn dense_codes<T: std::hash::Hash + Eq + Clone>(keys: &[T]) -> Vec<u32> {
    let mut dict: HashMap<T, u32> = HashMap::new();
    keys.iter()
        .map(|k| {
            let next = dict.len() as u32;
            *dict.entry(k.clone()).or_insert(next)
        })
        .collect()
}

/// Inputs shared by every sandwich: `bread` is (R̂'R̂)⁻¹, `scores` holds one
/// row per observation (R̂_i u_i), `sigma2` the homoskedastic residual
/// variance, `n` the observation count, `k` the number of slope regressors and
/// `absorbed` the degrees of freedom taken by fixed effects.
pub struct SandwichInputs<'a> {
    pub bread: &'a DMatrix<f64>,
    pub scores: &'a DMatrix<f64>,
    pub sigma2: f64,
    pub n: usize,
    pub k: usize,
    pub absorbed: usize,
}

pub fn compute_vce(mode: &VceMode, inp: &SandwichInputs) -> Result<Vce> {
    let (n, k) = (inp.n as f64, inp.k as f64);
    match mode {
        VceMode::Homoskedastic => {
            Ok(Vce { matrix: inp.bread * inp.sigma2, label: mode.label(), n_clusters: vec![], psd_clipped: false })
        }
        VceMode::Robust => {
            let dof = n - k - inp.absorbed as f64;
            if dof <= 0.0 {
                return Err(Error::Degenerate("no residual degrees of freedom".into()));
            }
            let meat = inp.scores.transpose() * inp.scores;
            Ok(Vce {
                matrix: inp.bread * meat * inp.bread * (n / dof),
                label: mode.label(),
                n_clusters: vec![],
                psd_clipped: false,
            })
        }
        VceMode::Cluster(dims) => {
            if dims.is_empty() {
                return Err(Error::InvalidInput("cluster VCE requested without cluster dimensions".into()));
            }
            let mut n_clusters = Vec::new();
            for d in dims {
                let (_, g) = cluster_meat(&DMatrix::zeros(d.len(), 0), d);
                if g < 2 {
                    return Err(Error::Degenerate("cluster dimension has a single cluster".into()));
                }
                n_clusters.push(g);
            }
            let kk = inp.scores.ncols();
            let mut meat = DMatrix::<f64>::zeros(kk, kk);
            let m = dims.len();
            for mask in 1u32..(1 << m) {
                let members: Vec<&[u32]> =
                    (0..m).filter(|b| mask & (1 << b) != 0).map(|b| dims[b].as_slice()).collect();
                let codes = if members.len() == 1 { members[0].to_vec() } else { intersect_codes(&members) };
                let (part, g) = cluster_meat(inp.scores, &codes);
                let g = g as f64;
                let correction = if g > 1.0 { g / (g - 1.0) * (n - 1.0) / (n - k) } else { 0.0 };
                let sign = if members.len() % 2 == 1 { 1.0 } else { -1.0 };
                meat += part * (sign * correction);
            }
            let raw = inp.bread * meat * inp.bread;
            let (matrix, psd_clipped) = if m > 1 { clip_to_psd(&raw) } else { (raw, false) };
            Ok(Vce { matrix, label: mode.label(), n_clusters, psd_clipped })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs<'a>(scores: &'a DMatrix<f64>, bread: &'a DMatrix<f64>) -> SandwichInputs<'a> {
        SandwichInputs { bread, scores, sigma2: 1.0, n: scores.nrows(), k: scores.ncols(), absorbed: 0 }
    }

    #[test]
    fn identical_dimensions_collapse_to_one_way() {
        let scores = DMatrix::from_fn(10, 2, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * i as f64);
        let bread = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let codes: Vec<u32> = (0..10).map(|i| (i % 3) as u32).collect();
        let one = compute_vce(&VceMode::Cluster(vec![codes.clone()]), &inputs(&scores, &bread)).unwrap();
        let two = compute_vce(&VceMode::Cluster(vec![codes.clone(), codes]), &inputs(&scores, &bread)).unwrap();
        assert!((one.matrix - two.matrix).amax() < 1e-10);
    }

    #[test]
    fn single_cluster_is_degenerate() {
        let scores = DMatrix::from_element(4, 1, 1.0);
        let bread = DMatrix::identity(1, 1);
        let err = compute_vce(&VceMode::Cluster(vec![vec![0; 4]]), &inputs(&scores, &bread)).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn intersection_codes_are_dense() {
        let a = [0, 0, 1, 1];
        let b = [0, 1, 0, 1];
        assert_eq!(intersect_codes(&[&a, &b]), vec![0, 1, 2, 3]);
        assert_eq!(intersect_codes(&[&a, &a]), vec![0, 0, 1, 1]);
    }
}

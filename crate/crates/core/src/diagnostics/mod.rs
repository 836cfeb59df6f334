//! Instrument-validity and robustness diagnostics.

pub mod balance;
pub mod placebo;
pub mod rings;
pub mod rotemberg;
pub mod shift;

use nalgebra::DMatrix;

use crate::error::Result;
use crate::iv::{Design, Prepared};
use crate::linalg::orthonormal_basis;

pub use balance::{share_balance, BalanceOptions, BalanceRow};
pub use placebo::{permutation_placebo, PlaceboOptions, PlaceboReport};
pub use rings::{distance_ring_design, ring_instruments, RingDesign};
pub use rotemberg::{rotemberg_decompose, RotembergLevel, RotembergReport};
pub use shift::{
    herfindahl, herfindahl_diagnostics, origin_level_transform, HerfindahlReport, OriginLevelDataset, OriginLevelResult,
};

/// Within-transforms full-length columns on `prep`'s sample with a single
/// demeaning pass (so the operator is one linear map across all of them),
/// scales by √w and residualises on the controls `prep` retained from
/// `design`.
pub(crate) fn residualise(prep: &Prepared, design: &Design, cols: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let p = prep.exog_names.len();
    let mut all: Vec<Vec<f64>> = Vec::with_capacity(p + cols.len());
    for name in &prep.exog_names {
        let c = design.exogenous.iter().find(|c| &c.name == name).expect("retained control comes from the design");
        all.push(prep.rows.iter().map(|&i| c.values[i]).collect());
    }
    all.extend(cols.iter().map(|c| prep.rows.iter().map(|&i| c[i]).collect::<Vec<f64>>()));
    prep.absorber.demean(&mut all)?;
    if let Some(sw) = &prep.sqrt_w {
        for c in all.iter_mut() {
            c.iter_mut().zip(sw).for_each(|(v, s)| *v *= s);
        }
    }
    let m = prep.rows.len();
    let w = DMatrix::from_fn(m, p, |i, j| all[j][i]);
    let (qw, _) = orthonormal_basis(&w, None);
    Ok(all
        .into_iter()
        .skip(p)
        .map(|c| {
            if qw.ncols() == 0 {
                return c;
            }
            let v = nalgebra::DVector::from_vec(c);
            let r = &v - &qw * (qw.transpose() * &v);
            r.iter().copied().collect()
        })
        .collect())
}

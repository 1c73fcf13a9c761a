//! Robust voltage compliance of a probing candidate over a load box.
//!
//! The load box `{s_O : −s_O ≤ −s̲, s_O ≤ s̄}` must sit inside the polytope
//! `{s_O : −L s_O ≤ K s + (u0 − u̲)·1, L s_O ≤ −K s − (u0 − ū)·1}`. By the
//! affine Farkas lemma this holds iff some `E ≥ 0` satisfies
//! `E·[−I; I] = [−L; L]` and `E·[−s̲; s̄] ≤ d`. The rows of `E` do not
//! interact, so the system is solved one row at a time.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::library::CandidateLibrary;
use super::lp::{phase_one, Feasibility};
use crate::error::{Error, Result};
use crate::ldf::LdfModel;

/// Box of non-metered injections `s̲_O ≤ s_O ≤ s̄_O`, stacked `[p; q]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadUncertainty {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl LoadUncertainty {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension { expected: lower.len(), got: upper.len() });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidInput("load box lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    /// `(1 ∓ 1/γ)·s_O`, ordered element-wise so negative injections work.
    pub fn from_gamma(nominal: &DVector<f64>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
        }
        let a = nominal * (1.0 - 1.0 / gamma);
        let b = nominal * (1.0 + 1.0 / gamma);
        Self::new(a.zip_map(&b, f64::min), a.zip_map(&b, f64::max))
    }

    pub fn point(nominal: &DVector<f64>) -> Self {
        Self { lower: nominal.clone(), upper: nominal.clone() }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn contains(&self, s: &DVector<f64>, tol: f64) -> bool {
        s.len() == self.dim()
            && (0..s.len()).all(|i| s[i] >= self.lower[i] - tol && s[i] <= self.upper[i] + tol)
    }
}

/// Voltage regulation band `u̲ ≤ u_n ≤ ū` (pu).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageBand {
    pub lower: f64,
    pub upper: f64,
}

impl VoltageBand {
    pub fn new(lower: f64, upper: f64, base_voltage: f64) -> Result<Self> {
        if !(lower < base_voltage && base_voltage < upper) {
            return Err(Error::InvalidInput(format!(
                "voltage band [{lower}, {upper}] must strictly contain u0 = {base_voltage}"
            )));
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric band `u0·(1 ± fraction)`.
    pub fn symmetric(base_voltage: f64, fraction: f64) -> Result<Self> {
        Self::new(base_voltage * (1.0 - fraction), base_voltage * (1.0 + fraction), base_voltage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Compliance {
    Compliant,
    Violating,
    SolverFailure,
}

/// Solve the Farkas feasibility system for one candidate.
pub fn check_compliance(
    candidate: &DVector<f64>,
    ldf: &LdfModel,
    uncertainty: &LoadUncertainty,
    band: VoltageBand,
) -> Result<Compliance> {
    if candidate.len() != ldf.dim_m() {
        return Err(Error::Dimension { expected: ldf.dim_m(), got: candidate.len() });
    }
    let d_o = ldf.dim_o();
    if uncertainty.dim() != d_o {
        return Err(Error::Dimension { expected: d_o, got: uncertainty.dim() });
    }
    let n = ldf.n();
    let u0 = ldf.base_voltage();
    let ks = &ldf.k * candidate;

    // Box polytope A s ≤ b with A = [−I; I], b = [−s̲; s̄].
    let mut a = DMatrix::zeros(2 * d_o, d_o);
    let mut b = DVector::zeros(2 * d_o);
    for j in 0..d_o {
        a[(j, j)] = -1.0;
        a[(d_o + j, j)] = 1.0;
        b[j] = -uncertainty.lower[j];
        b[d_o + j] = uncertainty.upper[j];
    }
    // Row i of E: e ≥ 0, Aᵀ e = C_iᵀ, bᵀ e ≤ d_i.
    let a_eq = a.transpose();
    let a_ub = DMatrix::from_row_slice(1, 2 * d_o, b.as_slice());
    for i in 0..2 * n {
        let (c_row, d_i) = if i < n {
            (-ldf.l.row(i), ks[i] + (u0 - band.lower))
        } else {
            (ldf.l.row(i - n).into_owned(), -ks[i - n] - (u0 - band.upper))
        };
        let b_eq = c_row.transpose();
        match phase_one(&a_eq, &b_eq, &a_ub, &DVector::from_element(1, d_i)) {
            Feasibility::Feasible { .. } => {}
            Feasibility::Infeasible { .. } => return Ok(Compliance::Violating),
            Feasibility::Failed(msg) => {
                warn!("compliance LP failed on row {i}: {msg}");
                return Ok(Compliance::SolverFailure);
            }
        }
    }
    Ok(Compliance::Compliant)
}

/// `true` iff the candidate keeps every voltage in band for every load in
/// the box. Solver failures count as non-compliant.
pub fn is_network_compliant(
    candidate: &DVector<f64>,
    ldf: &LdfModel,
    uncertainty: &LoadUncertainty,
    band: VoltageBand,
) -> Result<bool> {
    Ok(check_compliance(candidate, ldf, uncertainty, band)? == Compliance::Compliant)
}

#[derive(Debug, Clone)]
pub struct Reduction {
    pub library: CandidateLibrary,
    /// Indices kept, relative to the input library.
    pub kept: Vec<usize>,
    pub violation_pct: f64,
    pub solver_failures: usize,
}

/// Compliance verdict for each candidate, in library order.
pub fn compliance_flags(
    library: &CandidateLibrary,
    ldf: &LdfModel,
    uncertainty: &LoadUncertainty,
    band: VoltageBand,
) -> Result<Vec<Compliance>> {
    library
        .candidates()
        .par_iter()
        .map(|c| check_compliance(c, ldf, uncertainty, band))
        .collect()
}

/// Keep exactly the compliant candidates; fails if fewer than `horizon` remain.
pub fn reduce_library(
    library: &CandidateLibrary,
    ldf: &LdfModel,
    uncertainty: &LoadUncertainty,
    band: VoltageBand,
    horizon: usize,
) -> Result<Reduction> {
    let flags = compliance_flags(library, ldf, uncertainty, band)?;
    let kept: Vec<usize> = (0..flags.len()).filter(|&i| flags[i] == Compliance::Compliant).collect();
    let solver_failures = flags.iter().filter(|&&f| f == Compliance::SolverFailure).count();
    let violation_pct = if library.is_empty() {
        0.0
    } else {
        100.0 * (library.len() - kept.len()) as f64 / library.len() as f64
    };
    if kept.len() < horizon {
        return Err(Error::LibraryTooSmall { kept: kept.len(), needed: horizon });
    }
    let reduced = library
        .clone()
        .with_compliance(flags.iter().map(|&f| f == Compliance::Compliant).collect())
        .subset(&kept);
    Ok(Reduction { library: reduced, kept, violation_pct, solver_failures })
}

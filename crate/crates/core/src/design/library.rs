use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feeder::{Device, InverterFleet};
use crate::rng::{stream, task_rng};

/// Candidate probing injections `s_M = [p_M; q_M]` (net, per probing bus).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateLibrary {
    candidates: Vec<DVector<f64>>,
    /// Index of each candidate in the originally sampled library.
    origin: Vec<usize>,
    compliant: Option<Vec<bool>>,
}

impl CandidateLibrary {
    pub fn from_candidates(candidates: Vec<DVector<f64>>) -> Self {
        let origin = (0..candidates.len()).collect();
        Self { candidates, origin, compliant: None }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidates(&self) -> &[DVector<f64>] {
        &self.candidates
    }

    pub fn get(&self, i: usize) -> &DVector<f64> {
        &self.candidates[i]
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn compliance(&self) -> Option<&[bool]> {
        self.compliant.as_deref()
    }

    pub(crate) fn with_compliance(mut self, flags: Vec<bool>) -> Self {
        self.compliant = Some(flags);
        self
    }

    /// Sub-library holding `indices`, preserving provenance.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            candidates: indices.iter().map(|&i| self.candidates[i].clone()).collect(),
            origin: indices.iter().map(|&i| self.origin[i]).collect(),
            compliant: self.compliant.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Draw one implementable `(p, q)` for a device: `p` uniform over the class
/// interval, then `q` uniform over what the apparent-power limit leaves.
pub fn sample_device<R: Rng + ?Sized>(device: &Device, rng: &mut R) -> (f64, f64) {
    let (lo, hi) = device.p_range();
    let p = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let s = device.capacity();
    let q_max = (s * s - p * p).max(0.0).sqrt();
    let q = if q_max > 0.0 { rng.gen_range(-q_max..=q_max) } else { 0.0 };
    (p, q)
}

/// Sample `k` candidates; candidate `i` draws from its own derived stream so
/// the library is identical however it is scheduled.
pub fn sample_library(fleet: &InverterFleet, k: usize, seed: u64) -> Result<CandidateLibrary> {
    if k == 0 {
        return Err(Error::InvalidInput("library size K must be at least 1".into()));
    }
    let m = fleet.m();
    let candidates = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut rng = task_rng(seed, stream::LIBRARY, i as u64);
            let mut s = DVector::zeros(2 * m);
            for bus in 0..m {
                let (mut p, mut q) = fleet.fixed_injection(bus);
                for dev in fleet.devices(bus) {
                    let (dp, dq) = sample_device(dev, &mut rng);
                    p += dp;
                    q += dq;
                }
                s[bus] = p;
                s[m + bus] = q;
            }
            s
        })
        .collect();
    Ok(CandidateLibrary::from_candidates(candidates))
}

/// Re-check that a candidate is reachable by the fleet: each bus's net
/// injection minus its fixed part must be a sum of admissible device outputs.
/// Exact for single-device buses; for several devices it checks the
/// aggregated interval and disc bounds.
pub fn is_implementable(fleet: &InverterFleet, s: &DVector<f64>, tol: f64) -> bool {
    let m = fleet.m();
    if s.len() != 2 * m {
        return false;
    }
    (0..m).all(|bus| {
        let (fp, fq) = fleet.fixed_injection(bus);
        let (p, q) = (s[bus] - fp, s[m + bus] - fq);
        let devs = fleet.devices(bus);
        match devs {
            [] => p.abs() <= tol && q.abs() <= tol,
            [d] => d.admits(p, q, tol),
            _ => {
                let (lo, hi) = devs
                    .iter()
                    .fold((0.0, 0.0), |(a, b), d| (a + d.p_range().0, b + d.p_range().1));
                let cap: f64 = devs.iter().map(|d| d.capacity()).sum();
                p >= lo - tol && p <= hi + tol && p * p + q * q <= cap * cap + tol
            }
        }
    })
}

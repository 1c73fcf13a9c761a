//! Linearized distribution flow: first-order map from injections to voltage
//! magnitude and angle deviations.
//!
//! The model is obtained by inverting the polar power-flow Jacobian at a
//! linearization point (flat profile by default), so it is exactly the
//! tangent of [`crate::acpf::injections`]'s inverse there.

use nalgebra::{DMatrix, DVector};

use crate::acpf::{injection_jacobian, BusState};
use crate::error::{Error, Result};
use crate::feeder::{FeederModel, ProbingSetup};

/// `[u − u0·1; θ] = [K L; Mθ Nθ]·[s_M; s_O]`, with `s = [p; q]` per block.
#[derive(Debug, Clone)]
pub struct LdfModel {
    pub k: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub m_theta: DMatrix<f64>,
    pub n_theta: DMatrix<f64>,
    probing: Vec<usize>,
    non_metered: Vec<usize>,
    reference: BusState,
    base_voltage: f64,
}

pub fn build_ldf(feeder: &FeederModel, setup: &ProbingSetup) -> Result<LdfModel> {
    build_ldf_at(feeder, setup, &BusState::flat(feeder))
}

/// Linearize about an arbitrary reference state. The offsets are still
/// measured from the flat profile, so only the sensitivities change.
pub fn build_ldf_at(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    reference: &BusState,
) -> Result<LdfModel> {
    let n = feeder.n();
    let jac = injection_jacobian(feeder, reference);
    let sens = jac
        .try_inverse()
        .ok_or_else(|| Error::Singular("power-flow Jacobian at the linearization point".into()))?;

    // Column index in `sens` of p (or q) at a bus position.
    let cols = |buses: &[usize]| -> Vec<usize> {
        buses.iter().copied().chain(buses.iter().map(|b| n + b)).collect()
    };
    let pick = |rows: std::ops::Range<usize>, cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| sens[(rows.start + i, cols[j])])
    };
    let cm = cols(setup.probing());
    let co = cols(setup.non_metered());
    Ok(LdfModel {
        k: pick(0..n, &cm),
        l: pick(0..n, &co),
        m_theta: pick(n..2 * n, &cm),
        n_theta: pick(n..2 * n, &co),
        probing: setup.probing().to_vec(),
        non_metered: setup.non_metered().to_vec(),
        reference: reference.clone(),
        base_voltage: feeder.base_voltage(),
    })
}

impl LdfModel {
    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    pub fn dim_m(&self) -> usize {
        self.k.ncols()
    }

    pub fn dim_o(&self) -> usize {
        self.l.ncols()
    }

    pub fn base_voltage(&self) -> f64 {
        self.base_voltage
    }

    pub fn probing(&self) -> &[usize] {
        &self.probing
    }

    pub fn non_metered(&self) -> &[usize] {
        &self.non_metered
    }

    pub fn reference(&self) -> &BusState {
        &self.reference
    }

    /// `[K; Mθ]`, the map from probing injections to the approximate state.
    pub fn probing_map(&self) -> DMatrix<f64> {
        let (n, c) = (self.n(), self.dim_m());
        let mut out = DMatrix::zeros(2 * n, c);
        out.view_mut((0, 0), (n, c)).copy_from(&self.k);
        out.view_mut((n, 0), (n, c)).copy_from(&self.m_theta);
        out
    }

    /// Approximate state deviation `y = [u − u0·1; θ]`.
    pub fn approx_state(&self, s_m: &DVector<f64>, s_o: &DVector<f64>) -> Result<DVector<f64>> {
        if s_m.len() != self.dim_m() {
            return Err(Error::Dimension { expected: self.dim_m(), got: s_m.len() });
        }
        if s_o.len() != self.dim_o() {
            return Err(Error::Dimension { expected: self.dim_o(), got: s_o.len() });
        }
        let n = self.n();
        let mut y = DVector::zeros(2 * n);
        y.rows_mut(0, n).copy_from(&(&self.k * s_m + &self.l * s_o));
        y.rows_mut(n, n).copy_from(&(&self.m_theta * s_m + &self.n_theta * s_o));
        Ok(y)
    }

    /// Approximate voltage magnitudes `u0·1 + K s_M + L s_O`.
    pub fn approx_magnitudes(&self, s_m: &DVector<f64>, s_o: &DVector<f64>) -> Result<DVector<f64>> {
        let y = self.approx_state(s_m, s_o)?;
        Ok(y.rows(0, self.n()).add_scalar(self.base_voltage))
    }

    /// Approximate state as a [`BusState`].
    pub fn approx_bus_state(&self, s_m: &DVector<f64>, s_o: &DVector<f64>) -> Result<BusState> {
        let y = self.approx_state(s_m, s_o)?;
        let n = self.n();
        Ok(BusState {
            u: y.rows(0, n).add_scalar(self.base_voltage),
            theta: y.rows(n, n).into_owned(),
        })
    }
}

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::solve::EstimationResult;
use crate::acpf::StateSequence;
use crate::error::{Error, Result};

/// Loads below this magnitude (pu) are scored by absolute error only.
pub const DEGENERATE_LOAD: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorMetrics {
    /// `sqrt(Σ_t ‖v_t − v̂_t‖² / (N·T))` over rectangular phasors.
    pub state_rmse: f64,
    /// `100·(p̂ − p)/p` per non-metered bus; `None` where `|p|` is degenerate.
    pub p_pct: Vec<Option<f64>>,
    pub q_pct: Vec<Option<f64>>,
    pub p_abs: Vec<f64>,
    pub q_abs: Vec<f64>,
}

impl ErrorMetrics {
    pub fn p_pct_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.p_pct.iter().flatten().copied()
    }
}

pub fn state_rmse(truth: &StateSequence, estimate: &StateSequence) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::Dimension { expected: truth.len(), got: estimate.len() });
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (a, b) in truth.slots().iter().zip(estimate.slots()) {
        if a.n() != b.n() {
            return Err(Error::Dimension { expected: a.n(), got: b.n() });
        }
        let (ar, ai) = a.rectangular();
        let (br, bi) = b.rectangular();
        acc += (ar - br).norm_squared() + (ai - bi).norm_squared();
        count += a.n();
    }
    Ok(if count == 0 { 0.0 } else { (acc / count as f64).sqrt() })
}

/// Score an estimate against true states and reference non-metered loads
/// `[p_O; q_O]`.
pub fn error_metrics(
    truth: &StateSequence,
    true_loads: &DVector<f64>,
    estimate: &EstimationResult,
    estimated_loads: &DVector<f64>,
) -> Result<ErrorMetrics> {
    if true_loads.len() != estimated_loads.len() || true_loads.len() % 2 != 0 {
        return Err(Error::Dimension { expected: true_loads.len(), got: estimated_loads.len() });
    }
    let o = true_loads.len() / 2;
    let pct = |est: f64, tru: f64| (tru.abs() >= DEGENERATE_LOAD).then(|| 100.0 * (est - tru) / tru);
    Ok(ErrorMetrics {
        state_rmse: state_rmse(truth, &estimate.states)?,
        p_pct: (0..o).map(|i| pct(estimated_loads[i], true_loads[i])).collect(),
        q_pct: (0..o).map(|i| pct(estimated_loads[o + i], true_loads[o + i])).collect(),
        p_abs: (0..o).map(|i| (estimated_loads[i] - true_loads[i]).abs()).collect(),
        q_abs: (0..o).map(|i| (estimated_loads[o + i] - true_loads[o + i]).abs()).collect(),
    })
}

//! Recovery of probing states and non-metered loads from probing data.

pub mod measurements;
pub mod metrics;
pub mod solve;

pub use measurements::{
    exact_measurements, flat_sequence, perturb_loads, simulate_measurements, simulate_probing,
    Channels, MeasurementSet, SimulatedProbing, Snr,
};
pub use metrics::{error_metrics, state_rmse, ErrorMetrics};
pub use solve::{
    estimate_noisy, estimate_noisy_with, ldf_warm_start, penalized_objective, pf_warm_start, recover_loads,
    solve_noiseless, Diagnostics, EstimationResult, LmOptions, Penalty, PenaltyConfig,
    RecoveredLoads,
};

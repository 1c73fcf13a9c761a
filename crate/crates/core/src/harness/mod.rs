//! Scenario files, experiment recipes and their reports.

pub mod experiments;
pub mod profile;
pub mod report;
pub mod scenario;

pub use experiments::{
    design_probes, draw_base_loads, probe_states, random_states, run_condition_study, run_p2l_montecarlo, run_trial,
    run_violation_sweep, setpoint_condition, trial_seed, TrialOutcome,
};
pub use profile::LoadProfile;
pub use report::{median, percentile, Cell, ExperimentReport, Summary, Table};
pub use scenario::{bundled_feeder, LoadSource, Placement, Scenario, ScenarioConfig, SnrPair, BUNDLED_FEEDER, BUNDLED_FEEDER_NAME};

//! Experiment recipes: condition-number study, violation sweep and the
//! probing Monte Carlo.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde_json::json;

use super::report::{Cell, ExperimentReport, Table};
use super::scenario::Scenario;
use crate::acpf::{assemble_p2l_jacobian, solve_pf, BusState, Injections, StateSequence};
use crate::design::{compliance_flags, design_pipeline, sample_library, Compliance, ProbingDesign};
use crate::error::{Error, Result};
use crate::estimator::{
    error_metrics, estimate_noisy, ldf_warm_start, recover_loads, simulate_probing, solve_noiseless,
    ErrorMetrics, EstimationResult, RecoveredLoads, SimulatedProbing,
};
use crate::feeder::{DataMode, FeederModel, ProbingSetup};
use crate::ldf::build_ldf;
use crate::rng::{derive_seed, stream, task_rng};

pub const MAGNITUDE_RANGE: (f64, f64) = (0.9, 1.1);
pub const ANGLE_RANGE_DEG: f64 = 1.5;

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, stream::TRIAL, trial as u64)
}

/// Uniformly random states over the study ranges.
pub fn random_states<R: Rng>(feeder: &FeederModel, horizon: usize, rng: &mut R) -> StateSequence {
    let n = feeder.n();
    let a = ANGLE_RANGE_DEG.to_radians();
    StateSequence(
        (0..horizon)
            .map(|_| BusState {
                u: DVector::from_fn(n, |_, _| rng.gen_range(MAGNITUDE_RANGE.0..=MAGNITUDE_RANGE.1)),
                theta: DVector::from_fn(n, |_, _| rng.gen_range(-a..=a)),
            })
            .collect(),
    )
}

pub fn design_probes(sc: &Scenario, seed: u64) -> Result<ProbingDesign> {
    design_pipeline(&sc.feeder, &sc.setup, &sc.fleet, &sc.uncertainty, sc.band, &sc.config.design_options(seed))
}

/// Power-flow states reached by the given probing setpoints with the
/// non-metered buses at their nominal loads.
pub fn probe_states(sc: &Scenario, setpoints: &[DVector<f64>]) -> Result<StateSequence> {
    let (m, o) = (sc.setup.m(), sc.setup.o());
    let loads = sc.nominal_loads();
    let mut out = Vec::with_capacity(setpoints.len());
    for s in setpoints {
        if s.len() != 2 * m {
            return Err(Error::Dimension { expected: 2 * m, got: s.len() });
        }
        let mut inj = Injections::zeros(sc.feeder.n());
        for (i, &b) in sc.setup.probing().iter().enumerate() {
            inj.p[b] = s[i];
            inj.q[b] = s[m + i];
        }
        for (i, &b) in sc.setup.non_metered().iter().enumerate() {
            inj.p[b] = loads[i];
            inj.q[b] = loads[o + i];
        }
        out.push(solve_pf(&sc.feeder, &inj)?.state);
    }
    Ok(StateSequence(out))
}

/// Condition number of the P2L Jacobian at the states induced by `setpoints`.
pub fn setpoint_condition(sc: &Scenario, setup: &ProbingSetup, setpoints: &[DVector<f64>]) -> Result<f64> {
    let states = probe_states(sc, setpoints)?;
    Ok(assemble_p2l_jacobian(&sc.feeder, setup, &states)?.condition_number())
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub seed: u64,
    pub design: ProbingDesign,
    /// Actual `[p_O; q_O]` before per-slot fluctuation.
    pub base_loads: DVector<f64>,
    pub truth: SimulatedProbing,
    pub estimate: EstimationResult,
    pub loads: RecoveredLoads,
    pub metrics: ErrorMetrics,
    /// P2L Jacobian condition number at the true states.
    pub condition: f64,
}

/// Actual non-metered loads of one trial, uniform over the uncertainty box.
pub fn draw_base_loads(sc: &Scenario, seed: u64) -> DVector<f64> {
    let mut rng = task_rng(seed, stream::BASE_LOADS, 0);
    let b = &sc.uncertainty;
    DVector::from_fn(b.dim(), |i, _| {
        if b.upper[i] > b.lower[i] {
            rng.gen_range(b.lower[i]..=b.upper[i])
        } else {
            b.lower[i]
        }
    })
}

/// Design, simulate, estimate and score one probing experiment. The
/// estimator only knows the load box; the actual loads are drawn inside it.
pub fn run_trial(sc: &Scenario, seed: u64) -> Result<TrialOutcome> {
    let design = design_probes(sc, seed)?;
    let base = draw_base_loads(sc, seed);
    let snr = sc.config.snr;
    let truth =
        simulate_probing(&sc.feeder, &sc.setup, &design.setpoints, &base, snr.metered, snr.loads, seed)?;
    let box_mid = sc.uncertainty.midpoint();
    let estimate = if snr.metered.is_exact() && snr.loads.is_exact() {
        let init = ldf_warm_start(&sc.feeder, &sc.setup, &truth.measurements, Some(&box_mid))?;
        solve_noiseless(&sc.feeder, &sc.setup, &truth.measurements, &init)?
    } else {
        estimate_noisy(&sc.feeder, &sc.setup, &truth.measurements, &sc.penalty_config(), None)?
    };
    let loads = recover_loads(&estimate, &sc.setup, Some(&sc.uncertainty));
    let metrics = error_metrics(&truth.states, &base, &estimate, &loads.average)?;
    let condition = assemble_p2l_jacobian(&sc.feeder, &sc.setup, &truth.states)?.condition_number();
    Ok(TrialOutcome { seed, design, base_loads: base, truth, estimate, loads, metrics, condition })
}

fn abs_median(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.map(f64::abs).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        super::report::median(&v)
    }
}

fn config_json(sc: &Scenario) -> serde_json::Value {
    json!({
        "config": sc.config,
        "non_metered": sc.non_metered_ids(),
        "probing_buses": sc.setup.m(),
        "buses": sc.feeder.n(),
    })
}

/// Condition numbers of the P2L Jacobian at random state sequences, for
/// both data modes.
pub fn run_condition_study(sc: &Scenario, trials: usize) -> Result<ExperimentReport> {
    if trials == 0 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    let master = sc.config.seed;
    let phasor = sc.setup.with_mode(DataMode::Phasor);
    let nonphasor = sc.setup.with_mode(DataMode::Nonphasor);
    let rows: Vec<(f64, f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let clock = Instant::now();
            let mut rng = task_rng(master, stream::STATES, k as u64);
            let states = random_states(&sc.feeder, sc.setup.horizon(), &mut rng);
            let a = assemble_p2l_jacobian(&sc.feeder, &phasor, &states)?.condition_number();
            let b = assemble_p2l_jacobian(&sc.feeder, &nonphasor, &states)?.condition_number();
            Ok((a, b, clock.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;

    let mut records = Table::new(
        "report",
        &["trial", "seed", "horizon", "cond_phasor", "cond_nonphasor", "log10_cond_phasor", "log10_cond_nonphasor"],
    );
    for (k, &(a, b, _)) in rows.iter().enumerate() {
        records.push(vec![
            k.into(),
            derive_seed(master, stream::STATES, k as u64).into(),
            sc.setup.horizon().into(),
            a.into(),
            b.into(),
            a.log10().into(),
            b.log10().into(),
        ]);
    }
    let mut hist = Table::new("histogram", &["mode", "log10_lower", "log10_upper", "count"]);
    for (mode, col) in [("phasor", 5), ("nonphasor", 6)] {
        let logs: Vec<f64> = records.rows.iter().filter_map(|r| r[col].as_f64()).collect();
        let finite: Vec<f64> = logs.iter().copied().filter(|v| v.is_finite()).collect();
        if !finite.is_empty() {
            let lo = finite.iter().copied().fold(f64::INFINITY, f64::min).floor() as i64;
            let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max).floor() as i64;
            for bin in lo..=hi {
                let count = finite.iter().filter(|&&v| v.floor() as i64 == bin).count();
                hist.push(vec![mode.into(), Cell::Int(bin), Cell::Int(bin + 1), count.into()]);
            }
        }
        let infinite = logs.len() - finite.len();
        hist.push(vec![mode.into(), Cell::Float(f64::INFINITY), Cell::Float(f64::INFINITY), infinite.into()]);
    }
    let mut report = ExperimentReport::new(
        "condition_study",
        "P2L Jacobian condition-number histograms over random state sequences, phasor versus non-phasor data",
        records,
    );
    report.tables.push(hist);
    report.add_summary("cond_phasor", "report", "cond_phasor");
    report.add_summary("cond_nonphasor", "report", "cond_nonphasor");
    report.runtimes = rows.iter().map(|r| r.2).collect();
    report.meta = json!({
        "scenario": config_json(sc),
        "trials": trials,
        "master_seed": master,
        "magnitude_range": [MAGNITUDE_RANGE.0, MAGNITUDE_RANGE.1],
        "angle_range_deg": [-ANGLE_RANGE_DEG, ANGLE_RANGE_DEG],
    });
    report.finalize()?;
    Ok(report)
}

/// Share of one candidate library rejected by the compliance test for each
/// load-uncertainty level `γ` and symmetric band half-width.
pub fn run_violation_sweep(sc: &Scenario, gammas: &[f64], band_fractions: &[f64]) -> Result<ExperimentReport> {
    if gammas.is_empty() || band_fractions.is_empty() {
        return Err(Error::InvalidInput("violation sweep needs non-empty grids".into()));
    }
    let ldf = build_ldf(&sc.feeder, &sc.setup)?;
    let library = sample_library(&sc.fleet, sc.config.library_size, sc.config.seed)?;
    let u0 = sc.feeder.base_voltage();
    let mut records = Table::new(
        "report",
        &["gamma", "band_fraction", "band_lower", "band_upper", "candidates", "violating", "violation_pct", "solver_failures"],
    );
    let mut runtimes = Vec::new();
    for &frac in band_fractions {
        for &gamma in gammas {
            let cell_clock = Instant::now();
            let cell = sc.with_gamma(gamma)?.with_band(u0 * (1.0 - frac), u0 * (1.0 + frac))?;
            let flags = compliance_flags(&library, &ldf, &cell.uncertainty, cell.band)?;
            let violating = flags.iter().filter(|&&f| f != Compliance::Compliant).count();
            let failures = flags.iter().filter(|&&f| f == Compliance::SolverFailure).count();
            records.push(vec![
                gamma.into(),
                frac.into(),
                cell.band.lower.into(),
                cell.band.upper.into(),
                library.len().into(),
                violating.into(),
                (100.0 * violating as f64 / library.len() as f64).into(),
                failures.into(),
            ]);
            runtimes.push(cell_clock.elapsed().as_secs_f64());
        }
    }
    let mut report = ExperimentReport::new(
        "violation_sweep",
        "percentage of candidate probing vectors violating the voltage band, by load uncertainty and band width",
        records,
    );
    report.add_summary("violation_pct", "report", "violation_pct");
    report.runtimes = runtimes;
    report.meta = json!({
        "scenario": config_json(sc),
        "gammas": gammas,
        "band_fractions": band_fractions,
        "library_seed": sc.config.seed,
    });
    report.finalize()?;
    Ok(report)
}

/// Repeated design, simulation and estimation with per-trial seeds; failed
/// trials are kept as records with an error message.
pub fn run_p2l_montecarlo(sc: &Scenario) -> Result<ExperimentReport> {
    let master = sc.config.seed;
    let trials = sc.config.trials;
    let outcomes: Vec<(Result<TrialOutcome>, f64)> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let clock = Instant::now();
            let out = run_trial(sc, trial_seed(master, k));
            (out, clock.elapsed().as_secs_f64())
        })
        .collect();

    let mut records = Table::new(
        "report",
        &[
            "trial", "seed", "status", "error", "method", "reduced_size", "diversity", "condition", "state_rmse",
            "p_pct_median_abs", "q_pct_median_abs", "p_abs_max", "iterations", "converged", "objective",
        ],
    );
    let mut buses = Table::new(
        "bus_errors",
        &["trial", "bus", "p_true", "p_est", "p_pct", "p_spread", "q_true", "q_est", "q_pct", "q_spread"],
    );
    let o = sc.setup.o();
    let ids = sc.non_metered_ids();
    for (k, (out, _)) in outcomes.iter().enumerate() {
        let seed = trial_seed(master, k);
        match out {
            Ok(t) => {
                let d = &t.estimate.diagnostics;
                records.push(vec![
                    k.into(),
                    seed.into(),
                    "ok".into(),
                    Cell::Missing,
                    serde_json::to_value(t.design.report.method)?.as_str().unwrap_or("").into(),
                    t.design.report.reduced_size.into(),
                    t.design.report.diversity.into(),
                    t.condition.into(),
                    t.metrics.state_rmse.into(),
                    abs_median(t.metrics.p_pct_values()).into(),
                    abs_median(t.metrics.q_pct.iter().flatten().copied()).into(),
                    t.metrics.p_abs.iter().copied().fold(0.0, f64::max).into(),
                    d.iterations.into(),
                    d.converged.into(),
                    d.objective.into(),
                ]);
                for i in 0..o {
                    buses.push(vec![
                        k.into(),
                        ids[i].into(),
                        t.base_loads[i].into(),
                        t.loads.average[i].into(),
                        t.metrics.p_pct[i].into(),
                        t.loads.spread[i].into(),
                        t.base_loads[o + i].into(),
                        t.loads.average[o + i].into(),
                        t.metrics.q_pct[i].into(),
                        t.loads.spread[o + i].into(),
                    ]);
                }
            }
            Err(e) => {
                let mut row = vec![k.into(), seed.into(), "failed".into(), e.to_string().into()];
                row.resize(records.columns.len(), Cell::Missing);
                records.push(row);
            }
        }
    }
    let mut report = ExperimentReport::new(
        "p2l_montecarlo",
        "Monte Carlo load recovery from designed probing: per-bus percentage errors and state RMSE",
        records,
    );
    report.tables.push(buses);
    report.add_summary("state_rmse", "report", "state_rmse");
    report.add_summary("condition", "report", "condition");
    report.add_summary("p_pct", "bus_errors", "p_pct");
    report.add_summary("q_pct", "bus_errors", "q_pct");
    report.runtimes = outcomes.iter().map(|o| o.1).collect();
    report.meta = json!({
        "scenario": config_json(sc),
        "trials": trials,
        "master_seed": master,
        "trial_seeds": (0..trials).map(|k| trial_seed(master, k).to_string()).collect::<Vec<_>>(),
        "failures": outcomes.iter().filter(|o| o.0.is_err()).count(),
    });
    report.finalize()?;
    Ok(report)
}

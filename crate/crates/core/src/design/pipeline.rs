use std::time::Instant;

use nalgebra::DVector;
use rand::seq::index::sample;
use serde::Serialize;

use super::compliance::{reduce_library, LoadUncertainty, VoltageBand};
use super::library::{sample_library, CandidateLibrary};
use super::msd::{
    distance_matrix, msd_exhaustive_with_limit, msd_relax, randomized_rounding, RelaxOptions,
};
use crate::error::{Error, Result};
use crate::feeder::{FeederModel, InverterFleet, ProbingSetup};
use crate::ldf::{build_ldf, LdfModel};
use crate::rng::{stream, task_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    /// Single slot: candidate farthest from the flat state.
    Farthest,
    Exhaustive,
    RelaxAndRound,
    /// MSD skipped: uniformly random subset of the reduced library.
    Random,
}

#[derive(Debug, Clone, Copy)]
pub struct DesignOptions {
    pub library_size: usize,
    pub seed: u64,
    pub beta: f64,
    pub draws: usize,
    /// Use exhaustive MSD when `C(L, T)` does not exceed this.
    pub exhaustive_limit: u128,
    pub use_msd: bool,
    pub relax: RelaxOptions,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            library_size: 100,
            seed: 0,
            beta: 0.1,
            draws: 100,
            exhaustive_limit: 200_000,
            use_msd: true,
            relax: RelaxOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimings {
    pub sample_s: f64,
    pub compliance_s: f64,
    pub selection_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignReport {
    pub library_size: usize,
    pub reduced_size: usize,
    pub violation_pct: f64,
    pub solver_failures: usize,
    pub method: SelectionMethod,
    /// Selected indices in the reduced library.
    pub selected: Vec<usize>,
    /// Selected indices in the sampled library.
    pub selected_origin: Vec<usize>,
    pub diversity: f64,
    pub relaxation_bound: Option<f64>,
    pub rounding_repaired: bool,
    pub timings: StageTimings,
}

#[derive(Debug, Clone)]
pub struct ProbingDesign {
    pub setpoints: Vec<DVector<f64>>,
    pub reduced: CandidateLibrary,
    pub report: DesignReport,
}

pub fn design_pipeline(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    fleet: &InverterFleet,
    uncertainty: &LoadUncertainty,
    band: VoltageBand,
    opts: &DesignOptions,
) -> Result<ProbingDesign> {
    let ldf = build_ldf(feeder, setup)?;
    design_with_ldf(&ldf, setup, fleet, uncertainty, band, opts)
}

/// The three design stages against a prebuilt linear model.
pub fn design_with_ldf(
    ldf: &LdfModel,
    setup: &ProbingSetup,
    fleet: &InverterFleet,
    uncertainty: &LoadUncertainty,
    band: VoltageBand,
    opts: &DesignOptions,
) -> Result<ProbingDesign> {
    if fleet.m() != setup.m() {
        return Err(Error::Dimension { expected: setup.m(), got: fleet.m() });
    }
    let horizon = setup.horizon();
    let mut timings = StageTimings::default();

    let clock = Instant::now();
    let library = sample_library(fleet, opts.library_size, opts.seed)?;
    timings.sample_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let reduction = reduce_library(&library, ldf, uncertainty, band, horizon)?;
    timings.compliance_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let reduced = reduction.library;
    let l = reduced.len();
    let (method, selected, relaxation_bound, repaired) = if !opts.use_msd {
        let mut rng = task_rng(opts.seed, stream::SUBSET, 0);
        let mut pick = sample(&mut rng, l, horizon).into_vec();
        pick.sort_unstable();
        (SelectionMethod::Random, pick, None, false)
    } else if horizon == 1 {
        let map = ldf.probing_map();
        let norms: Vec<f64> = reduced.candidates().iter().map(|s| (&map * s).norm()).collect();
        let best = (0..l).fold(0, |b, i| if norms[i] > norms[b] { i } else { b });
        (SelectionMethod::Farthest, vec![best], None, false)
    } else {
        let dm = distance_matrix(&reduced, ldf)?;
        match msd_exhaustive_with_limit(&dm, horizon, opts.exhaustive_limit) {
            Ok(sel) => (SelectionMethod::Exhaustive, sel.indices, None, false),
            Err(Error::SearchTooLarge { .. }) => {
                let relax = msd_relax(&dm, horizon, opts.relax)?;
                let round =
                    randomized_rounding(&relax.x, &dm, horizon, opts.beta, opts.draws, opts.seed)?;
                (SelectionMethod::RelaxAndRound, round.indices, Some(relax.value), round.repaired)
            }
            Err(e) => return Err(e),
        }
    };
    timings.selection_s = clock.elapsed().as_secs_f64();

    let diversity = if l >= 2 {
        distance_matrix(&reduced, ldf)?.subset_value(&selected)
    } else {
        0.0
    };
    let setpoints = selected.iter().map(|&i| reduced.get(i).clone()).collect();
    let report = DesignReport {
        library_size: library.len(),
        reduced_size: l,
        violation_pct: reduction.violation_pct,
        solver_failures: reduction.solver_failures,
        method,
        selected_origin: selected.iter().map(|&i| reduced.origin()[i]).collect(),
        selected,
        diversity,
        relaxation_bound,
        rounding_repaired: repaired,
        timings,
    };
    Ok(ProbingDesign { setpoints, reduced, report })
}

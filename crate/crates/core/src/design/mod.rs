//! Probing setpoint design: sample implementable candidates, keep the
//! network-compliant ones, then pick the `T` most diverse.

pub mod compliance;
pub mod library;
pub mod lp;
pub mod msd;
pub mod pipeline;

pub use compliance::{
    check_compliance, compliance_flags, is_network_compliant, reduce_library, Compliance, LoadUncertainty,
    Reduction, VoltageBand,
};
pub use library::{is_implementable, sample_device, sample_library, CandidateLibrary};
pub use msd::{
    distance_matrix, greedy_repair, msd_exhaustive, msd_relax, project_capped_simplex,
    randomized_rounding, DistanceMatrix, RelaxOptions, Relaxation, Rounding, Selection,
};
pub use pipeline::{
    design_pipeline, design_with_ldf, DesignOptions, DesignReport, ProbingDesign, SelectionMethod,
};

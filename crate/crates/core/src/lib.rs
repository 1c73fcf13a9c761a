//! Smart-inverter probing for distribution feeders: design network-compliant,
//! diversity-maximizing probing injections and recover non-metered loads from
//! the induced voltage and power measurements.

pub mod acpf;
pub mod design;
pub mod error;
pub mod estimator;
pub mod feeder;
pub mod harness;
pub mod ldf;
pub mod rng;

pub use error::{Error, Result};

//! Scenario files and their resolution into ready-to-run model objects.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::profile::LoadProfile;
use crate::acpf::Injections;
use crate::design::{DesignOptions, LoadUncertainty, VoltageBand};
use crate::error::{Error, Result};
use crate::estimator::{Penalty, PenaltyConfig, Snr};
use crate::feeder::{DataMode, Device, FeederModel, InverterFleet, ProbingSetup};
use crate::rng::{stream, task_rng};

/// The 34-bus feeder shipped with the crate.
pub const BUNDLED_FEEDER: &str = include_str!("../../data/feeder34.json");
pub const BUNDLED_FEEDER_NAME: &str = "feeder34.json";

pub fn bundled_feeder() -> FeederModel {
    FeederModel::from_json_str(BUNDLED_FEEDER).expect("bundled feeder is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Placement {
    /// Explicit non-metered bus ids; every other bus probes.
    Explicit { non_metered: Vec<u32> },
    /// `non_metered` buses drawn at random.
    Random { random_non_metered: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadSource {
    /// Synthetic profile; `interval` defaults to the aggregate peak.
    Synthetic { seed: u64, interval: Option<usize> },
    /// Time-series CSV, path relative to the scenario file.
    File { path: PathBuf, interval: Option<usize> },
    /// The same consumption at every bus.
    Uniform { p: f64, q: f64 },
}

impl Default for LoadSource {
    fn default() -> Self {
        LoadSource::Synthetic { seed: 0, interval: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrPair {
    pub metered: Snr,
    pub loads: Snr,
}

impl Default for SnrPair {
    fn default() -> Self {
        Self { metered: Snr::Db(80.0), loads: Snr::Db(60.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Feeder file, relative to the scenario file; `feeder34.json` falls
    /// back to the bundled feeder.
    pub feeder: PathBuf,
    pub placement: Placement,
    pub horizon: usize,
    pub mode: DataMode,
    #[serde(default = "default_device")]
    pub device: Device,
    #[serde(default = "default_library_size")]
    pub library_size: usize,
    #[serde(default = "default_band")]
    pub voltage_band: [f64; 2],
    /// Load box `(1 ∓ 1/γ)·s_O`.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub snr: SnrPair,
    #[serde(default = "default_penalty")]
    pub penalty: Penalty,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loads: LoadSource,
    #[serde(default = "default_true")]
    pub use_msd: bool,
}

fn default_device() -> Device {
    Device::Storage { capacity: 0.2, p_max: 0.2 }
}
fn default_library_size() -> usize {
    100
}
fn default_band() -> [f64; 2] {
    [0.9, 1.1]
}
fn default_gamma() -> f64 {
    5.0
}
fn default_penalty() -> Penalty {
    Penalty::Squared
}
fn default_trials() -> usize {
    100
}
fn default_true() -> bool {
    true
}

impl ScenarioConfig {
    /// Bundled feeder with explicit placement and defaults elsewhere.
    pub fn bundled(non_metered: Vec<u32>, horizon: usize, mode: DataMode) -> Self {
        Self {
            feeder: PathBuf::from(BUNDLED_FEEDER_NAME),
            placement: Placement::Explicit { non_metered },
            horizon,
            mode,
            device: default_device(),
            library_size: default_library_size(),
            voltage_band: default_band(),
            gamma: default_gamma(),
            snr: SnrPair::default(),
            penalty: default_penalty(),
            trials: default_trials(),
            seed: 0,
            loads: LoadSource::default(),
            use_msd: true,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidInput("trials must be at least 1".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidInput(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidSetup("horizon T must be at least 1".into()));
        }
        if self.library_size == 0 {
            return Err(Error::InvalidInput("library size must be positive".into()));
        }
        Ok(())
    }

    pub fn design_options(&self, seed: u64) -> DesignOptions {
        DesignOptions {
            library_size: self.library_size,
            seed,
            use_msd: self.use_msd,
            ..DesignOptions::default()
        }
    }
}

/// A scenario with its feeder loaded and all derived objects built.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub feeder: FeederModel,
    pub setup: ProbingSetup,
    pub fleet: InverterFleet,
    /// Nominal net injections at every non-substation bus.
    pub nominal: Injections,
    pub band: VoltageBand,
    pub uncertainty: LoadUncertainty,
}

impl Scenario {
    /// Load a scenario file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg = ScenarioConfig::from_json_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::resolve(cfg, &base)
    }

    pub fn resolve(config: ScenarioConfig, base_dir: &Path) -> Result<Self> {
        config.validate()?;
        let feeder_path = base_dir.join(&config.feeder);
        let feeder = if feeder_path.exists() {
            FeederModel::load(&feeder_path)?
        } else if config.feeder == Path::new(BUNDLED_FEEDER_NAME) {
            bundled_feeder()
        } else {
            return Err(Error::InvalidInput(format!(
                "feeder file {} not found",
                feeder_path.display()
            )));
        };
        let non_metered = match &config.placement {
            Placement::Explicit { non_metered } => non_metered.clone(),
            Placement::Random { random_non_metered, seed } => {
                let n = feeder.n();
                if *random_non_metered >= n {
                    return Err(Error::InvalidSetup(format!(
                        "cannot place {random_non_metered} non-metered buses among {n}"
                    )));
                }
                let mut rng = task_rng(*seed, stream::PLACEMENT, 0);
                let mut pos = sample(&mut rng, n, *random_non_metered).into_vec();
                pos.sort_unstable();
                pos.into_iter().map(|p| feeder.bus_ids()[p]).collect()
            }
        };
        let setup = ProbingSetup::from_non_metered(&feeder, &non_metered, config.horizon, config.mode)?;
        let nominal = nominal_injections(&feeder, &config.loads, base_dir)?;
        let fixed = setup.probing().iter().map(|&b| (nominal.p[b], nominal.q[b])).collect();
        let fleet = InverterFleet::uniform(&setup, config.device, fixed)?;
        let [lo, hi] = config.voltage_band;
        let band = VoltageBand::new(lo, hi, feeder.base_voltage())?;
        let uncertainty = LoadUncertainty::from_gamma(&non_metered_loads(&setup, &nominal), config.gamma)?;
        Ok(Self { config, feeder, setup, fleet, nominal, band, uncertainty })
    }

    /// Nominal `[p_O; q_O]`.
    pub fn nominal_loads(&self) -> DVector<f64> {
        non_metered_loads(&self.setup, &self.nominal)
    }

    /// Same scenario with another setup variant (horizon/mode).
    pub fn with_setup(&self, horizon: usize, mode: DataMode) -> Result<Self> {
        let mut out = self.clone();
        out.setup = self.setup.with_horizon(horizon)?.with_mode(mode);
        out.config.horizon = horizon;
        out.config.mode = mode;
        Ok(out)
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut out = self.clone();
        out.uncertainty = LoadUncertainty::from_gamma(&self.nominal_loads(), gamma)?;
        out.config.gamma = gamma;
        Ok(out)
    }

    pub fn with_band(&self, lower: f64, upper: f64) -> Result<Self> {
        let mut out = self.clone();
        out.band = VoltageBand::new(lower, upper, self.feeder.base_voltage())?;
        out.config.voltage_band = [lower, upper];
        Ok(out)
    }

    /// Estimator penalty: coupling scales from the box midpoint, the box
    /// itself and the loads-only sign constraint.
    pub fn penalty_config(&self) -> PenaltyConfig {
        let mut cfg = PenaltyConfig::for_loads(&self.uncertainty.midpoint(), self.config.snr.loads);
        cfg.metering = self.config.penalty;
        cfg.coupling = self.config.penalty;
        cfg.load_box = Some(self.uncertainty.clone());
        cfg.loads_only = self.nominal_loads().iter().all(|&s| s <= 0.0);
        cfg
    }

    pub fn non_metered_ids(&self) -> Vec<u32> {
        self.setup.non_metered().iter().map(|&p| self.feeder.bus_ids()[p]).collect()
    }
}

fn non_metered_loads(setup: &ProbingSetup, nominal: &Injections) -> DVector<f64> {
    let o = setup.o();
    DVector::from_fn(2 * o, |i, _| {
        let b = setup.non_metered()[i % o];
        if i < o {
            nominal.p[b]
        } else {
            nominal.q[b]
        }
    })
}

fn nominal_injections(feeder: &FeederModel, source: &LoadSource, base_dir: &Path) -> Result<Injections> {
    let n = feeder.n();
    let mut inj = Injections::zeros(n);
    let ids = feeder.bus_ids();
    let profile = match source {
        LoadSource::Uniform { p, q } => {
            inj.p.fill(-p);
            inj.q.fill(-q);
            return Ok(inj);
        }
        LoadSource::Synthetic { seed, interval } => (LoadProfile::synthetic(ids, *seed), *interval),
        LoadSource::File { path, interval } => (LoadProfile::from_csv(base_dir.join(path))?, *interval),
    };
    let (prof, interval) = profile;
    let k = interval.unwrap_or_else(|| prof.peak_interval());
    for (pos, &id) in ids.iter().enumerate() {
        let (p, q) = prof.load(id, k)?;
        inj.p[pos] = -p;
        inj.q[pos] = -q;
    }
    Ok(inj)
}

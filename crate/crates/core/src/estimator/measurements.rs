//! Probing measurements and the multiplicative noise model `x̂ = x(1 + ε)`,
//! `ε ~ N(0, σ²)` with `σ = 10^(−SNR/20)`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acpf::{injections, solve_pf, BusState, Injections, StateSequence};
use crate::error::{Error, Result};
use crate::feeder::{DataMode, FeederModel, ProbingSetup};
use crate::rng::{stream, task_rng};

/// Smallest magnitude used when turning a relative noise level into an
/// absolute channel scale.
pub const SCALE_FLOOR: f64 = 1e-3;
/// Relative scale assigned to noise-free channels so weights stay finite.
pub const EXACT_RELATIVE_SIGMA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Snr {
    Db(f64),
    /// Noise-free data.
    Infinite(InfiniteTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfiniteTag {
    Inf,
}

impl Snr {
    pub const INFINITE: Snr = Snr::Infinite(InfiniteTag::Inf);

    pub fn db(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::InvalidInput(format!("SNR must be finite and positive, got {value}")));
        }
        Ok(Snr::Db(value))
    }

    /// Standard deviation of the relative error `ε`.
    pub fn sigma(&self) -> f64 {
        match *self {
            Snr::Db(db) => 10f64.powf(-db / 20.0),
            Snr::Infinite(_) => 0.0,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Snr::Infinite(_))
    }

    /// Relative scale used for weighting.
    pub fn weighting_sigma(&self) -> f64 {
        if self.is_exact() {
            EXACT_RELATIVE_SIGMA
        } else {
            self.sigma()
        }
    }
}

impl std::fmt::Display for Snr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Snr::Db(db) => write!(f, "{db}"),
            Snr::Infinite(_) => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for Snr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinite" | "exact" => Ok(Snr::INFINITE),
            other => {
                let v: f64 =
                    other.parse().map_err(|_| Error::InvalidInput(format!("bad SNR '{s}'")))?;
                Snr::db(v)
            }
        }
    }
}

/// Values over the probing buses, ordered like `ProbingSetup::probing()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channels {
    pub u: DVector<f64>,
    pub theta: Option<DVector<f64>>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub mode: DataMode,
    pub values: Vec<Channels>,
    /// Absolute per-channel noise scales `σ_k > 0`.
    pub sigmas: Vec<Channels>,
}

impl MeasurementSet {
    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self, setup: &ProbingSetup) -> Result<()> {
        if self.values.len() != setup.horizon() || self.sigmas.len() != setup.horizon() {
            return Err(Error::Dimension { expected: setup.horizon(), got: self.values.len() });
        }
        let m = setup.m();
        let angles = setup.mode().has_angles();
        for ch in self.values.iter().chain(&self.sigmas) {
            for v in [&ch.u, &ch.p, &ch.q] {
                if v.len() != m {
                    return Err(Error::Dimension { expected: m, got: v.len() });
                }
            }
            match (&ch.theta, angles) {
                (Some(t), true) if t.len() == m => {}
                (_, false) => {}
                _ => {
                    return Err(Error::InvalidInput(
                        "phasor mode needs angle measurements at every probing bus".into(),
                    ))
                }
            }
        }
        let positive = |v: &DVector<f64>| v.iter().all(|&s| s > 0.0 && s.is_finite());
        for s in &self.sigmas {
            if !positive(&s.u) || !positive(&s.p) || !positive(&s.q) {
                return Err(Error::InvalidInput("noise scales must be positive".into()));
            }
            if angles && !s.theta.as_ref().is_some_and(positive) {
                return Err(Error::InvalidInput("noise scales must be positive".into()));
            }
        }
        Ok(())
    }
}

fn corrupt<R: Rng>(x: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        x
    } else {
        let e: f64 = rng.sample(StandardNormal);
        x * (1.0 + sigma * e)
    }
}

fn scale(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(SCALE_FLOOR)
}

/// Corrupt the metered quantities of a true state sequence.
pub fn simulate_measurements(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    states: &StateSequence,
    snr_metered: Snr,
    seed: u64,
) -> Result<MeasurementSet> {
    if states.len() != setup.horizon() {
        return Err(Error::Dimension { expected: setup.horizon(), got: states.len() });
    }
    let sigma = snr_metered.sigma();
    let rel = snr_metered.weighting_sigma();
    let angles = setup.mode().has_angles();
    let mut values = Vec::with_capacity(states.len());
    let mut sigmas = Vec::with_capacity(states.len());
    for (t, state) in states.slots().iter().enumerate() {
        let mut rng = task_rng(seed, stream::METERS, t as u64);
        let inj = injections(feeder, state);
        let pick = |v: &DVector<f64>| DVector::from_iterator(setup.m(), setup.probing().iter().map(|&b| v[b]));
        let (u, th, p, q) = (pick(&state.u), pick(&state.theta), pick(&inj.p), pick(&inj.q));
        let mut noisy = |v: &DVector<f64>| v.map(|x| corrupt(x, sigma, &mut rng));
        let ch = Channels {
            u: noisy(&u),
            theta: if angles { Some(noisy(&th)) } else { None },
            p: noisy(&p),
            q: noisy(&q),
        };
        let sc = |v: &DVector<f64>| v.map(|x| scale(x, rel));
        sigmas.push(Channels {
            u: sc(&ch.u),
            theta: ch.theta.as_ref().map(sc),
            p: sc(&ch.p),
            q: sc(&ch.q),
        });
        values.push(ch);
    }
    Ok(MeasurementSet { mode: setup.mode(), values, sigmas })
}

/// Per-slot non-metered injections `ŝ_O^t = (1 + ε)·s_O`, fresh `ε` per slot
/// and entry.
pub fn perturb_loads(nominal: &DVector<f64>, horizon: usize, snr_loads: Snr, seed: u64) -> Vec<DVector<f64>> {
    let sigma = snr_loads.sigma();
    (0..horizon)
        .map(|t| {
            let mut rng = task_rng(seed, stream::LOADS, t as u64);
            nominal.map(|x| corrupt(x, sigma, &mut rng))
        })
        .collect()
}

/// Ground truth plus measurements for one probing experiment.
#[derive(Debug, Clone)]
pub struct SimulatedProbing {
    pub states: StateSequence,
    /// True per-slot non-metered injections `[p_O; q_O]`.
    pub true_loads: Vec<DVector<f64>>,
    pub measurements: MeasurementSet,
}

/// Apply `probes` (one `[p_M; q_M]` per slot) with fluctuating non-metered
/// loads, solve the power flow for each slot and meter the result.
pub fn simulate_probing(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    probes: &[DVector<f64>],
    nominal_loads: &DVector<f64>,
    snr_metered: Snr,
    snr_loads: Snr,
    seed: u64,
) -> Result<SimulatedProbing> {
    let (m, o) = (setup.m(), setup.o());
    if probes.len() != setup.horizon() {
        return Err(Error::Dimension { expected: setup.horizon(), got: probes.len() });
    }
    if nominal_loads.len() != 2 * o {
        return Err(Error::Dimension { expected: 2 * o, got: nominal_loads.len() });
    }
    let true_loads = perturb_loads(nominal_loads, setup.horizon(), snr_loads, seed);
    let mut states = Vec::with_capacity(probes.len());
    for (probe, loads) in probes.iter().zip(&true_loads) {
        if probe.len() != 2 * m {
            return Err(Error::Dimension { expected: 2 * m, got: probe.len() });
        }
        let mut inj = Injections::zeros(feeder.n());
        for (i, &b) in setup.probing().iter().enumerate() {
            inj.p[b] = probe[i];
            inj.q[b] = probe[m + i];
        }
        for (i, &b) in setup.non_metered().iter().enumerate() {
            inj.p[b] = loads[i];
            inj.q[b] = loads[o + i];
        }
        states.push(solve_pf(feeder, &inj)?.state);
    }
    let states = StateSequence(states);
    let measurements = simulate_measurements(feeder, setup, &states, snr_metered, seed)?;
    Ok(SimulatedProbing { states, true_loads, measurements })
}

/// Noise-free measurements of a state sequence.
pub fn exact_measurements(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    states: &StateSequence,
) -> Result<MeasurementSet> {
    simulate_measurements(feeder, setup, states, Snr::INFINITE, 0)
}

/// Flat-start state sequence.
pub fn flat_sequence(feeder: &FeederModel, horizon: usize) -> StateSequence {
    StateSequence(vec![BusState::flat(feeder); horizon])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn snr_to_sigma() {
        assert!((Snr::db(80.0).unwrap().sigma() - 1e-4).abs() < 1e-18);
        assert!((Snr::db(60.0).unwrap().sigma() - 1e-3).abs() < 1e-17);
        assert_eq!(Snr::INFINITE.sigma(), 0.0);
        assert!(Snr::db(f64::INFINITY).is_err());
        assert_eq!("inf".parse::<Snr>().unwrap(), Snr::INFINITE);
        assert_eq!("40".parse::<Snr>().unwrap(), Snr::Db(40.0));
    }

    #[test]
    fn empirical_noise_level() {
        let sigma = Snr::db(40.0).unwrap().sigma();
        let mut rng = crate::rng::TaskRng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| corrupt(2.0, sigma, &mut rng) / 2.0 - 1.0).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd / sigma - 1.0).abs() < 0.02, "sd {sd} vs {sigma}");
        assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn exact_loads_are_untouched() {
        let nominal = DVector::from_vec(vec![-0.2, -0.1]);
        let slots = perturb_loads(&nominal, 3, Snr::INFINITE, 5);
        assert!(slots.iter().all(|s| s == &nominal));
        let noisy = perturb_loads(&nominal, 3, Snr::db(60.0).unwrap(), 5);
        assert_ne!(noisy[0], noisy[1]);
        assert_eq!(noisy, perturb_loads(&nominal, 3, Snr::db(60.0).unwrap(), 5));
    }
}

//! Feeder data model, file ingestion and bus admittance matrix.
//!
//! Buses are re-indexed on load: the substation always sits at index 0 and the
//! remaining buses keep their document order at indices `1..=N`. Everywhere
//! else in the crate a "bus position" means the zero-based index among the
//! non-substation buses, i.e. `index - 1`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub substation: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineRecord {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance, split evenly between both ends.
    #[serde(default)]
    pub b: f64,
}

/// On-disk feeder description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeederDocument {
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
    #[serde(default = "default_base_voltage")]
    pub base_voltage: f64,
}

fn default_base_voltage() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b: f64,
}

impl Line {
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(self.r, self.x).inv()
    }
}

/// Validated single-phase feeder. Immutable after construction.
#[derive(Debug, Clone)]
pub struct FeederModel {
    ids: Vec<u32>,
    index: HashMap<u32, usize>,
    lines: Vec<Line>,
    base_voltage: f64,
    y: DMatrix<Complex64>,
}

/// Non-substation block of `Y` and its coupling column to the substation.
#[derive(Debug, Clone)]
pub struct ReducedAdmittance {
    pub block: DMatrix<Complex64>,
    pub coupling: DVector<Complex64>,
}

impl FeederModel {
    pub fn from_document(doc: &FeederDocument) -> Result<Self> {
        let mut seen = HashSet::new();
        for bus in &doc.buses {
            if !seen.insert(bus.id) {
                return Err(Error::DuplicateBus(bus.id));
            }
        }
        let subs: Vec<_> = doc.buses.iter().filter(|b| b.substation).collect();
        if subs.len() != 1 {
            return Err(Error::Substation(subs.len()));
        }
        if !(doc.base_voltage > 0.0) {
            return Err(Error::InvalidInput(format!(
                "base voltage must be positive, got {}",
                doc.base_voltage
            )));
        }

        let mut ids = vec![subs[0].id];
        ids.extend(doc.buses.iter().filter(|b| !b.substation).map(|b| b.id));
        let index: HashMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

        let mut lines = Vec::with_capacity(doc.lines.len());
        for rec in &doc.lines {
            let from = *index.get(&rec.from).ok_or(Error::UnknownBus(rec.from))?;
            let to = *index.get(&rec.to).ok_or(Error::UnknownBus(rec.to))?;
            let z2 = rec.r * rec.r + rec.x * rec.x;
            if rec.r < 0.0 || rec.x < 0.0 || z2 == 0.0 || from == to || !z2.is_finite() {
                return Err(Error::BadImpedance { from: rec.from, to: rec.to });
            }
            lines.push(Line { from, to, r: rec.r, x: rec.x, b: rec.b });
        }

        check_connected(&ids, &lines)?;
        let y = build_admittance(ids.len(), &lines);
        Ok(Self { ids, index, lines, base_voltage: doc.base_voltage, y })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: FeederDocument =
            serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_document(&doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Number of non-substation buses.
    pub fn n(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn base_voltage(&self) -> f64 {
        self.base_voltage
    }

    pub fn substation_id(&self) -> u32 {
        self.ids[0]
    }

    /// Ids of non-substation buses ordered by position.
    pub fn bus_ids(&self) -> &[u32] {
        &self.ids[1..]
    }

    /// Position of a non-substation bus id.
    pub fn position(&self, id: u32) -> Result<usize> {
        match self.index.get(&id) {
            Some(0) => Err(Error::InvalidSetup(format!("bus {id} is the substation"))),
            Some(&i) => Ok(i - 1),
            None => Err(Error::UnknownBus(id)),
        }
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Full `(N+1)×(N+1)` admittance matrix, substation first.
    pub fn admittance(&self) -> &DMatrix<Complex64> {
        &self.y
    }

    pub fn admittance_submatrices(&self) -> ReducedAdmittance {
        let n = self.n();
        ReducedAdmittance {
            block: self.y.view((1, 1), (n, n)).into_owned(),
            coupling: self.y.view((1, 0), (n, 1)).column(0).into_owned(),
        }
    }

    pub fn to_document(&self) -> FeederDocument {
        FeederDocument {
            buses: self
                .ids
                .iter()
                .enumerate()
                .map(|(i, &id)| BusRecord { id, substation: i == 0 })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineRecord {
                    from: self.ids[l.from],
                    to: self.ids[l.to],
                    r: l.r,
                    x: l.x,
                    b: l.b,
                })
                .collect(),
            base_voltage: self.base_voltage,
        }
    }
}

fn check_connected(ids: &[u32], lines: &[Line]) -> Result<()> {
    let mut adj = vec![Vec::new(); ids.len()];
    for l in lines {
        adj[l.from].push(l.to);
        adj[l.to].push(l.from);
    }
    let mut seen = vec![false; ids.len()];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(i) => Err(Error::Disconnected(ids[i])),
        None => Ok(()),
    }
}

fn build_admittance(size: usize, lines: &[Line]) -> DMatrix<Complex64> {
    let mut y = DMatrix::from_element(size, size, Complex64::new(0.0, 0.0));
    for l in lines {
        let ys = l.series_admittance();
        let half_shunt = Complex64::new(0.0, l.b / 2.0);
        y[(l.from, l.from)] += ys + half_shunt;
        y[(l.to, l.to)] += ys + half_shunt;
        y[(l.from, l.to)] -= ys;
        y[(l.to, l.from)] -= ys;
    }
    y
}

/// Phasor (magnitude and angle) or magnitude-only probing data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    Phasor,
    #[serde(alias = "non-phasor")]
    Nonphasor,
}

impl DataMode {
    pub fn has_angles(self) -> bool {
        matches!(self, DataMode::Phasor)
    }
}

impl std::str::FromStr for DataMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "phasor" => Ok(DataMode::Phasor),
            "nonphasor" | "non-phasor" => Ok(DataMode::Nonphasor),
            other => Err(Error::InvalidInput(format!("unknown data mode '{other}'"))),
        }
    }
}

/// Partition of the non-substation buses into probing buses and non-metered
/// buses, together with the probing horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbingSetup {
    probing: Vec<usize>,
    non_metered: Vec<usize>,
    horizon: usize,
    mode: DataMode,
}

impl ProbingSetup {
    /// Build from non-metered bus ids; every other non-substation bus probes.
    pub fn from_non_metered(
        feeder: &FeederModel,
        non_metered_ids: &[u32],
        horizon: usize,
        mode: DataMode,
    ) -> Result<Self> {
        let mut non_metered = Vec::with_capacity(non_metered_ids.len());
        for &id in non_metered_ids {
            non_metered.push(feeder.position(id)?);
        }
        let set: HashSet<_> = non_metered.iter().copied().collect();
        let probing = (0..feeder.n()).filter(|p| !set.contains(p)).collect();
        Self::new(feeder, probing, non_metered, horizon, mode)
    }

    /// Build from bus positions. `M ∪ O` must cover every non-substation bus.
    pub fn new(
        feeder: &FeederModel,
        probing: Vec<usize>,
        non_metered: Vec<usize>,
        horizon: usize,
        mode: DataMode,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidSetup("horizon T must be at least 1".into()));
        }
        let n = feeder.n();
        let mut seen = vec![false; n];
        for &p in probing.iter().chain(&non_metered) {
            if p >= n {
                return Err(Error::InvalidSetup(format!("bus position {p} out of range")));
            }
            if seen[p] {
                return Err(Error::InvalidSetup(format!(
                    "bus {} listed twice across M and O",
                    feeder.bus_ids()[p]
                )));
            }
            seen[p] = true;
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidSetup(format!(
                "bus {} belongs to neither M nor O",
                feeder.bus_ids()[p]
            )));
        }
        if probing.is_empty() {
            return Err(Error::InvalidSetup("probing set M is empty".into()));
        }
        Ok(Self { probing, non_metered, horizon, mode })
    }

    pub fn probing(&self) -> &[usize] {
        &self.probing
    }

    pub fn non_metered(&self) -> &[usize] {
        &self.non_metered
    }

    pub fn m(&self) -> usize {
        self.probing.len()
    }

    pub fn o(&self) -> usize {
        self.non_metered.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn mode(&self) -> DataMode {
        self.mode
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidSetup("horizon T must be at least 1".into()));
        }
        Ok(Self { horizon, ..self.clone() })
    }

    pub fn with_mode(&self, mode: DataMode) -> Self {
        Self { mode, ..self.clone() }
    }

    /// Metering rows per slot: `u, p, q` plus `θ` in phasor mode.
    pub fn metering_rows_per_slot(&self) -> usize {
        if self.mode.has_angles() {
            4 * self.m()
        } else {
            3 * self.m()
        }
    }

    /// Total number of P2L equations.
    pub fn equation_count(&self) -> usize {
        self.metering_rows_per_slot() * self.horizon + 2 * self.o() * (self.horizon - 1)
    }
}

/// A controllable inverter behind a probing bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Device {
    /// Solar inverter: `0 ≤ p ≤ p_max`, `p² + q² ≤ capacity²`.
    Solar { capacity: f64, p_max: f64 },
    /// Storage inverter: `|p| ≤ p_max`, `p² + q² ≤ capacity²`.
    Storage { capacity: f64, p_max: f64 },
}

impl Device {
    pub fn capacity(&self) -> f64 {
        match *self {
            Device::Solar { capacity, .. } | Device::Storage { capacity, .. } => capacity,
        }
    }

    pub fn p_max(&self) -> f64 {
        match *self {
            Device::Solar { p_max, .. } | Device::Storage { p_max, .. } => p_max,
        }
    }

    /// Admissible active-power interval.
    pub fn p_range(&self) -> (f64, f64) {
        match *self {
            Device::Solar { p_max, .. } => (0.0, p_max),
            Device::Storage { p_max, .. } => (-p_max, p_max),
        }
    }

    pub fn admits(&self, p: f64, q: f64, tol: f64) -> bool {
        let (lo, hi) = self.p_range();
        let s = self.capacity();
        p >= lo - tol && p <= hi + tol && p * p + q * q <= s * s + tol
    }

    fn validate(&self) -> Result<()> {
        let (s, p) = (self.capacity(), self.p_max());
        if !(s > 0.0) || !(p >= 0.0) || p > s {
            return Err(Error::InvalidInput(format!(
                "device needs capacity > 0 and 0 <= p_max <= capacity (got {s}, {p})"
            )));
        }
        Ok(())
    }
}

/// Inverters and metered non-controllable injections at the probing buses.
#[derive(Debug, Clone)]
pub struct InverterFleet {
    /// Indexed like `ProbingSetup::probing()`.
    devices: Vec<Vec<Device>>,
    fixed_p: Vec<f64>,
    fixed_q: Vec<f64>,
}

impl InverterFleet {
    /// `devices[i]` and `fixed[i]` belong to the `i`-th probing bus of `setup`.
    pub fn new(
        setup: &ProbingSetup,
        devices: Vec<Vec<Device>>,
        fixed: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let m = setup.m();
        if devices.len() != m {
            return Err(Error::Dimension { expected: m, got: devices.len() });
        }
        if fixed.len() != m {
            return Err(Error::Dimension { expected: m, got: fixed.len() });
        }
        for d in devices.iter().flatten() {
            d.validate()?;
        }
        if devices.iter().all(|d| d.is_empty()) {
            return Err(Error::InvalidInput("inverter fleet is empty".into()));
        }
        let (fixed_p, fixed_q) = fixed.into_iter().unzip();
        Ok(Self { devices, fixed_p, fixed_q })
    }

    /// One identical device at every probing bus.
    pub fn uniform(setup: &ProbingSetup, device: Device, fixed: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(setup, vec![vec![device]; setup.m()], fixed)
    }

    pub fn m(&self) -> usize {
        self.devices.len()
    }

    pub fn devices(&self, i: usize) -> &[Device] {
        &self.devices[i]
    }

    pub fn fixed_injection(&self, i: usize) -> (f64, f64) {
        (self.fixed_p[i], self.fixed_q[i])
    }
}

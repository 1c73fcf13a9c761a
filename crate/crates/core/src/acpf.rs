//! Polar AC power-flow equations, a Newton power-flow solver and the P2L
//! Jacobian.
//!
//! State vectors are laid out as `[u_1..u_N, θ_1..θ_N]` over the
//! non-substation buses; the substation is held at `(u0, 0)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{FeederModel, ProbingSetup};

/// Voltage magnitudes (pu) and angles (rad) at the non-substation buses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusState {
    pub u: DVector<f64>,
    pub theta: DVector<f64>,
}

impl BusState {
    pub fn flat(feeder: &FeederModel) -> Self {
        let n = feeder.n();
        Self {
            u: DVector::from_element(n, feeder.base_voltage()),
            theta: DVector::zeros(n),
        }
    }

    pub fn n(&self) -> usize {
        self.u.len()
    }

    /// Stacked `[u; θ]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.n();
        DVector::from_fn(2 * n, |i, _| if i < n { self.u[i] } else { self.theta[i - n] })
    }

    pub fn from_vector(v: &[f64]) -> Self {
        let n = v.len() / 2;
        Self {
            u: DVector::from_column_slice(&v[..n]),
            theta: DVector::from_column_slice(&v[n..2 * n]),
        }
    }

    /// Rectangular phasor components `(re, im)`.
    pub fn rectangular(&self) -> (DVector<f64>, DVector<f64>) {
        (
            self.u.zip_map(&self.theta, |u, t| u * t.cos()),
            self.u.zip_map(&self.theta, |u, t| u * t.sin()),
        )
    }

    pub fn is_valid(&self) -> bool {
        self.u.iter().all(|&u| u > 0.0 && u.is_finite())
            && self.theta.iter().all(|t| t.is_finite())
    }
}

/// One state per probing slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSequence(pub Vec<BusState>);

impl StateSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn slots(&self) -> &[BusState] {
        &self.0
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let parts: Vec<f64> = self.0.iter().flat_map(|s| s.to_vector().iter().copied().collect::<Vec<_>>()).collect();
        DVector::from_vec(parts)
    }

    pub fn from_vector(v: &DVector<f64>, slots: usize) -> Self {
        let w = v.len() / slots;
        Self((0..slots).map(|t| BusState::from_vector(&v.as_slice()[t * w..(t + 1) * w])).collect())
    }
}

/// Net active/reactive injections at the non-substation buses (pu).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injections {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl Injections {
    pub fn zeros(n: usize) -> Self {
        Self { p: DVector::zeros(n), q: DVector::zeros(n) }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.p.len();
        DVector::from_fn(2 * n, |i, _| if i < n { self.p[i] } else { self.q[i - n] })
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let n = v.len() / 2;
        Self { p: v.rows(0, n).into_owned(), q: v.rows(n, n).into_owned() }
    }
}

/// Full-bus voltage view including the substation at index 0.
fn full_voltages(feeder: &FeederModel, state: &BusState) -> (Vec<f64>, Vec<f64>) {
    let mut u = Vec::with_capacity(state.n() + 1);
    let mut th = Vec::with_capacity(state.n() + 1);
    u.push(feeder.base_voltage());
    th.push(0.0);
    u.extend(state.u.iter());
    th.extend(state.theta.iter());
    (u, th)
}

pub fn injections(feeder: &FeederModel, state: &BusState) -> Injections {
    let y = feeder.admittance();
    let (u, th) = full_voltages(feeder, state);
    let n = feeder.n();
    let mut out = Injections::zeros(n);
    for i in 1..=n {
        let (mut p, mut q) = (0.0, 0.0);
        for k in 0..=n {
            let ik = y[(i, k)];
            if ik.re == 0.0 && ik.im == 0.0 {
                continue;
            }
            let (s, c) = (th[i] - th[k]).sin_cos();
            p += u[k] * (ik.re * c + ik.im * s);
            q += u[k] * (ik.re * s - ik.im * c);
        }
        out.p[i - 1] = u[i] * p;
        out.q[i - 1] = u[i] * q;
    }
    out
}

/// Jacobian of `[p; q]` with respect to `[u; θ]`, both over non-substation buses.
pub fn injection_jacobian(feeder: &FeederModel, state: &BusState) -> DMatrix<f64> {
    let y = feeder.admittance();
    let (u, th) = full_voltages(feeder, state);
    let n = feeder.n();
    let inj = injections(feeder, state);
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    for i in 1..=n {
        let r = i - 1;
        for k in 1..=n {
            let ik = y[(i, k)];
            if i == k || (ik.re == 0.0 && ik.im == 0.0) {
                continue;
            }
            let c = k - 1;
            let (s, co) = (th[i] - th[k]).sin_cos();
            let a = ik.re * co + ik.im * s;
            let b = ik.re * s - ik.im * co;
            jac[(r, c)] = u[i] * a;
            jac[(r, n + c)] = u[i] * u[k] * b;
            jac[(n + r, c)] = u[i] * b;
            jac[(n + r, n + c)] = -u[i] * u[k] * a;
        }
        let (g, bb) = (y[(i, i)].re, y[(i, i)].im);
        let (p, q) = (inj.p[r], inj.q[r]);
        jac[(r, r)] = p / u[i] + g * u[i];
        jac[(r, n + r)] = -q - bb * u[i] * u[i];
        jac[(n + r, r)] = q / u[i] - bb * u[i];
        jac[(n + r, n + r)] = p - g * u[i] * u[i];
    }
    jac
}

#[derive(Debug, Clone, Copy)]
pub struct PfOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: 50, max_halvings: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct PfSolution {
    pub state: BusState,
    pub iterations: usize,
    pub residual: f64,
}

fn mismatch(feeder: &FeederModel, state: &BusState, target: &DVector<f64>) -> DVector<f64> {
    injections(feeder, state).to_vector() - target
}

/// Newton power flow from a flat start.
pub fn solve_pf(feeder: &FeederModel, target: &Injections) -> Result<PfSolution> {
    solve_pf_from(feeder, target, &BusState::flat(feeder), PfOptions::default())
}

pub fn solve_pf_from(
    feeder: &FeederModel,
    target: &Injections,
    start: &BusState,
    opts: PfOptions,
) -> Result<PfSolution> {
    let n = feeder.n();
    if target.p.len() != n || target.q.len() != n {
        return Err(Error::Dimension { expected: n, got: target.p.len() });
    }
    let goal = target.to_vector();
    let mut x = start.to_vector();
    let mut state = start.clone();
    let mut f = mismatch(feeder, &state, &goal);
    let mut norm = f.amax();
    for it in 0..=opts.max_iterations {
        if norm <= opts.tolerance {
            return Ok(PfSolution { state, iterations: it, residual: norm });
        }
        if it == opts.max_iterations {
            break;
        }
        let jac = injection_jacobian(feeder, &state);
        let step = jac
            .lu()
            .solve(&(-&f))
            .ok_or_else(|| Error::Singular("power-flow Jacobian".into()))?;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial_x = &x + &step * alpha;
            let trial = BusState::from_vector(trial_x.as_slice());
            if trial.is_valid() {
                let tf = mismatch(feeder, &trial, &goal);
                let tn = tf.amax();
                if tn < norm {
                    accepted = Some((trial_x, trial, tf, tn));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((nx, ns, nf, nn)) => {
                x = nx;
                state = ns;
                f = nf;
                norm = nn;
            }
            None => {
                return Err(Error::PowerFlowDiverged { iterations: it + 1, residual: norm });
            }
        }
    }
    Err(Error::PowerFlowDiverged { iterations: opts.max_iterations, residual: norm })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Magnitude,
    Angle,
    Active,
    Reactive,
    CouplingActive,
    CouplingReactive,
}

/// Row metadata: equation kind, slot `t` (first slot of the pair for
/// coupling rows) and bus position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLabel {
    pub kind: RowKind,
    pub slot: usize,
    pub bus: usize,
}

/// Row labels of the P2L equations for a setup.
pub fn p2l_row_labels(setup: &ProbingSetup) -> Vec<RowLabel> {
    let mut rows = Vec::with_capacity(setup.equation_count());
    let mut kinds = vec![RowKind::Magnitude];
    if setup.mode().has_angles() {
        kinds.push(RowKind::Angle);
    }
    kinds.extend([RowKind::Active, RowKind::Reactive]);
    for t in 0..setup.horizon() {
        for &kind in &kinds {
            rows.extend(setup.probing().iter().map(|&bus| RowLabel { kind, slot: t, bus }));
        }
    }
    for t in 0..setup.horizon().saturating_sub(1) {
        for kind in [RowKind::CouplingActive, RowKind::CouplingReactive] {
            rows.extend(setup.non_metered().iter().map(|&bus| RowLabel { kind, slot: t, bus }));
        }
    }
    rows
}

/// Left-hand sides of the P2L equations: metered `u, θ, p, q` per slot
/// followed by the coupling differences `p_n(v_t) − p_n(v_{t+1})`.
pub fn p2l_map(feeder: &FeederModel, setup: &ProbingSetup, states: &StateSequence) -> DVector<f64> {
    let inj: Vec<Injections> = states.slots().iter().map(|s| injections(feeder, s)).collect();
    let labels = p2l_row_labels(setup);
    DVector::from_iterator(
        labels.len(),
        labels.iter().map(|r| {
            let (s, i) = (&states.slots()[r.slot], &inj[r.slot]);
            match r.kind {
                RowKind::Magnitude => s.u[r.bus],
                RowKind::Angle => s.theta[r.bus],
                RowKind::Active => i.p[r.bus],
                RowKind::Reactive => i.q[r.bus],
                RowKind::CouplingActive => i.p[r.bus] - inj[r.slot + 1].p[r.bus],
                RowKind::CouplingReactive => i.q[r.bus] - inj[r.slot + 1].q[r.bus],
            }
        }),
    )
}

#[derive(Debug, Clone)]
pub struct P2lJacobian {
    pub matrix: DMatrix<f64>,
    pub rows: Vec<RowLabel>,
    /// Columns per slot (`2N`); slot `t` owns columns `t·2N .. (t+1)·2N`.
    pub slot_width: usize,
}

impl P2lJacobian {
    pub fn condition_number(&self) -> f64 {
        condition_number(&self.matrix)
    }
}

pub fn assemble_p2l_jacobian(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    states: &StateSequence,
) -> Result<P2lJacobian> {
    if states.len() != setup.horizon() {
        return Err(Error::Dimension { expected: setup.horizon(), got: states.len() });
    }
    let n = feeder.n();
    let w = 2 * n;
    let jacs: Vec<DMatrix<f64>> =
        states.slots().iter().map(|s| injection_jacobian(feeder, s)).collect();
    let rows = p2l_row_labels(setup);
    let mut m = DMatrix::zeros(rows.len(), w * setup.horizon());
    for (r, label) in rows.iter().enumerate() {
        let off = label.slot * w;
        match label.kind {
            RowKind::Magnitude => m[(r, off + label.bus)] = 1.0,
            RowKind::Angle => m[(r, off + n + label.bus)] = 1.0,
            RowKind::Active | RowKind::Reactive => {
                let src = if label.kind == RowKind::Active { label.bus } else { n + label.bus };
                m.view_mut((r, off), (1, w)).copy_from(&jacs[label.slot].row(src));
            }
            RowKind::CouplingActive | RowKind::CouplingReactive => {
                let src =
                    if label.kind == RowKind::CouplingActive { label.bus } else { n + label.bus };
                m.view_mut((r, off), (1, w)).copy_from(&jacs[label.slot].row(src));
                m.view_mut((r, off + w), (1, w)).copy_from(&(-jacs[label.slot + 1].row(src)));
            }
        }
    }
    Ok(P2lJacobian { matrix: m, rows, slot_width: w })
}

/// Ratio of extreme singular values; `+∞` for column-rank-deficient input.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let (rows, cols) = a.shape();
    if cols == 0 {
        return 1.0;
    }
    if rows < cols {
        return f64::INFINITY;
    }
    let f = faer::Mat::<f64>::from_fn(rows, cols, |i, j| a[(i, j)]);
    let r = f.qr().compute_thin_r();
    let sv = r.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min < 1e-14 * max {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn two_bus(r: f64, x: f64) -> FeederModel {
        FeederModel::from_json_str(&format!(
            r#"{{"buses":[{{"id":1,"substation":true}},{{"id":2}}],
                "lines":[{{"from":1,"to":2,"r":{r},"x":{x}}}]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn flat_state_has_zero_injections() {
        let f = two_bus(0.01, 0.1);
        let inj = injections(&f, &BusState::flat(&f));
        assert!(inj.p.amax() < 1e-12 && inj.q.amax() < 1e-12);
    }

    #[test]
    fn two_bus_closed_form() {
        let f = two_bus(0.0, 0.1);
        let s = BusState { u: DVector::from_element(1, 1.0), theta: DVector::from_element(1, -0.01) };
        let inj = injections(&f, &s);
        let expected = -1.0 * 1.0 * (0.01f64).sin() / 0.1;
        assert!((inj.p[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn complex_power_oracle() {
        let f = two_bus(0.03, 0.07);
        let s = BusState { u: DVector::from_element(1, 0.97), theta: DVector::from_element(1, -0.02) };
        let v = [Complex64::new(1.0, 0.0), Complex64::from_polar(0.97, -0.02)];
        let y = f.admittance();
        let i1 = y[(1, 0)] * v[0] + y[(1, 1)] * v[1];
        let sp = v[1] * i1.conj();
        let inj = injections(&f, &s);
        assert!((inj.p[0] - sp.re).abs() < 1e-12);
        assert!((inj.q[0] - sp.im).abs() < 1e-12);
    }

    #[test]
    fn zero_injection_pf_is_flat() {
        let f = two_bus(0.01, 0.05);
        let sol = solve_pf(&f, &Injections::zeros(1)).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.state, BusState::flat(&f));
    }

    #[test]
    fn two_bus_reactive_line_closed_form() {
        // Lossless line, load p = -P at bus 2: u² = ... from P = u sinδ / x and
        // Q = (u cosδ - u²)/x with Q = 0 for unity power factor.
        let x = 0.1;
        let load = 0.5;
        let f = two_bus(0.0, x);
        let target = Injections {
            p: DVector::from_element(1, -load),
            q: DVector::from_element(1, 0.0),
        };
        let sol = solve_pf(&f, &target).unwrap();
        // Q = 0 → cosδ = u; P = u sinδ / x → (P x)² = u²(1 - u²)
        let px2 = (load * x).powi(2);
        let u2 = (1.0 + (1.0 - 4.0 * px2).sqrt()) / 2.0;
        assert!((sol.state.u[0] - u2.sqrt()).abs() < 1e-10);
        assert!((sol.state.theta[0] + (u2.sqrt()).acos()).abs() < 1e-9);
    }

    #[test]
    fn nonconvergence_is_reported() {
        let f = two_bus(0.0, 0.1);
        let target = Injections { p: DVector::from_element(1, -50.0), q: DVector::from_element(1, 0.0) };
        assert!(matches!(solve_pf(&f, &target), Err(Error::PowerFlowDiverged { .. })));
    }

    #[test]
    fn condition_number_sentinels() {
        let mut a = DMatrix::<f64>::zeros(5, 3);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        a[(2, 2)] = 1.0;
        assert!((condition_number(&a) - 1.0).abs() < 1e-12);
        let dup = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert!(condition_number(&dup).is_infinite());
        assert!(condition_number(&DMatrix::<f64>::identity(2, 3)).is_infinite());
    }
}

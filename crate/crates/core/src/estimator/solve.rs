use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::measurements::{MeasurementSet, Snr, SCALE_FLOOR};
use crate::acpf::{
    assemble_p2l_jacobian, injection_jacobian, injections, p2l_map, p2l_row_labels, solve_pf,
    BusState, Injections, RowKind, StateSequence,
};
use crate::design::LoadUncertainty;
use crate::error::{Error, Result};
use crate::feeder::{FeederModel, ProbingSetup};
use crate::ldf::build_ldf;

/// Condition number above which the noiseless solver reports the setup as
/// numerically unobservable.
pub const CONDITION_LIMIT: f64 = 1e13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    /// `(ε/σ)²`
    Squared,
    /// `|ε|/σ`
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub metering: Penalty,
    pub coupling: Penalty,
    /// Coupling noise scales `σ_l`, stacked `[p_O; q_O]`.
    pub coupling_sigma: DVector<f64>,
    pub load_box: Option<LoadUncertainty>,
    /// Non-metered buses host only loads: injections must be `≤ 0`.
    pub loads_only: bool,
    /// Bus positions (members of `O`) known to inject nothing.
    pub zero_injection: Vec<usize>,
}

impl PenaltyConfig {
    pub fn wls(coupling_sigma: DVector<f64>) -> Self {
        Self {
            metering: Penalty::Squared,
            coupling: Penalty::Squared,
            coupling_sigma,
            load_box: None,
            loads_only: false,
            zero_injection: Vec::new(),
        }
    }

    /// Coupling scales from an expected load level: the difference of two
    /// independently perturbed slots has scale `√2·σ·|s|`.
    pub fn for_loads(expected: &DVector<f64>, snr_loads: Snr) -> Self {
        let rel = snr_loads.weighting_sigma();
        Self::wls(expected.map(|s| std::f64::consts::SQRT_2 * rel * s.abs().max(SCALE_FLOOR)))
    }

    pub fn validate(&self, setup: &ProbingSetup) -> Result<()> {
        let o = setup.o();
        if self.coupling_sigma.len() != 2 * o {
            return Err(Error::Dimension { expected: 2 * o, got: self.coupling_sigma.len() });
        }
        if self.coupling_sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput("coupling noise scales must be positive".into()));
        }
        if let Some(b) = &self.load_box {
            if b.dim() != 2 * o {
                return Err(Error::Dimension { expected: 2 * o, got: b.dim() });
            }
        }
        for z in &self.zero_injection {
            if !setup.non_metered().contains(z) {
                return Err(Error::InvalidInput(format!(
                    "zero-injection bus position {z} is not a non-metered bus"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub objective: f64,
    /// RMS of weighted metering residuals.
    pub metering_rms: f64,
    /// RMS of weighted coupling residuals.
    pub coupling_rms: f64,
    /// Largest unweighted metering or coupling residual.
    pub residual_inf: f64,
    pub gradient_inf: f64,
    pub iterations: usize,
    pub converged: bool,
    pub starts: usize,
    pub condition: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationResult {
    pub states: StateSequence,
    /// `[p_O; q_O]` from `injections(v̂_t)`, per slot.
    pub slot_loads: Vec<DVector<f64>>,
    pub average_loads: DVector<f64>,
    pub diagnostics: Diagnostics,
}

fn loads_at(feeder: &FeederModel, setup: &ProbingSetup, state: &BusState) -> DVector<f64> {
    let inj = injections(feeder, state);
    let o = setup.o();
    DVector::from_fn(2 * o, |i, _| {
        let b = setup.non_metered()[i % o.max(1)];
        if i < o {
            inj.p[b]
        } else {
            inj.q[b]
        }
    })
}

fn finish(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    states: StateSequence,
    diagnostics: Diagnostics,
) -> EstimationResult {
    let slot_loads: Vec<DVector<f64>> =
        states.slots().iter().map(|s| loads_at(feeder, setup, s)).collect();
    let mut average = DVector::zeros(2 * setup.o());
    for s in &slot_loads {
        average += s;
    }
    if !slot_loads.is_empty() {
        average /= slot_loads.len() as f64;
    }
    EstimationResult { states, slot_loads, average_loads: average, diagnostics }
}

/// Measurement targets of the P2L equations in row-label order.
fn noiseless_target(setup: &ProbingSetup, meas: &MeasurementSet) -> Result<DVector<f64>> {
    let labels = p2l_row_labels(setup);
    let mut pos = vec![usize::MAX; setup.probing().iter().max().map_or(0, |&b| b + 1)];
    for (i, &b) in setup.probing().iter().enumerate() {
        pos[b] = i;
    }
    let mut out = DVector::zeros(labels.len());
    for (r, l) in labels.iter().enumerate() {
        let ch = &meas.values[l.slot];
        out[r] = match l.kind {
            RowKind::Magnitude => ch.u[pos[l.bus]],
            RowKind::Angle => ch
                .theta
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("angle data missing".into()))?[pos[l.bus]],
            RowKind::Active => ch.p[pos[l.bus]],
            RowKind::Reactive => ch.q[pos[l.bus]],
            RowKind::CouplingActive | RowKind::CouplingReactive => 0.0,
        };
    }
    Ok(out)
}

/// Linear-model warm start: measured probing injections plus a guess for
/// the non-metered ones.
pub fn ldf_warm_start(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    meas: &MeasurementSet,
    load_guess: Option<&DVector<f64>>,
) -> Result<StateSequence> {
    let ldf = build_ldf(feeder, setup)?;
    let s_o = load_guess.cloned().unwrap_or_else(|| DVector::zeros(2 * setup.o()));
    let mut slots = Vec::with_capacity(meas.horizon());
    for ch in &meas.values {
        let m = setup.m();
        let s_m = DVector::from_fn(2 * m, |i, _| if i < m { ch.p[i] } else { ch.q[i - m] });
        let mut st = ldf.approx_bus_state(&s_m, &s_o)?;
        // Metered values are better than predictions where available.
        for (i, &b) in setup.probing().iter().enumerate() {
            st.u[b] = ch.u[i];
            if let Some(th) = &ch.theta {
                st.theta[b] = th[i];
            }
        }
        if !st.is_valid() {
            st = BusState::flat(feeder);
        }
        slots.push(st);
    }
    Ok(StateSequence(slots))
}

/// Power-flow warm start: each slot solved with the measured probing
/// injections and a guess for the non-metered ones.
pub fn pf_warm_start(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    meas: &MeasurementSet,
    load_guess: Option<&DVector<f64>>,
) -> Result<StateSequence> {
    let o = setup.o();
    let s_o = load_guess.cloned().unwrap_or_else(|| DVector::zeros(2 * o));
    if s_o.len() != 2 * o {
        return Err(Error::Dimension { expected: 2 * o, got: s_o.len() });
    }
    let slots = meas
        .values
        .iter()
        .map(|ch| {
            let mut inj = Injections::zeros(feeder.n());
            for (i, &b) in setup.probing().iter().enumerate() {
                inj.p[b] = ch.p[i];
                inj.q[b] = ch.q[i];
            }
            for (i, &b) in setup.non_metered().iter().enumerate() {
                inj.p[b] = s_o[i];
                inj.q[b] = s_o[o + i];
            }
            solve_pf(feeder, &inj).map_or_else(|_| BusState::flat(feeder), |sol| sol.state)
        })
        .collect();
    Ok(StateSequence(slots))
}

/// Newton (Gauss–Newton for overdetermined systems) on the exact P2L
/// equations. Fails with [`Error::Unobservable`] when the Jacobian at an
/// iterate is singular or too ill-conditioned.
pub fn solve_noiseless(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    meas: &MeasurementSet,
    init: &StateSequence,
) -> Result<EstimationResult> {
    meas.validate(setup)?;
    if init.len() != setup.horizon() {
        return Err(Error::Dimension { expected: setup.horizon(), got: init.len() });
    }
    let target = noiseless_target(setup, meas)?;
    let horizon = setup.horizon();
    let residual = |s: &StateSequence| p2l_map(feeder, setup, s) - &target;
    let mut states = init.clone();
    let mut x = states.to_vector();
    let mut r = residual(&states);
    let mut norm = r.norm();
    let mut condition = None;
    const MAX_ITER: usize = 50;
    for it in 0..=MAX_ITER {
        let rinf = r.amax();
        if rinf <= 1e-8 {
            let diag = Diagnostics {
                objective: norm * norm,
                residual_inf: rinf,
                iterations: it,
                converged: true,
                starts: 1,
                condition,
                ..Default::default()
            };
            return Ok(finish(feeder, setup, states, diag));
        }
        if it == MAX_ITER {
            break;
        }
        let jac = assemble_p2l_jacobian(feeder, setup, &states)?.matrix;
        let (rows, cols) = jac.shape();
        if rows < cols {
            return Err(Error::Unobservable { condition: f64::INFINITY });
        }
        let svd = jac.svd(true, true);
        let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        condition = Some(cond);
        if !(cond <= CONDITION_LIMIT) {
            return Err(Error::Unobservable { condition: cond });
        }
        let step = svd
            .solve(&(-&r), 0.0)
            .map_err(|e| Error::Singular(format!("P2L Newton step: {e}")))?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=10 {
            let trial_x = &x + &step * alpha;
            let trial = StateSequence::from_vector(&trial_x, horizon);
            if trial.slots().iter().all(BusState::is_valid) {
                let tr = residual(&trial);
                let tn = tr.norm();
                if tn < norm {
                    x = trial_x;
                    states = trial;
                    r = tr;
                    norm = tn;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::EstimationDiverged { iterations: it + 1, residual: r.amax() });
        }
    }
    Err(Error::EstimationDiverged { iterations: MAX_ITER, residual: r.amax() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Metering,
    Coupling,
    Constraint,
}

#[derive(Debug, Clone, Copy)]
enum Term {
    /// Functionals of one slot's state: `u`, `Re v`, `Im v`.
    Magnitude { bus: usize },
    Real { bus: usize },
    Imag { bus: usize },
    Active { bus: usize },
    Reactive { bus: usize },
    CouplingP { bus: usize },
    CouplingQ { bus: usize },
    /// Hinge `max(0, sign·(inj − bound))`.
    Hinge { bus: usize, reactive: bool, sign: f64, bound: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Row {
    slot: usize,
    term: Term,
    target: f64,
    sigma: f64,
    group: Group,
    absolute: bool,
}

/// Weighted residual model of the penalized estimation problem.
struct Model<'a> {
    feeder: &'a FeederModel,
    horizon: usize,
    rows: Vec<Row>,
}

impl<'a> Model<'a> {
    fn new(
        feeder: &'a FeederModel,
        setup: &ProbingSetup,
        meas: &MeasurementSet,
        cfg: &PenaltyConfig,
    ) -> Self {
        let mut rows = Vec::new();
        let met_abs = cfg.metering == Penalty::Absolute;
        let cpl_abs = cfg.coupling == Penalty::Absolute;
        let o = setup.o();
        for (t, (val, sig)) in meas.values.iter().zip(&meas.sigmas).enumerate() {
            let mut push = |term, target, sigma| {
                rows.push(Row { slot: t, term, target, sigma, group: Group::Metering, absolute: met_abs })
            };
            for (i, &bus) in setup.probing().iter().enumerate() {
                match (&val.theta, &sig.theta) {
                    (Some(th), Some(sth)) if setup.mode().has_angles() => {
                        // Rectangular phasor residuals with first-order propagated scales.
                        let (u, a, su, sa) = (val.u[i], th[i], sig.u[i], sth[i]);
                        let (s, c) = a.sin_cos();
                        let sre = ((c * su).powi(2) + (u * s * sa).powi(2)).sqrt();
                        let sim = ((s * su).powi(2) + (u * c * sa).powi(2)).sqrt();
                        push(Term::Real { bus }, u * c, sre.max(1e-12));
                        push(Term::Imag { bus }, u * s, sim.max(1e-12));
                    }
                    _ => push(Term::Magnitude { bus }, val.u[i], sig.u[i]),
                }
                push(Term::Active { bus }, val.p[i], sig.p[i]);
                push(Term::Reactive { bus }, val.q[i], sig.q[i]);
            }
        }
        for t in 0..setup.horizon().saturating_sub(1) {
            for (j, &bus) in setup.non_metered().iter().enumerate() {
                for (term, sigma) in [
                    (Term::CouplingP { bus }, cfg.coupling_sigma[j]),
                    (Term::CouplingQ { bus }, cfg.coupling_sigma[o + j]),
                ] {
                    rows.push(Row {
                        slot: t,
                        term,
                        target: 0.0,
                        sigma,
                        group: Group::Coupling,
                        absolute: cpl_abs,
                    });
                }
            }
        }
        let strongest = cfg.coupling_sigma.iter().copied().fold(f64::INFINITY, f64::min);
        let strongest = if strongest.is_finite() { strongest } else { SCALE_FLOOR };
        let mut constraint = |slot, term, sigma| {
            rows.push(Row { slot, term, target: 0.0, sigma, group: Group::Constraint, absolute: false })
        };
        for t in 0..setup.horizon() {
            for (j, &bus) in setup.non_metered().iter().enumerate() {
                let (sp, sq) = (cfg.coupling_sigma[j], cfg.coupling_sigma[o + j]);
                if cfg.zero_injection.contains(&bus) {
                    // Squared weight 1e6 above the tightest coupling term.
                    let sz = strongest * 1e-3;
                    for reactive in [false, true] {
                        for sign in [1.0, -1.0] {
                            constraint(t, Term::Hinge { bus, reactive, sign, bound: 0.0 }, sz);
                        }
                    }
                    continue;
                }
                if let Some(b) = &cfg.load_box {
                    for (reactive, k, s) in [(false, j, sp), (true, o + j, sq)] {
                        constraint(t, Term::Hinge { bus, reactive, sign: 1.0, bound: b.upper[k] }, s);
                        constraint(t, Term::Hinge { bus, reactive, sign: -1.0, bound: b.lower[k] }, s);
                    }
                }
                if cfg.loads_only {
                    constraint(t, Term::Hinge { bus, reactive: false, sign: 1.0, bound: 0.0 }, sp);
                }
            }
        }
        Self { feeder, horizon: setup.horizon(), rows }
    }

    /// Weighted residuals `(value − target)/σ` and their Jacobian.
    fn evaluate(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.feeder.n();
        let w = 2 * n;
        let states = StateSequence::from_vector(x, self.horizon);
        let inj: Vec<Injections> = states.slots().iter().map(|s| injections(self.feeder, s)).collect();
        let jacs: Vec<DMatrix<f64>> =
            states.slots().iter().map(|s| injection_jacobian(self.feeder, s)).collect();
        let mut r = DVector::zeros(self.rows.len());
        let mut jm = DMatrix::zeros(self.rows.len(), w * self.horizon);
        for (k, row) in self.rows.iter().enumerate() {
            let t = row.slot;
            let off = t * w;
            let s = &states.slots()[t];
            let inv = 1.0 / row.sigma;
            let value = match row.term {
                Term::Magnitude { bus } => {
                    jm[(k, off + bus)] = inv;
                    s.u[bus]
                }
                Term::Real { bus } => {
                    let (sn, cs) = s.theta[bus].sin_cos();
                    jm[(k, off + bus)] = cs * inv;
                    jm[(k, off + n + bus)] = -s.u[bus] * sn * inv;
                    s.u[bus] * cs
                }
                Term::Imag { bus } => {
                    let (sn, cs) = s.theta[bus].sin_cos();
                    jm[(k, off + bus)] = sn * inv;
                    jm[(k, off + n + bus)] = s.u[bus] * cs * inv;
                    s.u[bus] * sn
                }
                Term::Active { bus } | Term::Reactive { bus } => {
                    let reactive = matches!(row.term, Term::Reactive { .. });
                    let src = if reactive { n + bus } else { bus };
                    for c in 0..w {
                        jm[(k, off + c)] = jacs[t][(src, c)] * inv;
                    }
                    if reactive {
                        inj[t].q[bus]
                    } else {
                        inj[t].p[bus]
                    }
                }
                Term::CouplingP { bus } | Term::CouplingQ { bus } => {
                    let reactive = matches!(row.term, Term::CouplingQ { .. });
                    let src = if reactive { n + bus } else { bus };
                    for c in 0..w {
                        jm[(k, off + c)] = jacs[t][(src, c)] * inv;
                        jm[(k, off + w + c)] = -jacs[t + 1][(src, c)] * inv;
                    }
                    if reactive {
                        inj[t].q[bus] - inj[t + 1].q[bus]
                    } else {
                        inj[t].p[bus] - inj[t + 1].p[bus]
                    }
                }
                Term::Hinge { bus, reactive, sign, bound } => {
                    let src = if reactive { n + bus } else { bus };
                    let v = if reactive { inj[t].q[bus] } else { inj[t].p[bus] };
                    let excess = sign * (v - bound);
                    if excess > 0.0 {
                        for c in 0..w {
                            jm[(k, off + c)] = sign * jacs[t][(src, c)] * inv;
                        }
                        excess
                    } else {
                        0.0
                    }
                }
            };
            r[k] = (value - row.target) * inv;
        }
        (r, jm)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub gradient_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 100, gradient_tol: 1e-6 }
    }
}

struct LmOutcome {
    x: DVector<f64>,
    objective: f64,
    gradient_inf: f64,
    iterations: usize,
    converged: bool,
}

/// Triangular factor of `[a | b]`: its leading block is `R` from `a = QR`
/// and its last column starts with `Qᵀ b`.
fn augmented_r(a: &faer::Mat<f64>) -> faer::Mat<f64> {
    a.qr().compute_thin_r()
}

/// Minimizer of `‖R δ + c‖² + damp ‖δ‖²` given `[R | c]` from [`augmented_r`].
fn damped_step(rc: &faer::Mat<f64>, n: usize, damp: f64) -> DVector<f64> {
    let k = rc.nrows();
    let sd = damp.sqrt();
    let stacked = faer::Mat::<f64>::from_fn(k + n, n + 1, |i, j| {
        if i < k {
            if j >= i { rc.read(i, j) } else { 0.0 }
        } else if j == i - k {
            sd
        } else {
            0.0
        }
    });
    let t = augmented_r(&stacked);
    let tri = DMatrix::from_fn(n, n, |i, j| if j >= i { t.read(i, j) } else { 0.0 });
    let rhs = DVector::from_fn(n, |i, _| -t.read(i, n));
    tri.solve_upper_triangular(&rhs).unwrap_or_else(|| DVector::zeros(n))
}

/// Levenberg–Marquardt on `Σ ω_k r_k(x)²`; accepted iterates never
/// increase the objective.
fn levenberg_marquardt(
    model: &Model,
    x0: &DVector<f64>,
    omega: &DVector<f64>,
    opts: LmOptions,
) -> LmOutcome {
    let horizon = model.horizon;
    let weighted = |x: &DVector<f64>| {
        let (r, j) = model.evaluate(x);
        let sw = omega.map(f64::sqrt);
        let r = r.component_mul(&sw);
        let mut j = j;
        for (k, mut row) in j.row_iter_mut().enumerate() {
            row *= sw[k];
        }
        (r, j)
    };
    let valid = |x: &DVector<f64>| {
        StateSequence::from_vector(x, horizon).slots().iter().all(BusState::is_valid)
    };
    let mut x = x0.clone();
    let (mut r, mut j) = weighted(&x);
    let mut f = r.norm_squared();
    let mut lambda = 1e-4;
    let mut grad_inf = f64::INFINITY;
    let mut converged = false;
    let mut it = 0;
    while it < opts.max_iterations {
        it += 1;
        // Steps come from orthogonal factorizations of the column-scaled
        // Jacobian, never from normal equations.
        let scale: DVector<f64> = DVector::from_iterator(
            j.ncols(),
            j.column_iter().map(|c| {
                let n = c.norm();
                if n > 1e-150 { 1.0 / n } else { 0.0 }
            }),
        );
        let mut js = j.clone();
        for (c, mut col) in js.column_iter_mut().enumerate() {
            col *= scale[c];
        }
        let g = js.tr_mul(&r);
        grad_inf = g.amax();
        if grad_inf <= opts.gradient_tol {
            converged = true;
            break;
        }
        let n = js.ncols();
        let rc = augmented_r(&faer::Mat::<f64>::from_fn(js.nrows(), n + 1, |i, c| {
            if c < n { js[(i, c)] } else { r[i] }
        }));
        // Gauss-Newton decrement relative to the objective.
        let decrement: f64 = (0..rc.nrows().min(n)).map(|i| rc.read(i, n).powi(2)).sum();
        if decrement <= 1e-12 * (1.0 + f) {
            converged = true;
            break;
        }
        let mut improved = false;
        while lambda < 1e16 {
            let step = damped_step(&rc, n, lambda).component_mul(&scale);
            let trial = &x + &step;
            if !valid(&trial) {
                lambda *= 10.0;
                continue;
            }
            let (tr, tj) = weighted(&trial);
            let tf = tr.norm_squared();
            if tf < f {
                let rel = (f - tf) / f.max(1e-300);
                let small_step = step.amax() <= 1e-13 * (1.0 + x.amax());
                x = trial;
                r = tr;
                j = tj;
                f = tf;
                lambda = (lambda / 10.0).max(1e-16);
                improved = true;
                if rel < 1e-15 || small_step {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            // No decrease possible at machine precision.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    LmOutcome { x, objective: f, gradient_inf: grad_inf, iterations: it, converged }
}

/// Solve the penalized problem from one start, with IRLS outer loops for
/// absolute-value penalties.
fn solve_from(model: &Model, x0: &DVector<f64>, opts: LmOptions) -> LmOutcome {
    let has_abs = model.rows.iter().any(|r| r.absolute);
    let mut omega = DVector::from_element(model.rows.len(), 1.0);
    if !has_abs {
        return levenberg_marquardt(model, x0, &omega, opts);
    }
    let mut x = x0.clone();
    let mut out = None;
    let mut total = 0;
    for _ in 0..20 {
        let res = levenberg_marquardt(model, &x, &omega, opts);
        total += res.iterations;
        let (r, _) = model.evaluate(&res.x);
        let shift = (&res.x - &x).amax();
        x = res.x.clone();
        for (k, row) in model.rows.iter().enumerate() {
            if row.absolute {
                omega[k] = 1.0 / r[k].abs().max(1e-6);
            }
        }
        out = Some(res);
        if shift <= 1e-10 {
            break;
        }
    }
    let mut out = out.expect("at least one IRLS pass");
    out.iterations = total;
    out
}

fn diagnostics_for(model: &Model, outcome: &LmOutcome, starts: usize) -> Diagnostics {
    let (r, _) = model.evaluate(&outcome.x);
    let rms = |g: Group| {
        let vals: Vec<f64> =
            model.rows.iter().zip(r.iter()).filter(|(row, _)| row.group == g).map(|(_, v)| v * v).collect();
        if vals.is_empty() {
            0.0
        } else {
            (vals.iter().sum::<f64>() / vals.len() as f64).sqrt()
        }
    };
    let objective = model
        .rows
        .iter()
        .zip(r.iter())
        .map(|(row, v)| if row.absolute { v.abs() } else { v * v })
        .sum();
    Diagnostics {
        objective,
        metering_rms: rms(Group::Metering),
        coupling_rms: rms(Group::Coupling),
        residual_inf: model
            .rows
            .iter()
            .zip(r.iter())
            .filter(|(row, _)| row.group != Group::Constraint)
            .map(|(row, v)| (v * row.sigma).abs())
            .fold(0.0, f64::max),
        gradient_inf: outcome.gradient_inf,
        iterations: outcome.iterations,
        converged: outcome.converged,
        starts,
        condition: None,
    }
}

/// Penalized weighted least-squares (or least-absolute-value) estimate of
/// the probing states. Starts are tried in order: caller-provided, power
/// flow with the load-box midpoint, linear model, flat refined per slot. The
/// search stops at the first start whose objective is at the noise level
/// (at most twice the number of metering and coupling rows); otherwise the
/// best local optimum is returned.
pub fn estimate_noisy(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    meas: &MeasurementSet,
    cfg: &PenaltyConfig,
    init: Option<&StateSequence>,
) -> Result<EstimationResult> {
    estimate_noisy_with(feeder, setup, meas, cfg, init, LmOptions::default())
}

pub fn estimate_noisy_with(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    meas: &MeasurementSet,
    cfg: &PenaltyConfig,
    init: Option<&StateSequence>,
    opts: LmOptions,
) -> Result<EstimationResult> {
    meas.validate(setup)?;
    cfg.validate(setup)?;
    if let Some(i) = init {
        if i.len() != setup.horizon() {
            return Err(Error::Dimension { expected: setup.horizon(), got: i.len() });
        }
    }
    let model = Model::new(feeder, setup, meas, cfg);

    let guess = cfg.load_box.as_ref().map(|b| b.midpoint());
    // A start whose objective is within the noise level of a correct fit
    // ends the search.
    let noise_rows = model.rows.iter().filter(|r| r.group != Group::Constraint).count();
    let acceptable = 2.0 * noise_rows as f64;
    let mut best: Option<LmOutcome> = None;
    let mut tried = 0;
    let mut run = |x0: DVector<f64>, best: &mut Option<LmOutcome>| {
        tried += 1;
        let out = solve_from(&model, &x0, opts);
        debug!("start finished: objective {:.6e}, {} iterations", out.objective, out.iterations);
        if best.as_ref().map_or(true, |b| out.objective < b.objective) {
            *best = Some(out);
        }
        best.as_ref().is_some_and(|b| b.objective <= acceptable)
    };
    let mut done = false;
    if let Some(i) = init {
        done = run(i.to_vector(), &mut best);
    }
    let refine = |start: StateSequence, iterations: usize| -> Result<DVector<f64>> {
        let single = setup.with_horizon(1)?;
        let mut per_slot = Vec::with_capacity(setup.horizon());
        for (t, s) in start.slots().iter().enumerate() {
            let one = MeasurementSet {
                mode: meas.mode,
                values: vec![meas.values[t].clone()],
                sigmas: vec![meas.sigmas[t].clone()],
            };
            let sub = Model::new(feeder, &single, &one, cfg);
            let out = levenberg_marquardt(
                &sub,
                &s.to_vector(),
                &DVector::from_element(sub.rows.len(), 1.0),
                LmOptions { max_iterations: iterations, ..opts },
            );
            per_slot.push(BusState::from_vector(out.x.as_slice()));
        }
        Ok(StateSequence(per_slot).to_vector())
    };
    // Each start is fitted slot by slot without coupling before the joint solve.
    if !done {
        done = run(refine(pf_warm_start(feeder, setup, meas, guess.as_ref())?, 30)?, &mut best);
    }
    if !done {
        done = run(refine(ldf_warm_start(feeder, setup, meas, guess.as_ref())?, 30)?, &mut best);
    }
    if !done {
        let flat = StateSequence(vec![BusState::flat(feeder); setup.horizon()]);
        run(refine(flat, 30)?, &mut best);
    }
    let best = best.expect("at least one start");
    if !best.objective.is_finite() {
        return Err(Error::EstimationDiverged { iterations: best.iterations, residual: best.objective });
    }
    let diag = diagnostics_for(&model, &best, tried);
    let states = StateSequence::from_vector(&best.x, setup.horizon());
    Ok(finish(feeder, setup, states, diag))
}

/// Weighted objective of the penalized problem at given states; exposed for
/// gradient and monotonicity checks.
pub fn penalized_objective(
    feeder: &FeederModel,
    setup: &ProbingSetup,
    meas: &MeasurementSet,
    cfg: &PenaltyConfig,
    states: &StateSequence,
) -> Result<(f64, DVector<f64>)> {
    meas.validate(setup)?;
    cfg.validate(setup)?;
    let model = Model::new(feeder, setup, meas, cfg);
    let (r, j) = model.evaluate(&states.to_vector());
    Ok((r.norm_squared(), j.tr_mul(&r) * 2.0))
}

/// Non-metered load estimates with their across-slot spread.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveredLoads {
    /// Across-slot average `[p_O; q_O]`, clipped to the load box if given.
    pub average: DVector<f64>,
    /// Largest minus smallest slot value, per entry.
    pub spread: DVector<f64>,
}

pub fn recover_loads(
    result: &EstimationResult,
    setup: &ProbingSetup,
    load_box: Option<&LoadUncertainty>,
) -> RecoveredLoads {
    let d = 2 * setup.o();
    let mut lo = DVector::from_element(d, f64::INFINITY);
    let mut hi = DVector::from_element(d, f64::NEG_INFINITY);
    for s in &result.slot_loads {
        for i in 0..d {
            lo[i] = lo[i].min(s[i]);
            hi[i] = hi[i].max(s[i]);
        }
    }
    let spread = if result.slot_loads.is_empty() { DVector::zeros(d) } else { hi - lo };
    let mut average = result.average_loads.clone();
    if let Some(b) = load_box {
        for i in 0..d {
            average[i] = average[i].clamp(b.lower[i], b.upper[i]);
        }
    }
    RecoveredLoads { average, spread }
}

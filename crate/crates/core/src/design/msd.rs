//! Max-sum diversity selection over the reduced library.
//!
//! Under `xᵀ1 = T` the objective `xᵀDx` equals `2T·cᵀx − 2‖Ỹx‖²`, which is
//! concave; the relaxation over `{0 ≤ x ≤ 1, xᵀ1 = T}` is a convex QP solved
//! by accelerated projected gradient, then rounded by Bernoulli sampling.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use super::library::CandidateLibrary;
use crate::error::{Error, Result};
use crate::ldf::LdfModel;
use crate::rng::{stream, task_rng};

/// Subset-count guard for [`msd_exhaustive`].
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    /// `D[ℓ][ℓ′] = ‖y_ℓ − y_ℓ′‖²`.
    pub d: DMatrix<f64>,
    /// Approximate states `Ỹ = [y_1 … y_L]`, `2N × L`.
    pub y_tilde: DMatrix<f64>,
    /// `c_ℓ = ‖y_ℓ‖²`.
    pub c: DVector<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    /// `Σ_{ℓ,ℓ′∈A} d(ℓ, ℓ′)`, both orderings counted.
    pub fn subset_value(&self, subset: &[usize]) -> f64 {
        let mut v = 0.0;
        for (a, &i) in subset.iter().enumerate() {
            for &j in &subset[a + 1..] {
                v += self.d[(i, j)];
            }
        }
        2.0 * v
    }

    /// Concave form `f(x) = 2T·cᵀx − 2‖Ỹx‖²` with `T = Σx`.
    pub fn relaxed_value(&self, x: &DVector<f64>, horizon: usize) -> f64 {
        let yx = &self.y_tilde * x;
        2.0 * horizon as f64 * self.c.dot(x) - 2.0 * yx.norm_squared()
    }
}

/// Pairwise distances through the weighted form
/// `(s − s′)ᵀ(KᵀK + MθᵀMθ)(s − s′)`.
pub fn distance_matrix(library: &CandidateLibrary, ldf: &LdfModel) -> Result<DistanceMatrix> {
    let l = library.len();
    if l < 2 {
        return Err(Error::InvalidInput(format!("need at least two candidates, got {l}")));
    }
    let map = ldf.probing_map();
    for s in library.candidates() {
        if s.len() != map.ncols() {
            return Err(Error::Dimension { expected: map.ncols(), got: s.len() });
        }
    }
    let gram = map.tr_mul(&map);
    let mut d = DMatrix::zeros(l, l);
    for i in 0..l {
        for j in i + 1..l {
            let diff = library.get(i) - library.get(j);
            let v = diff.dot(&(&gram * &diff));
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    let cands = DMatrix::from_columns(library.candidates());
    let y_tilde = &map * cands;
    let c = DVector::from_iterator(l, y_tilde.column_iter().map(|col| col.norm_squared()));
    Ok(DistanceMatrix { d, y_tilde, c })
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u128::MAX / 1024 {
            return u128::MAX;
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub value: f64,
}

/// Exact MSD by enumeration; ties go to the lexicographically smallest set.
pub fn msd_exhaustive(dm: &DistanceMatrix, horizon: usize) -> Result<Selection> {
    msd_exhaustive_with_limit(dm, horizon, EXHAUSTIVE_LIMIT)
}

pub fn msd_exhaustive_with_limit(
    dm: &DistanceMatrix,
    horizon: usize,
    limit: u128,
) -> Result<Selection> {
    let l = dm.len();
    if horizon == 0 || horizon > l {
        return Err(Error::InvalidInput(format!("cannot choose {horizon} of {l} candidates")));
    }
    let combos = binomial(l, horizon);
    if combos > limit {
        return Err(Error::SearchTooLarge { combinations: combos, limit });
    }
    let mut idx: Vec<usize> = (0..horizon).collect();
    let mut best = Selection { indices: idx.clone(), value: dm.subset_value(&idx) };
    loop {
        // Advance to the next combination in lexicographic order.
        let mut i = horizon;
        loop {
            if i == 0 {
                return Ok(best);
            }
            i -= 1;
            if idx[i] != i + l - horizon {
                break;
            }
            if i == 0 {
                return Ok(best);
            }
        }
        idx[i] += 1;
        for j in i + 1..horizon {
            idx[j] = idx[j - 1] + 1;
        }
        let v = dm.subset_value(&idx);
        if v > best.value {
            best = Selection { indices: idx.clone(), value: v };
        }
    }
}

/// Euclidean projection onto `{0 ≤ x ≤ 1, Σx = T}`.
///
/// `x_i = clip(v_i − τ, 0, 1)` with `τ` found exactly by sorting the
/// breakpoints `v_i − 1` and `v_i` of the piecewise-linear sum.
pub fn project_capped_simplex(v: &DVector<f64>, total: f64) -> DVector<f64> {
    let n = v.len();
    let sum_at = |tau: f64| v.iter().map(|&vi| (vi - tau).clamp(0.0, 1.0)).sum::<f64>();
    let mut bps: Vec<f64> = v.iter().flat_map(|&vi| [vi - 1.0, vi]).collect();
    bps.sort_by(|a, b| a.total_cmp(b));
    // sum_at is non-increasing in τ; find adjacent breakpoints bracketing `total`.
    let (mut lo, mut hi) = (0usize, bps.len() - 1);
    if sum_at(bps[lo]) <= total {
        return v.map(|vi| (vi - bps[0]).clamp(0.0, 1.0));
    }
    if sum_at(bps[hi]) >= total {
        return v.map(|vi| (vi - bps[hi]).clamp(0.0, 1.0));
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if sum_at(bps[mid]) >= total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (t0, t1) = (bps[lo], bps[hi]);
    let (s0, s1) = (sum_at(t0), sum_at(t1));
    let tau = if s0 == s1 { t0 } else { t0 + (s0 - total) * (t1 - t0) / (s0 - s1) };
    let mut x = v.map(|vi| (vi - tau).clamp(0.0, 1.0));
    // Remove rounding drift along the free coordinates.
    let drift = x.sum() - total;
    if drift.abs() > 1e-14 * n as f64 {
        let free: Vec<usize> = (0..n).filter(|&i| x[i] > 0.0 && x[i] < 1.0).collect();
        if !free.is_empty() {
            let share = drift / free.len() as f64;
            for i in free {
                x[i] = (x[i] - share).clamp(0.0, 1.0);
            }
        }
    }
    x
}

#[derive(Debug, Clone, Copy)]
pub struct RelaxOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for RelaxOptions {
    fn default() -> Self {
        Self { tolerance: 1e-6, max_iterations: 200_000 }
    }
}

#[derive(Debug, Clone)]
pub struct Relaxation {
    pub x: DVector<f64>,
    /// `f(x̂) = 2T·cᵀx̂ − 2‖Ỹx̂‖²`, an upper bound on the MSD optimum.
    pub value: f64,
    /// Projected-gradient fixed-point residual `‖x − Π(x − ∇h/Lip)‖∞`.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `2xᵀỸᵀỸx − 2T·cᵀx` over the capped simplex slice.
pub fn msd_relax(dm: &DistanceMatrix, horizon: usize, opts: RelaxOptions) -> Result<Relaxation> {
    let l = dm.len();
    if horizon == 0 || horizon > l {
        return Err(Error::InvalidInput(format!("cannot choose {horizon} of {l} candidates")));
    }
    let t = horizon as f64;
    if horizon == l {
        let x = DVector::from_element(l, 1.0);
        let value = dm.relaxed_value(&x, horizon);
        return Ok(Relaxation { x, value, kkt_residual: 0.0, iterations: 0, converged: true });
    }
    let gram = dm.y_tilde.tr_mul(&dm.y_tilde);
    let linear = &dm.c * (2.0 * t);
    let grad = |x: &DVector<f64>| &gram * x * 4.0 - &linear;
    let objective = |x: &DVector<f64>| 2.0 * x.dot(&(&gram * x)) - linear.dot(x);
    let lip = 4.0 * gram.symmetric_eigenvalues().amax().max(1e-300);
    let step = 1.0 / lip;
    let residual = |x: &DVector<f64>| {
        let g = grad(x);
        (x - project_capped_simplex(&(x - &g * step), t)).amax()
    };

    let mut x = DVector::from_element(l, t / l as f64);
    let mut z = x.clone();
    let mut momentum = 1.0f64;
    let mut fx = objective(&x);
    let mut res = residual(&x);
    let mut it = 0;
    while it < opts.max_iterations && res > opts.tolerance {
        it += 1;
        let g = grad(&z);
        let next = project_capped_simplex(&(&z - &g * step), t);
        let f_next = objective(&next);
        let m_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        if f_next > fx {
            // Adaptive restart on objective increase.
            z = x.clone();
            momentum = 1.0;
            continue;
        }
        z = &next + (&next - &x) * ((momentum - 1.0) / m_next);
        momentum = m_next;
        x = next;
        fx = f_next;
        if it % 10 == 0 {
            res = residual(&x);
        }
    }
    res = residual(&x);
    let converged = res <= opts.tolerance;
    if !converged {
        debug!("msd relaxation stopped at residual {res:.3e} after {it} iterations");
    }
    let value = dm.relaxed_value(&x, horizon);
    Ok(Relaxation { x, value, kkt_residual: res, iterations: it, converged })
}

#[derive(Debug, Clone, Serialize)]
pub struct Rounding {
    pub indices: Vec<usize>,
    pub value: f64,
    pub feasible_draws: usize,
    /// The greedy repair fallback produced the output.
    pub repaired: bool,
}

/// Bernoulli rounding with means `(1 − β)·x̂`; best feasible draw wins.
pub fn randomized_rounding(
    x_hat: &DVector<f64>,
    dm: &DistanceMatrix,
    horizon: usize,
    beta: f64,
    draws: usize,
    seed: u64,
) -> Result<Rounding> {
    let l = dm.len();
    if x_hat.len() != l {
        return Err(Error::Dimension { expected: l, got: x_hat.len() });
    }
    if draws == 0 || horizon == 0 || horizon > l || !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidInput("rounding needs draws ≥ 1, 1 ≤ T ≤ L, 0 ≤ β < 1".into()));
    }
    let mut rng = task_rng(seed, stream::ROUNDING, 0);
    let probs: Vec<f64> = x_hat.iter().map(|&x| ((1.0 - beta) * x).clamp(0.0, 1.0)).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut closest: Option<(Vec<usize>, usize, f64)> = None;
    let mut feasible = 0;
    for _ in 0..draws {
        let pick: Vec<usize> = (0..l).filter(|&i| rng.gen_bool(probs[i])).collect();
        let v = dm.subset_value(&pick);
        if pick.len() == horizon {
            feasible += 1;
            if best.as_ref().map_or(true, |(_, bv)| v > *bv) {
                best = Some((pick, v));
            }
        } else {
            let gap = pick.len().abs_diff(horizon);
            let better = match &closest {
                None => true,
                Some((_, g, cv)) => gap < *g || (gap == *g && v > *cv),
            };
            if better {
                closest = Some((pick, gap, v));
            }
        }
    }
    if let Some((indices, value)) = best {
        return Ok(Rounding { indices, value, feasible_draws: feasible, repaired: false });
    }
    let (start, _, _) = closest.expect("draws ≥ 1");
    log::info!("no rounding draw had exactly {horizon} elements; repairing greedily");
    let indices = greedy_repair(dm, start, horizon);
    let value = dm.subset_value(&indices);
    Ok(Rounding { indices, value, feasible_draws: 0, repaired: true })
}

/// Add the element with the largest marginal gain, or drop the one whose
/// removal costs least, until the set has exactly `horizon` elements.
pub fn greedy_repair(dm: &DistanceMatrix, mut set: Vec<usize>, horizon: usize) -> Vec<usize> {
    let gain = |set: &[usize], i: usize| set.iter().map(|&j| dm.d[(i, j)]).sum::<f64>();
    while set.len() < horizon {
        // From an empty set, start at the state farthest from flat.
        let gain = |set: &[usize], i: usize| if set.is_empty() { dm.c[i] } else { gain(set, i) };
        let cand = (0..dm.len())
            .filter(|i| !set.contains(i))
            .map(|i| (i, gain(&set, i)))
            .fold(None::<(usize, f64)>, |acc, (i, g)| match acc {
                Some((_, bg)) if bg >= g => acc,
                _ => Some((i, g)),
            })
            .expect("horizon ≤ L");
        set.push(cand.0);
    }
    while set.len() > horizon {
        let (pos, _) = set
            .iter()
            .enumerate()
            .map(|(p, &i)| (p, gain(&set, i)))
            .fold(None::<(usize, f64)>, |acc, (p, g)| match acc {
                Some((_, bg)) if bg <= g => acc,
                _ => Some((p, g)),
            })
            .expect("set is non-empty");
        set.remove(pos);
    }
    set.sort_unstable();
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_states(states: &[Vec<f64>]) -> DistanceMatrix {
        let y = DMatrix::from_columns(
            &states.iter().map(|s| DVector::from_column_slice(s)).collect::<Vec<_>>(),
        );
        let l = states.len();
        let d = DMatrix::from_fn(l, l, |i, j| (y.column(i) - y.column(j)).norm_squared());
        let c = DVector::from_fn(l, |i, _| y.column(i).norm_squared());
        DistanceMatrix { d, y_tilde: y, c }
    }

    #[test]
    fn collinear_extremes() {
        let e = [0.3, -0.1];
        let dm = from_states(&[vec![0.0, 0.0], vec![e[0], e[1]], vec![2.0 * e[0], 2.0 * e[1]]]);
        let sel = msd_exhaustive(&dm, 2).unwrap();
        assert_eq!(sel.indices, vec![0, 2]);
        let e2 = e[0] * e[0] + e[1] * e[1];
        assert!((sel.value - 2.0 * 4.0 * e2).abs() < 1e-14);
    }

    #[test]
    fn full_set_and_pairs() {
        let dm = from_states(&[vec![0.0], vec![1.0], vec![3.0], vec![-2.0]]);
        let all = msd_exhaustive(&dm, 4).unwrap();
        assert_eq!(all.indices, vec![0, 1, 2, 3]);
        assert!((all.value - dm.d.sum()).abs() < 1e-12);
        let pair = msd_exhaustive(&dm, 2).unwrap();
        assert_eq!(pair.indices, vec![2, 3]);
        let relax = msd_relax(&dm, 4, RelaxOptions::default()).unwrap();
        assert!(relax.x.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn ties_break_lexicographically() {
        let dm = from_states(&[vec![0.0], vec![1.0], vec![0.0], vec![1.0]]);
        assert_eq!(msd_exhaustive(&dm, 2).unwrap().indices, vec![0, 1]);
    }

    #[test]
    fn guard_rejects_large_searches() {
        let states: Vec<Vec<f64>> = (0..60).map(|i| vec![i as f64]).collect();
        let dm = from_states(&states);
        assert!(matches!(msd_exhaustive(&dm, 8), Err(Error::SearchTooLarge { .. })));
    }

    #[test]
    fn projection_hits_the_slice() {
        let v = DVector::from_vec(vec![0.3, 2.0, -1.0, 0.7, 0.1]);
        let x = project_capped_simplex(&v, 2.0);
        assert!((x.sum() - 2.0).abs() < 1e-12);
        assert!(x.iter().all(|&xi| (0.0..=1.0).contains(&xi)));
        let y = project_capped_simplex(&x, 2.0);
        assert!((x - y).amax() < 1e-12);
    }

    #[test]
    fn integral_rounding_without_shrink() {
        let dm = from_states(&[vec![0.0], vec![1.0], vec![3.0], vec![-2.0]]);
        let x = DVector::from_vec(vec![0.0, 1.0, 1.0, 0.0]);
        let r = randomized_rounding(&x, &dm, 2, 0.0, 5, 3).unwrap();
        assert_eq!(r.indices, vec![1, 2]);
        assert!(!r.repaired);
    }

    #[test]
    fn repair_when_no_draw_is_feasible() {
        let dm = from_states(&[vec![0.0], vec![1.0], vec![3.0], vec![-2.0]]);
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0]);
        let r = randomized_rounding(&x, &dm, 2, 0.1, 10, 3).unwrap();
        assert!(r.repaired);
        assert_eq!(r.indices.len(), 2);
        assert_eq!(r.indices, msd_exhaustive(&dm, 2).unwrap().indices);
    }
}

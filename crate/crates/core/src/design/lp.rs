//! Dense phase-1 simplex for feasibility of `{x ≥ 0 : A_eq x = b_eq, A_ub x ≤ b_ub}`.
//!
//! Every row is brought to a non-negative right-hand side; rows that cannot
//! start from a slack get an artificial variable, and the sum of artificials
//! (the total constraint violation) is minimized with Bland's rule.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    Feasible { violation: f64 },
    Infeasible { violation: f64 },
    /// The simplex hit its iteration cap or lost pivots.
    Failed(String),
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible { .. })
    }
}

pub const FEASIBILITY_TOL: f64 = 1e-8;
const PIVOT_TOL: f64 = 1e-11;

pub fn phase_one(
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    a_ub: &DMatrix<f64>,
    b_ub: &DVector<f64>,
) -> Feasibility {
    let nx = a_eq.ncols().max(a_ub.ncols());
    if (a_eq.nrows() > 0 && a_eq.ncols() != nx) || (a_ub.nrows() > 0 && a_ub.ncols() != nx) {
        return Feasibility::Failed("constraint matrices disagree on variable count".into());
    }
    let (me, mu) = (a_eq.nrows(), a_ub.nrows());
    let m = me + mu;
    // Columns: x (nx) | slacks (mu) | artificials (na) | rhs
    let needs_art: Vec<bool> =
        (0..m).map(|i| if i < me { true } else { b_ub[i - me] < 0.0 }).collect();
    let na = needs_art.iter().filter(|&&a| a).count();
    let width = nx + mu + na + 1;
    let rhs = width - 1;
    let mut tab = DMatrix::<f64>::zeros(m + 1, width);
    let mut basis = vec![0usize; m];
    let mut next_art = nx + mu;
    for i in 0..m {
        let (row, b) = if i < me {
            (a_eq.row(i).into_owned(), b_eq[i])
        } else {
            (a_ub.row(i - me).into_owned(), b_ub[i - me])
        };
        let sign = if b < 0.0 { -1.0 } else { 1.0 };
        for j in 0..nx {
            tab[(i, j)] = sign * row[j];
        }
        if i >= me {
            tab[(i, nx + i - me)] = sign;
        }
        tab[(i, rhs)] = sign * b;
        if needs_art[i] {
            tab[(i, next_art)] = 1.0;
            basis[i] = next_art;
            next_art += 1;
        } else {
            basis[i] = nx + i - me;
        }
    }
    // Objective row holds reduced costs of min Σ artificials, expressed in
    // the starting basis: c_j − Σ_{artificial rows} a_ij.
    for i in 0..m {
        if needs_art[i] {
            for j in 0..width {
                if j < nx + mu || j == rhs {
                    let v = tab[(i, j)];
                    tab[(m, j)] -= v;
                }
            }
        }
    }

    let max_iter = 50 * (m + width) + 100;
    for _ in 0..max_iter {
        // Bland: first column with a negative reduced cost.
        let enter = (0..rhs).find(|&j| tab[(m, j)] < -PIVOT_TOL);
        let Some(col) = enter else {
            let violation = (-tab[(m, rhs)]).max(0.0);
            return if violation <= FEASIBILITY_TOL {
                Feasibility::Feasible { violation }
            } else {
                Feasibility::Infeasible { violation }
            };
        };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            let a = tab[(i, col)];
            if a > PIVOT_TOL {
                let ratio = tab[(i, rhs)] / a;
                match leave {
                    None => leave = Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - 1e-14 || (ratio <= lr + 1e-14 && basis[i] < basis[li]) {
                            leave = Some((i, ratio));
                        }
                    }
                }
            }
        }
        let Some((row, _)) = leave else {
            // Phase-1 objective is bounded below by zero.
            return Feasibility::Failed("unbounded phase-1 direction".into());
        };
        pivot(&mut tab, row, col);
        basis[row] = col;
    }
    Feasibility::Failed("simplex iteration limit reached".into())
}

fn pivot(tab: &mut DMatrix<f64>, row: usize, col: usize) {
    let p = tab[(row, col)];
    let width = tab.ncols();
    for j in 0..width {
        tab[(row, j)] /= p;
    }
    for i in 0..tab.nrows() {
        if i == row {
            continue;
        }
        let f = tab[(i, col)];
        if f != 0.0 {
            for j in 0..width {
                let v = tab[(row, j)];
                tab[(i, j)] -= f * v;
            }
        }
    }
}

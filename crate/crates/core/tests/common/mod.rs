#![allow(dead_code)]

use gridprobe::design::{DistanceMatrix, LoadUncertainty, VoltageBand};
use gridprobe::feeder::{BusRecord, FeederDocument, FeederModel, LineRecord};
use gridprobe::ldf::LdfModel;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

/// Radial feeder with `n` non-substation buses, random parents and
/// impedances, ids shuffled in the document.
pub fn random_tree<R: Rng>(rng: &mut R, n: usize, charging: bool) -> FeederDocument {
    let mut ids: Vec<u32> = (0..=n as u32).map(|i| 100 + 7 * i).collect();
    ids.shuffle(rng);
    let mut lines = Vec::with_capacity(n);
    for i in 1..=n {
        let parent = rng.gen_range(0..i);
        lines.push(LineRecord {
            from: ids[parent],
            to: ids[i],
            r: rng.gen_range(0.002..0.03),
            x: rng.gen_range(0.002..0.03),
            b: if charging { rng.gen_range(0.0..2e-3) } else { 0.0 },
        });
    }
    let mut buses: Vec<BusRecord> =
        ids.iter().enumerate().map(|(i, &id)| BusRecord { id, substation: i == 0 }).collect();
    buses.shuffle(rng);
    lines.shuffle(rng);
    FeederDocument { buses, lines, base_voltage: 1.0 }
}

pub fn random_feeder<R: Rng>(rng: &mut R, n: usize) -> FeederModel {
    FeederModel::from_document(&random_tree(rng, n, false)).unwrap()
}

/// Central differences of a vector function.
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..x.len())
        .map(|j| {
            let mut a = x.clone();
            let mut b = x.clone();
            a[j] += h;
            b[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// Largest entry-wise error relative to the largest analytic entry.
pub fn relative_mismatch(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).amax() / analytic.amax().max(1.0)
}

/// Compliance by brute force: the voltage map is affine in the loads, so
/// the box is compliant iff all of its vertices are.
pub fn vertex_compliant(candidate: &DVector<f64>, ldf: &LdfModel, b: &LoadUncertainty, band: VoltageBand) -> bool {
    let d = b.dim();
    (0u64..1 << d).all(|mask| {
        let s_o = DVector::from_fn(d, |i, _| if mask >> i & 1 == 1 { b.upper[i] } else { b.lower[i] });
        let u = ldf.approx_magnitudes(candidate, &s_o).unwrap();
        u.iter().all(|&v| v >= band.lower && v <= band.upper)
    })
}

/// Distance matrix built from explicit points, the columns of `y`.
pub fn distance_from_points(y: DMatrix<f64>) -> DistanceMatrix {
    let l = y.ncols();
    let d = DMatrix::from_fn(l, l, |i, j| (y.column(i) - y.column(j)).norm_squared());
    let c = DVector::from_fn(l, |i, _| y.column(i).norm_squared());
    DistanceMatrix { d, y_tilde: y, c }
}

pub fn random_points<R: Rng>(rng: &mut R, dim: usize, l: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dim, l, |_, _| rng.gen_range(-1.0..1.0))
}

/// Best subset value by enumeration, independent of the crate's search.
pub fn brute_force_msd(dm: &DistanceMatrix, t: usize) -> f64 {
    let l = dm.len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..1 << l {
        if mask.count_ones() as usize != t {
            continue;
        }
        let set: Vec<usize> = (0..l).filter(|i| mask >> i & 1 == 1).collect();
        let mut v = 0.0;
        for &i in &set {
            for &j in &set {
                v += dm.d[(i, j)];
            }
        }
        best = best.max(v);
    }
    best
}

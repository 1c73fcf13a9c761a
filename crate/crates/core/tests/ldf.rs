mod common;

use common::*;
use gridprobe::acpf::{injection_jacobian, solve_pf, BusState, Injections};
use gridprobe::feeder::{DataMode, FeederModel, ProbingSetup};
use gridprobe::harness::bundled_feeder;
use gridprobe::ldf::{build_ldf, LdfModel};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn split(setup: &ProbingSetup, inj: &Injections) -> (DVector<f64>, DVector<f64>) {
    let pick = |buses: &[usize]| {
        let k = buses.len();
        DVector::from_fn(2 * k, |i, _| if i < k { inj.p[buses[i]] } else { inj.q[buses[i - k]] })
    };
    (pick(setup.probing()), pick(setup.non_metered()))
}

fn ac_deviation(feeder: &FeederModel, inj: &Injections) -> DVector<f64> {
    let s = solve_pf(feeder, inj).unwrap().state;
    let n = feeder.n();
    DVector::from_fn(2 * n, |i, _| if i < n { s.u[i] - feeder.base_voltage() } else { s.theta[i - n] })
}

fn setup_with_o(feeder: &FeederModel, o: usize) -> ProbingSetup {
    let ids = feeder.bus_ids();
    ProbingSetup::from_non_metered(feeder, &ids[ids.len() - o..], 1, DataMode::Phasor).unwrap()
}

#[test]
fn error_is_second_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let feeder = random_feeder(&mut rng, 8);
        let setup = setup_with_o(&feeder, 3);
        let ldf = build_ldf(&feeder, &setup).unwrap();
        let dir = Injections {
            p: DVector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0)),
            q: DVector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let err = |eps: f64| {
            let inj = Injections { p: &dir.p * eps, q: &dir.q * eps };
            let (sm, so) = split(&setup, &inj);
            (ldf.approx_state(&sm, &so).unwrap() - ac_deviation(&feeder, &inj)).norm()
        };
        let ratio = err(1e-3) / err(5e-4);
        assert!((ratio - 4.0).abs() <= 0.8, "ratio {ratio}");
    }
}

#[test]
fn blocks_match_whole_sensitivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let feeder = random_feeder(&mut rng, 10);
    let setup = setup_with_o(&feeder, 4);
    let ldf = build_ldf(&feeder, &setup).unwrap();
    let jac = injection_jacobian(&feeder, &BusState::flat(&feeder)).lu();
    for _ in 0..20 {
        let inj = Injections {
            p: DVector::from_fn(10, |_, _| rng.gen_range(-1.0..1.0)),
            q: DVector::from_fn(10, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let (sm, so) = split(&setup, &inj);
        let whole = jac.solve(&inj.to_vector()).unwrap();
        let blocks = ldf.approx_state(&sm, &so).unwrap();
        assert!((whole - blocks).amax() < 1e-12 * (1.0 + inj.to_vector().amax()));
    }
}

fn model() -> (FeederModel, ProbingSetup, LdfModel) {
    let feeder = bundled_feeder();
    let setup =
        ProbingSetup::from_non_metered(&feeder, &[810, 822, 826, 838, 840, 848], 1, DataMode::Phasor).unwrap();
    let ldf = build_ldf(&feeder, &setup).unwrap();
    (feeder, setup, ldf)
}

#[test]
fn bundled_feeder_linearization_quality() {
    let (feeder, setup, ldf) = model();
    let n = feeder.n() as f64;
    // 0.05 pu of total consumption, 0.9 power factor, spread evenly.
    let p = -0.05 / n;
    let inj = Injections {
        p: DVector::from_element(feeder.n(), p),
        q: DVector::from_element(feeder.n(), p * 0.9f64.acos().tan()),
    };
    let (sm, so) = split(&setup, &inj);
    let ac = ac_deviation(&feeder, &inj);
    let rel = (ldf.approx_state(&sm, &so).unwrap() - &ac).norm() / ac.norm();
    assert!(rel <= 0.05, "relative error {rel:.4}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_and_homogeneous(seed in any::<u64>(), a in -3.0f64..3.0) {
        let (_, setup, ldf) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |k: usize| DVector::from_fn(k, |_, _| rng.gen_range(-0.5..0.5));
        let (m2, o2) = (2 * setup.m(), 2 * setup.o());
        let (s1, o1, s2, oo2) = (v(m2), v(o2), v(m2), v(o2));
        let y = |s: &DVector<f64>, o: &DVector<f64>| ldf.approx_state(s, o).unwrap();
        let lhs = y(&(&s1 * a + &s2), &(&o1 * a + &oo2));
        let rhs = y(&s1, &o1) * a + y(&s2, &oo2);
        prop_assert!((lhs - rhs).amax() < 1e-12);
        // Probe differences do not depend on the non-metered loads.
        let d1 = y(&s1, &o1) - y(&s2, &o1);
        let d2 = y(&s1, &oo2) - y(&s2, &oo2);
        prop_assert!((d1 - d2).amax() < 1e-13);
    }
}

#[test]
fn zero_injection_predicts_flat() {
    let (feeder, setup, ldf) = model();
    let u = ldf
        .approx_magnitudes(&DVector::zeros(2 * setup.m()), &DVector::zeros(2 * setup.o()))
        .unwrap();
    assert!(u.iter().all(|&x| x == feeder.base_voltage()));
}

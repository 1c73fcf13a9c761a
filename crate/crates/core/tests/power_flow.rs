mod common;

use common::*;
use gridprobe::acpf::{
    assemble_p2l_jacobian, injection_jacobian, injections, p2l_map, solve_pf, BusState, StateSequence,
};
use gridprobe::feeder::{DataMode, FeederModel, ProbingSetup};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn index_of(feeder: &FeederModel, id: u32) -> usize {
    if id == feeder.substation_id() {
        0
    } else {
        feeder.position(id).unwrap() + 1
    }
}

fn random_state<R: Rng>(rng: &mut R, n: usize) -> BusState {
    BusState {
        u: DVector::from_fn(n, |_, _| rng.gen_range(0.95..1.05)),
        theta: DVector::from_fn(n, |_, _| rng.gen_range(-0.02..0.02)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn admittance_is_incidence_product(seed in any::<u64>(), n in 1usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = random_tree(&mut rng, n, true);
        let feeder = FeederModel::from_document(&doc).unwrap();
        // Y = Aᵀ diag(y) A plus half the charging at both ends.
        let mut a = DMatrix::<Complex64>::zeros(n, n + 1);
        let mut y = DMatrix::<Complex64>::zeros(n, n);
        let mut shunt = DVector::<Complex64>::zeros(n + 1);
        for (k, l) in doc.lines.iter().enumerate() {
            let (f, t) = (index_of(&feeder, l.from), index_of(&feeder, l.to));
            a[(k, f)] = Complex64::new(1.0, 0.0);
            a[(k, t)] = Complex64::new(-1.0, 0.0);
            y[(k, k)] = Complex64::new(l.r, l.x).inv();
            shunt[f] += Complex64::new(0.0, l.b / 2.0);
            shunt[t] += Complex64::new(0.0, l.b / 2.0);
        }
        let expected = a.transpose() * y * a + DMatrix::from_diagonal(&shunt);
        let got = feeder.admittance();
        let err = (got - &expected).map(|z| z.norm()).max();
        prop_assert!(err <= 1e-12 * expected.map(|z| z.norm()).max());
    }

    #[test]
    fn power_flow_round_trip(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feeder = random_feeder(&mut rng, n);
        let truth = random_state(&mut rng, n);
        let sol = solve_pf(&feeder, &injections(&feeder, &truth)).unwrap();
        prop_assert!((&sol.state.u - &truth.u).amax() < 1e-8);
        prop_assert!((&sol.state.theta - &truth.theta).amax() < 1e-8);
    }

    #[test]
    fn relabeling_buses_leaves_voltages_unchanged(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = random_tree(&mut rng, n, false);
        let mut shuffled = doc.clone();
        shuffled.buses.reverse();
        shuffled.lines.reverse();
        let a = FeederModel::from_document(&doc).unwrap();
        let b = FeederModel::from_document(&shuffled).unwrap();
        let loads: Vec<(u32, f64, f64)> = a
            .bus_ids()
            .iter()
            .map(|&id| (id, -rng.gen_range(0.0..0.3), -rng.gen_range(0.0..0.1)))
            .collect();
        let solve = |f: &FeederModel| {
            let mut inj = gridprobe::acpf::Injections::zeros(f.n());
            for &(id, p, q) in &loads {
                let k = f.position(id).unwrap();
                inj.p[k] = p;
                inj.q[k] = q;
            }
            solve_pf(f, &inj).unwrap().state
        };
        let (sa, sb) = (solve(&a), solve(&b));
        for &(id, _, _) in &loads {
            let (ka, kb) = (a.position(id).unwrap(), b.position(id).unwrap());
            prop_assert!((sa.u[ka] - sb.u[kb]).abs() < 1e-10);
            prop_assert!((sa.theta[ka] - sb.theta[kb]).abs() < 1e-10);
        }
    }
}

#[test]
fn injection_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [1, 4, 9] {
        let feeder = random_feeder(&mut rng, n);
        let s = random_state(&mut rng, n);
        let f = |x: &DVector<f64>| injections(&feeder, &BusState::from_vector(x.as_slice())).to_vector();
        let num = fd_jacobian(f, &s.to_vector(), 1e-6);
        let err = relative_mismatch(&injection_jacobian(&feeder, &s), &num);
        assert!(err < 1e-6, "n = {n}: mismatch {err:.2e}");
    }
}

#[test]
fn p2l_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let feeder = random_feeder(&mut rng, 7);
    let ids = feeder.bus_ids().to_vec();
    for mode in [DataMode::Phasor, DataMode::Nonphasor] {
        for t in [1, 3] {
            let setup = ProbingSetup::from_non_metered(&feeder, &ids[..2], t, mode).unwrap();
            let states = StateSequence((0..t).map(|_| random_state(&mut rng, 7)).collect());
            let f = |x: &DVector<f64>| p2l_map(&feeder, &setup, &StateSequence::from_vector(x, t));
            let num = fd_jacobian(f, &states.to_vector(), 1e-6);
            let jac = assemble_p2l_jacobian(&feeder, &setup, &states).unwrap();
            let err = relative_mismatch(&jac.matrix, &num);
            assert!(err < 1e-6, "{mode:?} T = {t}: mismatch {err:.2e}");
        }
    }
}

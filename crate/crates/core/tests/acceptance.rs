mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use gridprobe::acpf::{assemble_p2l_jacobian, injection_jacobian, injections, p2l_map, BusState, StateSequence};
use gridprobe::design::*;
use gridprobe::estimator::Snr;
use gridprobe::feeder::{DataMode, ProbingSetup};
use gridprobe::harness::*;
use gridprobe::ldf::build_ldf;
use gridprobe::rng::{stream, task_rng};
use gridprobe::Error;
use nalgebra::DVector;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PLACEMENT_A: [u32; 8] = [810, 822, 826, 838, 840, 848, 856, 864];
const PLACEMENT_10: [u32; 10] = [802, 810, 812, 818, 822, 826, 828, 838, 840, 844];
const PLACEMENT_17: [u32; 17] =
    [802, 810, 812, 818, 822, 826, 828, 838, 840, 844, 848, 850, 852, 856, 858, 860, 888];
const PLACEMENT_6: [u32; 6] = [810, 822, 826, 838, 840, 848];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn scenario(cfg: ScenarioConfig) -> Scenario {
    Scenario::resolve(cfg, Path::new(env!("CARGO_MANIFEST_DIR")).join("data").as_path()).unwrap()
}

fn bundled(o: &[u32], horizon: usize, mode: DataMode) -> ScenarioConfig {
    ScenarioConfig::bundled(o.to_vec(), horizon, mode)
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

fn max_rel(est: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    est.iter().zip(truth.iter()).map(|(e, t)| (e - t).abs() / t.abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Verdict {
    let clock = Instant::now();
    let mut cfg = bundled(&PLACEMENT_A, 4, DataMode::Phasor);
    cfg.snr = SnrPair { metered: Snr::INFINITE, loads: Snr::INFINITE };
    let sc = scenario(cfg);
    let trial = run_trial(&sc, trial_seed(sc.config.seed, 0)).unwrap();
    let err = max_rel(&trial.loads.average, &trial.base_loads);
    let elapsed = clock.elapsed();
    verdict(
        err <= 1e-6 && within(Duration::from_secs(10), elapsed),
        format!("max relative load error {err:.2e} (limit 1e-6), {:.2} s (limit 10 s)", elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Verdict {
    let clock = Instant::now();
    let mut cfg = bundled(&PLACEMENT_17, 4, DataMode::Phasor);
    cfg.gamma = 50.0;
    let sc = scenario(cfg);
    let mut wins = 0;
    let mut lines = Vec::new();
    for rep in 0..10u64 {
        let d = design_probes(&sc, rep).unwrap();
        let designed = setpoint_condition(&sc, &sc.setup, &d.setpoints).unwrap();
        let l = d.reduced.len();
        let mut rng = task_rng(rep, stream::SUBSET, 0);
        let mut random: Vec<f64> = (0..100)
            .map(|_| {
                let pick: Vec<DVector<f64>> =
                    sample(&mut rng, l, sc.setup.horizon()).into_iter().map(|i| d.reduced.get(i).clone()).collect();
                setpoint_condition(&sc, &sc.setup, &pick).unwrap()
            })
            .collect();
        random.sort_by(f64::total_cmp);
        let p10 = percentile(&random, 0.1);
        if designed <= p10 {
            wins += 1;
        }
        lines.push(format!("{designed:.2e}/{p10:.2e}"));
    }
    let elapsed = clock.elapsed();
    verdict(
        wins >= 8 && within(Duration::from_secs(300), elapsed),
        format!(
            "designed <= random p10 in {wins}/10 repetitions (need 8), {:.1} s; designed/p10: {}",
            elapsed.as_secs_f64(),
            lines.join(" ")
        ),
    )
}

fn criterion_3() -> Verdict {
    let mut cfg = bundled(&PLACEMENT_A, 4, DataMode::Phasor);
    cfg.gamma = 50.0;
    let sc = scenario(cfg);
    let gammas = [1.0, 2.0, 5.0, 20.0];
    let bands = [0.05, 0.075, 0.1, 0.15];
    let report = run_violation_sweep(&sc, &gammas, &bands).unwrap();
    let pct = report.table("report").unwrap().values("violation_pct").unwrap();
    let at = |b: usize, g: usize| pct[b * gammas.len() + g].unwrap();
    let mut monotone = true;
    for b in 0..bands.len() {
        for g in 0..gammas.len() {
            if g + 1 < gammas.len() && at(b, g + 1) > at(b, g) {
                monotone = false;
            }
            if b + 1 < bands.len() && at(b + 1, g) > at(b, g) {
                monotone = false;
            }
        }
    }
    let tight = at(2, gammas.len() - 1);
    let grid: Vec<String> =
        (0..bands.len()).map(|b| format!("±{}: {:?}", bands[b], (0..4).map(|g| at(b, g)).collect::<Vec<_>>())).collect();
    verdict(
        monotone && tight > 0.0,
        format!("monotone {monotone}, ±10% band at gamma 20: {tight}%; {}", grid.join("; ")),
    )
}

fn condition_medians(o: &[u32], horizon: usize) -> (f64, f64) {
    let mut cfg = bundled(o, horizon, DataMode::Nonphasor);
    cfg.seed = 5;
    let r = run_condition_study(&scenario(cfg), 1000).unwrap();
    (r.summary("cond_phasor").unwrap().median, r.summary("cond_nonphasor").unwrap().median)
}

fn criterion_4() -> Verdict {
    let clock = Instant::now();
    let mut phasor_lower = true;
    let mut shifts = Vec::new();
    let mut lines = Vec::new();
    for o in [&PLACEMENT_10[..], &PLACEMENT_17[..]] {
        let (p2, n2) = condition_medians(o, 2);
        let (p4, n4) = condition_medians(o, 4);
        phasor_lower &= p2 < n2 && p4 < n4;
        shifts.push(n2 / n4);
        lines.push(format!("O={}: T2 {p2:.2e}/{n2:.2e}, T4 {p4:.2e}/{n4:.2e}", o.len()));
    }
    let elapsed = clock.elapsed();
    verdict(
        shifts[0] >= 10.0 && phasor_lower && within(Duration::from_secs(600), elapsed),
        format!(
            "non-phasor T2/T4 median ratio {:.1} (need 10), phasor below non-phasor {phasor_lower}, {:.0} s; phasor/non-phasor medians {}",
            shifts[0],
            elapsed.as_secs_f64(),
            lines.join("; ")
        ),
    )
}

fn criterion_5() -> Verdict {
    let base = ScenarioConfig::from_json_str(
        &std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("data/scenario_t4_o8.json")).unwrap(),
    )
    .unwrap();
    let width = |use_msd: bool| {
        let mut cfg = base.clone();
        cfg.use_msd = use_msd;
        let r = run_p2l_montecarlo(&scenario(cfg)).unwrap();
        let s = r.summary("p_pct").unwrap();
        (s.inter_decile_width(), s.p10, s.p90)
    };
    let (with, w10, w90) = width(true);
    let (without, r10, r90) = width(false);
    verdict(
        with < without,
        format!(
            "{} trials: p10-p90 width {with:.3}% with MSD [{w10:.2}, {w90:.2}] vs {without:.3}% random [{r10:.2}, {r90:.2}]",
            base.trials
        ),
    )
}

fn criterion_6() -> Verdict {
    let medians: Vec<f64> = [40.0, 60.0, 80.0]
        .iter()
        .map(|&db| {
            let mut cfg = bundled(&PLACEMENT_6, 2, DataMode::Nonphasor);
            cfg.trials = 20;
            cfg.snr = SnrPair { metered: Snr::Db(db), loads: Snr::Db(60.0) };
            run_p2l_montecarlo(&scenario(cfg)).unwrap().summary("state_rmse").unwrap().median
        })
        .collect();
    verdict(
        medians[0] > medians[1] && medians[1] > medians[2],
        format!("median state RMSE at 40/60/80 dB: {:.3e} {:.3e} {:.3e}", medians[0], medians[1], medians[2]),
    )
}

fn criterion_7() -> Verdict {
    let abs_error = |mode: DataMode| {
        let mut cfg = bundled(&PLACEMENT_A, 4, mode);
        cfg.trials = 50;
        let r = run_p2l_montecarlo(&scenario(cfg)).unwrap();
        let t = r.table("bus_errors").unwrap();
        let mut v: Vec<f64> =
            t.values("p_pct").unwrap().into_iter().chain(t.values("q_pct").unwrap()).flatten().map(f64::abs).collect();
        v.sort_by(f64::total_cmp);
        median(&v)
    };
    let phasor = abs_error(DataMode::Phasor);
    let nonphasor = abs_error(DataMode::Nonphasor);
    verdict(
        phasor < nonphasor,
        format!("50 trials: median |load error| {phasor:.3}% phasor vs {nonphasor:.3}% non-phasor"),
    )
}

fn farkas_disagreements() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut wrong = 0;
    for _ in 0..200 {
        let n = rng.gen_range(3..9);
        let feeder = random_feeder(&mut rng, n);
        let o = rng.gen_range(1..=4.min(n - 1));
        let setup = ProbingSetup::from_non_metered(&feeder, &feeder.bus_ids()[..o], 1, DataMode::Phasor).unwrap();
        let ldf = build_ldf(&feeder, &setup).unwrap();
        let candidate = DVector::from_fn(2 * setup.m(), |_, _| rng.gen_range(-0.3..0.3));
        let nominal = DVector::from_fn(2 * o, |_, _| -rng.gen_range(0.05..0.5));
        let b = LoadUncertainty::from_gamma(&nominal, rng.gen_range(1.0..10.0)).unwrap();
        let band = VoltageBand::symmetric(1.0, rng.gen_range(0.002..0.03)).unwrap();
        let lp = check_compliance(&candidate, &ldf, &b, band).unwrap() == Compliance::Compliant;
        if lp != vertex_compliant(&candidate, &ldf, &b, band) {
            wrong += 1;
        }
    }
    wrong
}

fn rounding_successes() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    (0..200u64)
        .filter(|&k| {
            let l = rng.gen_range(4..=12);
            let t = rng.gen_range(2..l);
            let dim = rng.gen_range(2..6);
            let dm = distance_from_points(random_points(&mut rng, dim, l));
            let relax = msd_relax(&dm, t, RelaxOptions::default()).unwrap();
            let r = randomized_rounding(&relax.x, &dm, t, 0.1, 100, k).unwrap();
            r.value >= 0.75 * brute_force_msd(&dm, t)
        })
        .count()
}

fn worst_jacobian_mismatch() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    let mut worst = 0.0f64;
    let state = |rng: &mut ChaCha8Rng, n: usize| BusState {
        u: DVector::from_fn(n, |_, _| rng.gen_range(0.95..1.05)),
        theta: DVector::from_fn(n, |_, _| rng.gen_range(-0.02..0.02)),
    };
    for n in [2, 5, 9] {
        let feeder = random_feeder(&mut rng, n);
        let s = state(&mut rng, n);
        let f = |x: &DVector<f64>| injections(&feeder, &BusState::from_vector(x.as_slice())).to_vector();
        worst = worst.max(relative_mismatch(&injection_jacobian(&feeder, &s), &fd_jacobian(f, &s.to_vector(), 1e-6)));
        let ids = feeder.bus_ids().to_vec();
        for mode in [DataMode::Phasor, DataMode::Nonphasor] {
            for t in [1, 2, 4] {
                let setup = ProbingSetup::from_non_metered(&feeder, &ids[..1], t, mode).unwrap();
                let states = StateSequence((0..t).map(|_| state(&mut rng, n)).collect());
                let g = |x: &DVector<f64>| p2l_map(&feeder, &setup, &StateSequence::from_vector(x, t));
                let jac = assemble_p2l_jacobian(&feeder, &setup, &states).unwrap();
                worst = worst.max(relative_mismatch(&jac.matrix, &fd_jacobian(g, &states.to_vector(), 1e-6)));
            }
        }
    }
    worst
}

fn worst_concavity_gap() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(84);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let l = rng.gen_range(2..25);
        let dim = rng.gen_range(1..8);
        let dm = distance_from_points(random_points(&mut rng, dim, l));
        let t = rng.gen_range(1..=l);
        let chosen = sample(&mut rng, l, t).into_vec();
        let x = DVector::from_fn(l, |i, _| if chosen.contains(&i) { 1.0 } else { 0.0 });
        let lhs = x.dot(&(&dm.d * &x));
        worst = worst.max((lhs - dm.relaxed_value(&x, t)).abs() / lhs.abs().max(1e-300));
    }
    worst
}

fn criterion_8() -> Verdict {
    let clock = Instant::now();
    let wrong = farkas_disagreements();
    let rounded = rounding_successes();
    let jac = worst_jacobian_mismatch();
    let gap = worst_concavity_gap();
    let elapsed = clock.elapsed();
    verdict(
        wrong == 0 && rounded >= 190 && jac <= 1e-6 && gap <= 1e-9 && within(Duration::from_secs(300), elapsed),
        format!(
            "Farkas disagreements {wrong}/200, rounding >= 0.75 f* on {rounded}/200, Jacobian mismatch {jac:.1e}, concavity gap {gap:.1e}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_9() -> Verdict {
    let exact = SnrPair { metered: Snr::INFINITE, loads: Snr::INFINITE };
    let mut cfg = bundled(&[822, 864], 1, DataMode::Phasor);
    cfg.snr = exact;
    let trial = run_trial(&scenario(cfg), 1).unwrap();
    let err = max_rel(&trial.loads.average, &trial.base_loads);
    let ids = bundled_feeder().bus_ids()[..20].to_vec();
    let mut cfg = bundled(&ids, 1, DataMode::Phasor);
    cfg.snr = exact;
    let oversized = Scenario::resolve(cfg, Path::new(".")).and_then(|sc| run_trial(&sc, 1));
    let raised = matches!(oversized, Err(Error::Unobservable { .. }) | Err(Error::Singular(_)));
    let what = match &oversized {
        Ok(_) => "no error".to_string(),
        Err(e) => e.to_string(),
    };
    verdict(
        err <= 1e-6 && raised,
        format!("T=1 O=2 relative load error {err:.2e}; O=20: {what}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("noiseless round trip", criterion_1),
        ("MSD conditioning", criterion_2),
        ("violation sweep trends", criterion_3),
        ("condition-number shift", criterion_4),
        ("MSD ablation", criterion_5),
        ("SNR trend", criterion_6),
        ("phasor dominance", criterion_7),
        ("oracle suites", criterion_8),
        ("single-slot mode", criterion_9),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != k + 1) {
            continue;
        }
        let v = run();
        println!("{} criterion {} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, k + 1, v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use gridprobe::acpf::{solve_pf, Injections};
use gridprobe::feeder::{DataMode, FeederModel};
use gridprobe::harness::{
    design_probes, run_condition_study, run_p2l_montecarlo, run_trial, run_violation_sweep, Cell, Scenario,
    ScenarioConfig, Table, BUNDLED_FEEDER_NAME,
};
use gridprobe::{Error, Result};

#[derive(Parser)]
#[command(name = "gridprobe", version, about = "Probing design and load recovery for distribution feeders")]
struct Cli {
    /// Master seed; overrides the scenario file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for outputs.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an AC power flow for given bus injections.
    Powerflow {
        /// Feeder JSON, or the bundled feeder name.
        feeder: PathBuf,
        /// CSV with columns bus,p,q (net injection, pu).
        injections: PathBuf,
    },
    /// Design the probing setpoints of a scenario.
    Design { scenario: PathBuf },
    /// Design, simulate and estimate one probing experiment.
    Estimate {
        scenario: PathBuf,
        #[arg(long)]
        no_msd: bool,
        #[arg(long)]
        mode: Option<DataMode>,
    },
    /// Condition numbers at random state sequences in both data modes.
    Observability {
        scenario: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Monte Carlo load-recovery experiment.
    Montecarlo {
        scenario: PathBuf,
        #[arg(long)]
        no_msd: bool,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Network-compliance violation sweep over load boxes and voltage bands.
    Violations {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 5.0, 20.0])]
        gammas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.075, 0.1, 0.15])]
        bands: Vec<f64>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<(ScenarioConfig, PathBuf)> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = ScenarioConfig::from_json_str(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let (cfg, base) = load_config(path, seed)?;
    Scenario::resolve(cfg, &base)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_feeder(path: &Path) -> Result<FeederModel> {
    if !path.exists() && path.as_os_str() == BUNDLED_FEEDER_NAME {
        return Ok(gridprobe::harness::bundled_feeder());
    }
    FeederModel::load(path)
}

fn read_injections(feeder: &FeederModel, path: &Path) -> Result<Injections> {
    let mut inj = Injections::zeros(feeder.n());
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse(format!("injection file lacks a '{name}' column")))
    };
    let (cb, cp, cq) = (col("bus")?, col("p")?, col("q")?);
    for rec in reader.records() {
        let rec = rec?;
        let field = |c: usize| -> Result<f64> {
            let s = rec.get(c).unwrap_or("").trim();
            s.parse().map_err(|_| Error::Parse(format!("bad number '{s}' in injection file")))
        };
        let id: u32 = rec
            .get(cb)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::Parse("bad bus id in injection file".into()))?;
        let pos = feeder.position(id)?;
        inj.p[pos] = field(cp)?;
        inj.q[pos] = field(cq)?;
    }
    Ok(inj)
}

fn powerflow(feeder: &Path, injections: &Path, out: &Path) -> Result<()> {
    let feeder = load_feeder(feeder)?;
    let inj = read_injections(&feeder, injections)?;
    let sol = solve_pf(&feeder, &inj)?;
    let mut t = Table::new("voltages", &["bus", "u", "theta_rad"]);
    t.push(vec![Cell::Int(feeder.substation_id() as i64), feeder.base_voltage().into(), 0.0.into()]);
    for (pos, &id) in feeder.bus_ids().iter().enumerate() {
        t.push(vec![Cell::Int(id as i64), sol.state.u[pos].into(), sol.state.theta[pos].into()]);
    }
    std::fs::create_dir_all(out)?;
    t.write_csv(&out.join("voltages.csv"))?;
    write_json(
        &out.join("pf.json"),
        &json!({ "iterations": sol.iterations, "residual": sol.residual, "buses": feeder.n() }),
    )
}

fn design(sc: &Scenario, out: &Path) -> Result<()> {
    let d = design_probes(sc, sc.config.seed)?;
    let m = sc.setup.m();
    let probing: Vec<u32> = sc.setup.probing().iter().map(|&p| sc.feeder.bus_ids()[p]).collect();
    let mut t = Table::new("setpoints", &["slot", "bus", "p", "q"]);
    for (slot, s) in d.setpoints.iter().enumerate() {
        for (i, &bus) in probing.iter().enumerate() {
            t.push(vec![slot.into(), Cell::Int(bus as i64), s[i].into(), s[m + i].into()]);
        }
    }
    std::fs::create_dir_all(out)?;
    t.write_csv(&out.join("setpoints.csv"))?;
    write_json(
        &out.join("design.json"),
        &json!({ "seed": sc.config.seed, "horizon": sc.setup.horizon(), "report": d.report }),
    )
}

fn estimate(sc: &Scenario, out: &Path) -> Result<()> {
    let tr = run_trial(sc, sc.config.seed)?;
    let o = sc.setup.o();
    let ids = sc.non_metered_ids();
    let mut t = Table::new(
        "estimate",
        &["bus", "p_true", "p_est", "p_pct", "p_spread", "q_true", "q_est", "q_pct", "q_spread"],
    );
    for (i, &bus) in ids.iter().enumerate() {
        t.push(vec![
            Cell::Int(bus as i64),
            tr.base_loads[i].into(),
            tr.loads.average[i].into(),
            tr.metrics.p_pct[i].into(),
            tr.loads.spread[i].into(),
            tr.base_loads[o + i].into(),
            tr.loads.average[o + i].into(),
            tr.metrics.q_pct[i].into(),
            tr.loads.spread[o + i].into(),
        ]);
    }
    let mut states = Table::new("states", &["slot", "bus", "u_true", "theta_true", "u_est", "theta_est"]);
    for (slot, (a, b)) in tr.truth.states.slots().iter().zip(tr.estimate.states.slots()).enumerate() {
        for (pos, &id) in sc.feeder.bus_ids().iter().enumerate() {
            states.push(vec![
                slot.into(),
                Cell::Int(id as i64),
                a.u[pos].into(),
                a.theta[pos].into(),
                b.u[pos].into(),
                b.theta[pos].into(),
            ]);
        }
    }
    std::fs::create_dir_all(out)?;
    t.write_csv(&out.join("estimate.csv"))?;
    states.write_csv(&out.join("states.csv"))?;
    write_json(
        &out.join("estimate.json"),
        &json!({
            "seed": tr.seed,
            "mode": sc.setup.mode(),
            "horizon": sc.setup.horizon(),
            "state_rmse": tr.metrics.state_rmse,
            "condition": tr.condition,
            "diagnostics": tr.estimate.diagnostics,
            "design": tr.design.report,
        }),
    )
}

fn run(cli: Cli) -> Result<()> {
    let out = &cli.out;
    match cli.command {
        Command::Powerflow { feeder, injections } => powerflow(&feeder, &injections, out),
        Command::Design { scenario } => design(&load_scenario(&scenario, cli.seed)?, out),
        Command::Estimate { scenario, no_msd, mode } => {
            let (mut cfg, base) = load_config(&scenario, cli.seed)?;
            cfg.use_msd &= !no_msd;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            estimate(&Scenario::resolve(cfg, &base)?, out)
        }
        Command::Observability { scenario, trials } => {
            let sc = load_scenario(&scenario, cli.seed)?;
            let n = trials.unwrap_or(sc.config.trials);
            run_condition_study(&sc, n)?.write(out).map(drop)
        }
        Command::Montecarlo { scenario, no_msd, trials } => {
            let (mut cfg, base) = load_config(&scenario, cli.seed)?;
            cfg.use_msd &= !no_msd;
            if let Some(n) = trials {
                cfg.trials = n;
            }
            cfg.validate()?;
            run_p2l_montecarlo(&Scenario::resolve(cfg, &base)?)?.write(out).map(drop)
        }
        Command::Violations { scenario, gammas, bands } => {
            let sc = load_scenario(&scenario, cli.seed)?;
            run_violation_sweep(&sc, &gammas, &bands)?.write(out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

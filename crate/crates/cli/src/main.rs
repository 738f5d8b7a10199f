mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hevopt::convex::ConvexModel;
use hevopt::dp::{dp_solve, mode_scatter, write_scatter_csv, DpGrid};
use hevopt::drivecycle::{synth_cycle, SynthSpec};
use hevopt::learner::{scripted_replay, settling_time, ReplayConfig};
use hevopt::metrics::{compare, report, VariantReport};
use hevopt::orchestrator::{run_mission, RunOutput, Variant};
use hevopt::solver::Clarabel;
use hevopt::{DriveCycle, DrivingMode, FullModel};
use rayon::prelude::*;

use config::Config;
use manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "hevopt", version, about = "Energy management toolkit for a P4/P0 parallel hybrid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic drive cycle.
    CycleGen {
        #[arg(long, value_parser = ["urban", "mixed"])]
        preset: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Use the driven speed as the prediction.
        #[arg(long)]
        exact: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Validate a cycle file and check it against the vehicle.
    CycleCheck {
        #[arg(long)]
        cycle: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit the convex surrogate and write its coefficient tables.
    Fit(Common),
    /// Solve the dynamic-programming benchmark.
    Dp(CycleArgs),
    /// Simulate one controller variant in closed loop.
    Run {
        #[command(flatten)]
        args: CycleArgs,
        /// Overrides the configured variant.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
    },
    /// DP plus all three controller variants on one cycle.
    Compare(CycleArgs),
    /// Open-loop learning experiment under a scripted costate.
    ReplayLa {
        #[command(flatten)]
        common: Common,
        /// Costate levels, each held for `segment` seconds.
        #[arg(long, value_delimiter = ',', default_value = "3.0,3.3,2.9,3.1")]
        lambda: Vec<f64>,
        #[arg(long, default_value_t = 500)]
        segment: usize,
        /// Buffer sizes to replay.
        #[arg(long = "n-b", value_delimiter = ',', default_value = "25,100,400")]
        n_b: Vec<usize>,
    },
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CycleArgs {
    #[arg(long)]
    cycle: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| format!("unknown variant '{s}' (expected baseline, map_based or lb_mpc)"))
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn io_failure(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn load_cycle(path: &Path) -> Result<DriveCycle, Failure> {
    DriveCycle::load(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

struct Setup {
    config: Config,
    plant: FullModel,
    model: ConvexModel,
}

fn setup(config: Option<&Path>) -> Result<Setup, Failure> {
    let config = Config::load(config).map_err(Failure::Validation)?;
    let plant = FullModel::new(config.vehicle.clone());
    let model = ConvexModel::fit(&plant.maps, &plant.params).map_err(runtime)?;
    Ok(Setup { config, plant, model })
}

fn to_csv(write: impl FnOnce(&mut Vec<u8>) -> Result<(), String>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(Failure::Runtime)?;
    Ok(buf)
}

/// Caps the worker pool when `HEVOPT_THREADS` is set.
fn configure_threads() -> Outcome {
    let Ok(text) = std::env::var("HEVOPT_THREADS") else {
        return Ok(());
    };
    let n: usize = text
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("HEVOPT_THREADS must be a positive integer, got '{text}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(runtime)
}

fn cycle_gen(preset: &str, seed: u64, exact: bool, out: &Path) -> Outcome {
    let mut spec = match preset {
        "urban" => SynthSpec::urban(seed),
        _ => SynthSpec::mixed(seed),
    };
    if exact {
        spec = spec.with_exact_prediction();
    }
    let cycle = synth_cycle(&spec).map_err(invalid)?;
    let spec_text = toml::to_string(&spec).map_err(runtime)?;
    let name = format!("{preset}{}", if exact { "_exact" } else { "" });
    let mut manifest = Manifest::new("cycle-gen", out, &spec_text, Some(seed));
    let csv = to_csv(|b| cycle.write_csv(b).map_err(|e| e.to_string()))?;
    let path = manifest.write(&format!("{name}.csv"), &csv).map_err(io_failure(out))?;
    manifest.finish(&format!("{name}.manifest.toml")).map_err(io_failure(out))?;
    println!(
        "{}: {} s, {:.1} km",
        path.display(),
        cycle.steps(),
        cycle.s.last().copied().unwrap_or(0.0) / 1e3
    );
    Ok(())
}

fn cycle_check(path: &Path, config: Option<&Path>) -> Outcome {
    let cycle = load_cycle(path)?;
    let config = Config::load(config).map_err(Failure::Validation)?;
    let p = &config.vehicle;
    let mut peak: f64 = 0.0;
    let mut misprediction: f64 = 0.0;
    for k in 0..cycle.steps() {
        let st = cycle.step(k);
        peak = peak.max(p.request_power(st.v, st.a, st.grade, DrivingMode::Hev));
        misprediction = misprediction.max((cycle.v_hat[k] - cycle.v[k]).abs());
    }
    let capability = p.p1_max + p.p2_max + p.pe_max;
    println!("samples          {}", cycle.len());
    println!("distance         {:.2} km", cycle.s.last().copied().unwrap_or(0.0) / 1e3);
    println!("max speed        {:.1} m/s", cycle.v.iter().copied().fold(0.0, f64::max));
    println!("max |v_hat - v|  {misprediction:.2} m/s");
    println!("peak request     {:.1} kW (drivetrain {:.1} kW)", peak / 1e3, capability / 1e3);
    if peak > capability {
        return Err(Failure::Validation(format!(
            "{}: peak request {:.1} kW exceeds the drivetrain's {:.1} kW",
            path.display(),
            peak / 1e3,
            capability / 1e3
        )));
    }
    Ok(())
}

fn fit(common: &Common) -> Outcome {
    let s = setup(common.config.as_deref())?;
    s.model.check_convexity().map_err(runtime)?;
    let mut manifest = Manifest::new("fit", &common.out, &s.config.to_toml(), None);
    let dir = common.out.join("surrogate");
    s.model.write_bundle(&dir).map_err(io_failure(&dir))?;
    for name in ["kappa.csv", "pwl_m1.csv", "pwl_m2.csv", "battery.csv"] {
        manifest.record(&format!("surrogate/{name}")).map_err(io_failure(&dir))?;
    }
    manifest
        .write("vehicle.toml", s.plant.params.to_toml_string().as_bytes())
        .map_err(io_failure(&common.out))?;
    manifest.finish("fit.manifest.toml").map_err(io_failure(&common.out))?;
    println!("surrogate written to {}", dir.display());
    Ok(())
}

fn dp(args: &CycleArgs) -> Outcome {
    let cycle = load_cycle(&args.cycle)?;
    let s = setup(args.common.config.as_deref())?;
    let out = &args.common.out;
    let grid = DpGrid::new(&s.plant, s.config.dp.n_e, s.config.dp.n_u).map_err(invalid)?;
    let sol = dp_solve(&cycle, &s.plant, &grid).map_err(runtime)?;
    let mut manifest = Manifest::new("dp", out, &s.config.to_toml(), None);
    let rollout = to_csv(|b| sol.write_rollout_csv(b).map_err(|e| e.to_string()))?;
    manifest.write("dp_rollout.csv", &rollout).map_err(io_failure(out))?;
    let scatter = to_csv(|b| write_scatter_csv(&mode_scatter(&sol), b).map_err(|e| e.to_string()))?;
    manifest.write("dp_modes.csv", &scatter).map_err(io_failure(out))?;
    manifest.finish("dp.manifest.toml").map_err(io_failure(out))?;
    println!("fuel             {:.4} kg", sol.total_fuel_kg);
    println!("charge deviation {:.3} %", sol.charge_deviation() * 100.0);
    Ok(())
}

fn simulate(s: &Setup, cycle: &DriveCycle, variant: Variant) -> Result<(RunOutput, VariantReport), Failure> {
    let cfg = hevopt::orchestrator::ControllerConfig {
        variant,
        ..s.config.controller.clone()
    };
    let run = run_mission(cycle, &s.plant, &s.model, &cfg, &Clarabel::default()).map_err(runtime)?;
    let rep = report(&run.log, s.plant.params.h_l).map_err(runtime)?;
    Ok((run, rep))
}

fn write_run(manifest: &mut Manifest, out: &Path, run: &RunOutput) -> Outcome {
    let name = run.log.variant.name();
    let steps = to_csv(|b| run.log.write_csv(b).map_err(|e| e.to_string()))?;
    manifest.write(&format!("{name}_steps.csv"), &steps).map_err(io_failure(out))?;
    let mpc = to_csv(|b| {
        let mut w = csv::Writer::from_writer(b);
        for r in &run.log.mpc {
            w.serialize(r).map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())
    })?;
    manifest.write(&format!("{name}_mpc.csv"), &mpc).map_err(io_failure(out))?;
    Ok(())
}

fn run(args: &CycleArgs, variant: Option<Variant>) -> Outcome {
    let cycle = load_cycle(&args.cycle)?;
    let mut s = setup(args.common.config.as_deref())?;
    if let Some(v) = variant {
        s.config.controller.variant = v;
    }
    let out = &args.common.out;
    let (run, rep) = simulate(&s, &cycle, s.config.controller.variant)?;
    let mut manifest = Manifest::new("run", out, &s.config.to_toml(), None);
    write_run(&mut manifest, out, &run)?;
    manifest.finish(&format!("run_{}.manifest.toml", rep.name)).map_err(io_failure(out))?;
    println!("variant          {}", rep.name);
    println!("fuel             {:.4} kg", rep.fuel_kg);
    println!("corrected fuel   {:.4} kg", rep.corrected_kg);
    println!("charge deviation {:.3} %", rep.charge_deviation * 100.0);
    println!("mean costate     {:.3}", rep.mean_lambda);
    println!("slack events     {}", rep.slack_events);
    println!("held updates     {}", run.log.held_updates);
    Ok(())
}

fn compare_all(args: &CycleArgs) -> Outcome {
    let cycle = load_cycle(&args.cycle)?;
    let s = setup(args.common.config.as_deref())?;
    let out = &args.common.out;
    let grid = DpGrid::new(&s.plant, s.config.dp.n_e, s.config.dp.n_u).map_err(invalid)?;
    let (dp, runs) = rayon::join(
        || dp_solve(&cycle, &s.plant, &grid).map_err(runtime),
        || {
            Variant::ALL
                .par_iter()
                .map(|&v| simulate(&s, &cycle, v))
                .collect::<Result<Vec<_>, _>>()
        },
    );
    let (dp, runs) = (dp?, runs?);
    let mut manifest = Manifest::new("compare", out, &s.config.to_toml(), None);
    for (run, _) in &runs {
        write_run(&mut manifest, out, run)?;
    }
    let reports: Vec<VariantReport> = runs.into_iter().map(|(_, r)| r).collect();
    let table = compare(&reports, dp.total_fuel_kg);
    let csv = to_csv(|b| table.write_csv(b).map_err(|e| e.to_string()))?;
    manifest.write("comparison.csv", &csv).map_err(io_failure(out))?;
    manifest.write("comparison.txt", format!("{table}\n").as_bytes()).map_err(io_failure(out))?;
    manifest.finish("compare.manifest.toml").map_err(io_failure(out))?;
    println!("{table}");
    Ok(())
}

fn replay_la(common: &Common, lambda: &[f64], segment: usize, n_b: &[usize]) -> Outcome {
    if lambda.is_empty() || segment == 0 || n_b.contains(&0) {
        return Err(Failure::Usage("need at least one costate level, a positive segment and positive buffer sizes".into()));
    }
    if let Some(l) = lambda.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Failure::Validation(format!("costate levels must be finite and non-negative, got {l}")));
    }
    let s = setup(common.config.as_deref())?;
    let script: Vec<f64> = lambda.iter().flat_map(|&l| vec![l; segment]).collect();
    let mut manifest = Manifest::new("replay-la", &common.out, &s.config.to_toml(), None);
    let base = ReplayConfig {
        gamma: s.config.controller.gamma,
        fit_period: s.config.controller.t_s_la,
        p_crit_init: s.config.controller.p_crit_init,
        ..ReplayConfig::default()
    };
    let traces = n_b
        .par_iter()
        .map(|&n| {
            let cfg = ReplayConfig { n_b: n, ..base.clone() };
            scripted_replay(&script, &cfg, 100.0, &s.model, &s.plant.params, &Clarabel::default())
                .map(|t| (n, t))
                .map_err(runtime)
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (n, trace) in &traces {
        let csv = to_csv(|b| {
            let mut w = csv::Writer::from_writer(b);
            for p in trace {
                w.serialize(p).map_err(|e| e.to_string())?;
            }
            w.flush().map_err(|e| e.to_string())
        })?;
        manifest.write(&format!("replay_nb{n}.csv"), &csv).map_err(io_failure(&common.out))?;
        let delays: Vec<String> = (0..lambda.len())
            .map(|i| {
                let from = i * segment;
                settling_time(trace, from, from + segment, base.p_step)
                    .map_or("never".into(), |t| format!("{} s", t - from))
            })
            .collect();
        println!("n_B = {n:>4}: settling {}", delays.join(", "));
    }
    manifest.finish("replay-la.manifest.toml").map_err(io_failure(&common.out))?;
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    configure_threads()?;
    match &cli.command {
        Command::CycleGen { preset, seed, exact, out } => cycle_gen(preset, *seed, *exact, out),
        Command::CycleCheck { cycle, config } => cycle_check(cycle, config.as_deref()),
        Command::Fit(common) => fit(common),
        Command::Dp(args) => dp(args),
        Command::Run { args, variant } => run(args, *variant),
        Command::Compare(args) => compare_all(args),
        Command::ReplayLa { common, lambda, segment, n_b } => replay_la(common, lambda, *segment, n_b),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

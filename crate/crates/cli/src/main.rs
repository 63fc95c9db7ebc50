//! Command-line front end: power flows, offline solves, closed-loop
//! simulations, solver benchmarks, device scheduling and feeder generation.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::DVector;
use voltvar::benchmark::{compare_solvers, StaticInstance, StaticLoading};
use voltvar::generate::{generate_feeder, FeederOptions};
use voltvar::io;
use voltvar::linflow::{predict_voltages, OperatingPoint};
use voltvar::netmodel::build_linear_model;
use voltvar::online::{estimate_var_limits, run_simulation, ExhaustionPolicy, PlantKind, SimulationConfig};
use voltvar::plant::{solve_nonlinear, PlantConfig};
use voltvar::pnm::Method;
use voltvar::upperlayer::{check_schedule, solve_mpc, DiscreteDeviceConfig, Forecast, MpcProblem, TapModel};
use voltvar::{ControllerConfig, NetworkModel};

const LOG_ENV: &str = "VOLTVAR_LOG";

#[derive(Parser, Debug)]
#[command(name = "voltvar", version, about = "Volt/VAr control of DER reactive power on unbalanced radial feeders")]
#[command(after_help = "Log verbosity is read from VOLTVAR_LOG (error, warn, info, debug, trace).\n\
Exit status: 0 success, 2 configuration error, 3 input data error, 4 convergence failure, 1 other.")]
struct Cli {
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for feeder generation and measurement noise.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    /// Active-set threshold.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Armijo backtracking factor in (0, 1).
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Armijo sufficient-decrease constant in (0, 1).
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Iteration cap of offline solvers.
    #[arg(long = "max-iters", global = true)]
    max_iters: Option<usize>,
    /// Stop when the infinity-norm of the step falls below this.
    #[arg(long, global = true)]
    tol: Option<f64>,
}

impl SolverArgs {
    fn config(&self) -> Result<ControllerConfig> {
        let d = ControllerConfig::default();
        let cfg = ControllerConfig {
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            beta: self.beta.unwrap_or(d.beta),
            delta: self.delta.unwrap_or(d.delta),
            max_iterations: self.max_iters.unwrap_or(d.max_iterations),
            convergence_tol: self.tol.unwrap_or(d.convergence_tol),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Uniform per-phase-node loading.
#[derive(Args, Debug, Clone)]
struct LoadingArgs {
    /// Real load per phase node (pu).
    #[arg(long, default_value_t = 0.06)]
    load_p: f64,
    /// Reactive load per phase node (pu).
    #[arg(long, default_value_t = 0.03)]
    load_q: f64,
    /// Real PV output per phase node at DER buses (pu).
    #[arg(long, default_value_t = 0.2)]
    pv: f64,
    /// Head voltage magnitude (pu).
    #[arg(long, default_value_t = 1.0)]
    head_voltage: f64,
}

impl LoadingArgs {
    fn loading(&self) -> StaticLoading {
        StaticLoading {
            load_p: self.load_p,
            load_q: self.load_q,
            pv: self.pv,
            head_voltage: self.head_voltage,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ControllerArg {
    Pnm,
    Dsgp,
    Gp,
    /// Uncontrolled baseline (simulate only).
    None,
}

impl ControllerArg {
    fn method(self) -> Option<Method> {
        match self {
            ControllerArg::Pnm => Some(Method::Pnm),
            ControllerArg::Dsgp => Some(Method::Dsgp),
            ControllerArg::Gp => Some(Method::Gp),
            ControllerArg::None => None,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PlantArg {
    Linear,
    Nonlinear,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ExhaustionArg {
    Hold,
    FirstTrial,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One nonlinear power flow at q^g = 0; writes voltages.csv.
    Powerflow {
        #[arg(long)]
        network: PathBuf,
        #[command(flatten)]
        loading: LoadingArgs,
    },
    /// Offline solve on the linear model; writes solve_trace.csv, solution.csv, summary.json.
    Solve {
        #[arg(long)]
        network: PathBuf,
        #[arg(long, value_enum, default_value = "pnm")]
        controller: ControllerArg,
        #[command(flatten)]
        loading: LoadingArgs,
    },
    /// Closed-loop simulation over a scenario; writes trace.csv and summary.json.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "pnm")]
        controller: ControllerArg,
        /// Override the scenario's control period (s).
        #[arg(long)]
        control_period: Option<f64>,
        /// Override the scenario's measurement noise std.
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long, value_enum, default_value = "nonlinear")]
        plant: PlantArg,
        /// What to apply when no line-search trial passes the measured decrease test.
        #[arg(long, value_enum, default_value = "first-trial")]
        exhaustion: ExhaustionArg,
        /// Build the model offset and limits from the previous sample.
        #[arg(long)]
        stale_data: bool,
        /// Also run the uncontrolled baseline (baseline_trace.csv, baseline_summary.json).
        #[arg(long)]
        baseline: bool,
    },
    /// PNM, DSGP and GP from q^g = 0 on one feeder; writes bench.csv.
    Bench {
        /// Feeder document; a feeder is generated from --seed when omitted.
        #[arg(long)]
        network: Option<PathBuf>,
        /// Bus count of the generated feeder.
        #[arg(long, default_value_t = 25)]
        buses: usize,
        #[command(flatten)]
        loading: LoadingArgs,
    },
    /// Schedule OLTC taps and capacitor banks over a horizon; writes schedule.json.
    Mpc {
        #[arg(long)]
        network: PathBuf,
        /// Forecast source; uniform --load-p/--load-q/--pv loading when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// First scenario sample of the horizon.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 2)]
        horizon: usize,
        /// Initial tap position (all head phases).
        #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
        initial_tap: i32,
        /// Use the exact squared head voltage instead of the linearized one.
        #[arg(long)]
        exact_tap: bool,
        #[arg(long, default_value_t = 1_000_000)]
        enumeration_cap: u128,
        #[command(flatten)]
        loading: LoadingArgs,
    },
    /// Synthesize a random radial unbalanced feeder document.
    Generate {
        #[arg(long, default_value_t = 25)]
        buses: usize,
        #[arg(long, default_value_t = 0.35)]
        lateral_probability: f64,
        #[arg(long, default_value_t = 0.4)]
        der_fraction: f64,
        #[arg(long, default_value_t = 0.5)]
        der_capacity: f64,
        /// Lowest |V| under nominal load with no PV.
        #[arg(long, default_value_t = 0.95)]
        target_min_voltage: f64,
        /// Add an OLTC and a capacitor bank.
        #[arg(long)]
        devices: bool,
        /// File name inside the output directory.
        #[arg(long, default_value = "feeder.json")]
        name: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Category {
    Config,
    Data,
    Convergence,
}

/// Failure raised by the front end itself.
#[derive(Debug)]
struct CliError {
    category: Category,
    message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn fail(category: Category, message: impl Into<String>) -> anyhow::Error {
    CliError {
        category,
        message: message.into(),
    }
    .into()
}

fn category(err: &anyhow::Error) -> Option<Category> {
    use voltvar::Error as E;
    if let Some(c) = err.downcast_ref::<CliError>() {
        return Some(c.category);
    }
    let lib = err.chain().find_map(|e| e.downcast_ref::<voltvar::Error>())?;
    Some(match lib {
        E::Config(_) | E::InvalidLimits(_) | E::EnumerationCap { .. } => Category::Config,
        E::Malformed(_)
        | E::Cycle(_)
        | E::DuplicateSegment(_)
        | E::Disconnected(_)
        | E::PhaseMismatch { .. }
        | E::SingularReactance { .. }
        | E::Dimension { .. }
        | E::Scenario(_)
        | E::Io(_)
        | E::Json(_)
        | E::Csv(_) => Category::Data,
        E::NonConvergence { .. } | E::VoltageCollapse(_) | E::HessianNotPositiveDefinite | E::Infeasible(_) => {
            Category::Convergence
        }
        E::Internal(_) => return None,
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|e| e.downcast_ref::<std::io::Error>().is_some());
    match category(err).or(io.then_some(Category::Data)) {
        Some(Category::Config) => 2,
        Some(Category::Data) => 3,
        Some(Category::Convergence) => 4,
        None => 1,
    }
}

fn read_network(path: &Path) -> Result<NetworkModel> {
    io::read_network(path).with_context(|| format!("reading network {}", path.display()))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| fail(Category::Data, format!("cannot create {}: {e}", path.display())))?;
    info!("writing {}", path.display());
    Ok(BufWriter::new(f))
}

fn powerflow(out: &Path, network: &Path, loading: &LoadingArgs) -> Result<()> {
    let net = read_network(network)?;
    let m = net.dim();
    let cap = net.der_capacity();
    let l = loading.loading();
    let p = DVector::from_fn(m, |k, _| l.load_p - if cap[k] > 0.0 { l.pv } else { 0.0 });
    let point = OperatingPoint::new(
        DVector::from_element(net.root_dim(), l.head_voltage.powi(2)),
        p,
        DVector::from_element(m, l.load_q),
    )?;
    let sol = solve_nonlinear(&net, &point, &DVector::zeros(m), &PlantConfig::default())?;
    io::write_voltage_csv(&net.labels(), &sol, create(out, "voltages.csv")?)?;
    let mags = sol.squared_magnitudes.map(f64::sqrt);
    println!(
        "power flow converged in {} sweeps; |V| in [{:.5}, {:.5}] pu",
        sol.iterations,
        mags.min(),
        mags.max()
    );
    Ok(())
}

fn solve(out: &Path, network: &Path, controller: ControllerArg, loading: &LoadingArgs, cfg: &ControllerConfig) -> Result<()> {
    let method = controller
        .method()
        .ok_or_else(|| fail(Category::Config, "solve needs a controller: pnm, dsgp or gp"))?;
    let inst = StaticInstance::new(read_network(network)?, &loading.loading())?;
    let rep = inst.solve(method, cfg)?;
    io::write_solve_trace_csv(&rep, create(out, "solve_trace.csv")?)?;

    let v_model = predict_voltages(&inst.model, &rep.qg, &inst.c)?.magnitudes();
    let plant = solve_nonlinear(&inst.net, &inst.point, &rep.qg, &PlantConfig::default())?;
    let mut w = csv::Writer::from_writer(create(out, "solution.csv")?);
    w.write_record(["node", "lower", "upper", "qg", "v_model", "v_plant"])?;
    for (k, label) in inst.net.labels().iter().enumerate() {
        w.write_record([
            label.clone(),
            (inst.limits.lower[k] + 0.0).to_string(),
            inst.limits.upper[k].to_string(),
            (rep.qg[k] + 0.0).to_string(),
            v_model[k].to_string(),
            plant.squared_magnitudes[k].sqrt().to_string(),
        ])?;
    }
    w.flush()?;
    let plant_objective = inst.plant_objective(&rep.qg)?;
    io::write_json(
        &serde_json::json!({
            "controller": method.to_string(),
            "iterations": rep.iterations,
            "converged": rep.converged,
            "line_search_exhausted": rep.line_search_exhausted,
            "initial_objective": rep.initial_objective,
            "objective": rep.objective,
            "plant_objective": plant_objective,
        }),
        create(out, "summary.json")?,
    )?;
    println!(
        "{method}: {} iterations, objective {:.6e} (model) / {:.6e} (plant)",
        rep.iterations, rep.objective, plant_objective
    );
    if !rep.converged {
        return Err(fail(
            Category::Convergence,
            format!("{method} stopped at the iteration cap of {}", cfg.max_iterations),
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    out: &Path,
    scenario: &Path,
    controller: ControllerArg,
    control_period: Option<f64>,
    noise_std: Option<f64>,
    plant: PlantArg,
    exhaustion: ExhaustionArg,
    stale_data: bool,
    baseline: bool,
    seed: u64,
    cfg: &ControllerConfig,
) -> Result<()> {
    let (net, mut series) =
        io::load_scenario(scenario).with_context(|| format!("loading scenario {}", scenario.display()))?;
    if let Some(cp) = control_period {
        series.control_period_s = cp;
    }
    if let Some(n) = noise_std {
        series.noise_std = n;
    }
    series.validate(net.dim(), net.root_dim())?;
    let model = build_linear_model(&net)?;
    let sim = SimulationConfig {
        controller: controller.method(),
        solver: cfg.clone(),
        plant: match plant {
            PlantArg::Linear => PlantKind::Linear,
            PlantArg::Nonlinear => PlantKind::Nonlinear,
        },
        stale_data,
        exhaustion: match exhaustion {
            ExhaustionArg::Hold => ExhaustionPolicy::Hold,
            ExhaustionArg::FirstTrial => ExhaustionPolicy::FirstTrial,
        },
        seed,
        ..Default::default()
    };
    let mut runs = vec![("", sim.clone())];
    if baseline && sim.controller.is_some() {
        runs.push(("baseline_", SimulationConfig { controller: None, ..sim }));
    }
    let cap = net.der_capacity();
    for (prefix, cfg) in runs {
        let trace = run_simulation(&net, &model, &series, &cfg)?;
        io::write_trace_csv(&trace, &cap, create(out, &format!("{prefix}trace.csv"))?)?;
        io::write_json(&trace.summary, create(out, &format!("{prefix}summary.json"))?)?;
        let s = &trace.summary;
        println!(
            "{}: {} steps, time-average objective {:.6e}, |V| in [{:.4}, {:.4}], {} steps below / {} above band, {} exhausted line searches",
            s.controller, s.steps, s.time_average_objective, s.min_voltage, s.max_voltage, s.steps_below, s.steps_above, s.exhausted_steps
        );
        if s.plant_failures > 0 {
            log::warn!("{} steps where the plant power flow failed", s.plant_failures);
        }
    }
    Ok(())
}

fn bench(out: &Path, network: Option<&Path>, buses: usize, seed: u64, loading: &LoadingArgs, cfg: &ControllerConfig) -> Result<()> {
    let net = match network {
        Some(p) => read_network(p)?,
        None => NetworkModel::from_document(&generate_feeder(&FeederOptions {
            buses,
            seed,
            ..Default::default()
        })?)?,
    };
    let inst = StaticInstance::new(net, &loading.loading())?;
    let rows = compare_solvers(&inst, cfg)?;
    io::write_bench_csv(&rows, create(out, "bench.csv")?)?;
    for r in &rows {
        println!(
            "{:>5}: {:>7} iterations{}, objective {:.6e}, plant objective {:.6e}",
            r.controller,
            r.iterations,
            if r.converged { "" } else { " (cap)" },
            r.objective,
            r.plant_objective
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn mpc(
    out: &Path,
    network: &Path,
    scenario: Option<&Path>,
    start: usize,
    horizon: usize,
    initial_tap: i32,
    exact_tap: bool,
    enumeration_cap: u128,
    loading: &LoadingArgs,
    cfg: &ControllerConfig,
) -> Result<()> {
    let net = read_network(network)?;
    let model = build_linear_model(&net)?;
    let mut dev = DiscreteDeviceConfig::from_network(&net)?;
    dev.enumeration_cap = enumeration_cap;
    let initial_tap = vec![initial_tap; net.root_dim()];
    let initial_cb = vec![0; dev.banks.len()];
    let mut problem = match scenario {
        Some(path) => {
            let (snet, series) = io::load_scenario(path).with_context(|| format!("loading scenario {}", path.display()))?;
            if snet.dim() != net.dim() {
                bail!(fail(Category::Data, "scenario network does not match --network"));
            }
            MpcProblem::from_scenario(&series, start, horizon, initial_tap, initial_cb)?
        }
        None => {
            let m = net.dim();
            let cap = net.der_capacity();
            let l = loading.loading();
            let pv = cap.map(|c| if c > 0.0 { l.pv } else { 0.0 });
            let f = Forecast {
                p: DVector::from_fn(m, |k, _| l.load_p - if cap[k] > 0.0 { l.pv } else { 0.0 }),
                ql: DVector::from_element(m, l.load_q),
                limits: estimate_var_limits(&cap, &pv)?,
            };
            MpcProblem {
                period_s: 900.0,
                forecasts: vec![f; horizon],
                initial_tap,
                initial_cb,
                v_ref: 1.0,
                tap_model: TapModel::Linear,
            }
        }
    };
    if exact_tap {
        problem.tap_model = TapModel::Exact;
    }
    let schedule = solve_mpc(&model, &problem, &dev, cfg)?;
    check_schedule(&schedule, &problem, &dev)?;
    io::write_schedule(&schedule, create(out, "schedule.json")?)?;
    let first = &schedule.steps[0];
    println!(
        "objective {:.6e} over {} steps ({} trajectories); first step: taps {:?}, banks {:?}",
        schedule.objective,
        schedule.steps.len(),
        schedule.trajectories_evaluated,
        first.n_tap,
        first.n_cb
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn generate(
    out: &Path,
    buses: usize,
    seed: u64,
    lateral_probability: f64,
    der_fraction: f64,
    der_capacity: f64,
    target_min_voltage: f64,
    devices: bool,
    name: &str,
) -> Result<()> {
    for (what, x) in [("lateral probability", lateral_probability), ("DER fraction", der_fraction)] {
        if !(0.0..=1.0).contains(&x) {
            return Err(fail(Category::Config, format!("{what} must lie in [0, 1], got {x}")));
        }
    }
    let doc = generate_feeder(&FeederOptions {
        buses,
        seed,
        lateral_probability,
        der_fraction,
        der_capacity,
        target_min_voltage,
        devices,
        ..Default::default()
    })?;
    io::write_network(&doc, create(out, name)?)?;
    println!("{} buses written to {}", doc.buses.len(), out.join(name).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.solver.config()?;
    fs::create_dir_all(&cli.out)
        .map_err(|e| fail(Category::Data, format!("cannot create output directory {}: {e}", cli.out.display())))?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Powerflow { network, loading } => powerflow(out, &network, &loading),
        Command::Solve { network, controller, loading } => solve(out, &network, controller, &loading, &cfg),
        Command::Simulate {
            scenario,
            controller,
            control_period,
            noise_std,
            plant,
            exhaustion,
            stale_data,
            baseline,
        } => simulate(
            out,
            &scenario,
            controller,
            control_period,
            noise_std,
            plant,
            exhaustion,
            stale_data,
            baseline,
            cli.seed,
            &cfg,
        ),
        Command::Bench { network, buses, loading } => bench(out, network.as_deref(), buses, cli.seed, &loading, &cfg),
        Command::Mpc {
            network,
            scenario,
            start,
            horizon,
            initial_tap,
            exact_tap,
            enumeration_cap,
            loading,
        } => mpc(
            out,
            &network,
            scenario.as_deref(),
            start,
            horizon,
            initial_tap,
            exact_tap,
            enumeration_cap,
            &loading,
            &cfg,
        ),
        Command::Generate {
            buses,
            lateral_probability,
            der_fraction,
            der_capacity,
            target_min_voltage,
            devices,
            name,
        } => generate(
            out,
            buses,
            cli.seed,
            lateral_probability,
            der_fraction,
            der_capacity,
            target_min_voltage,
            devices,
            &name,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let label = match code {
                2 => "configuration error",
                3 => "data error",
                4 => "convergence error",
                _ => "error",
            };
            eprintln!("{label}: {e:#}");
            ExitCode::from(code)
        }
    }
}

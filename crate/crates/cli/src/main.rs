//! Command-line experiments: tuning, planning, driving, and envelope
//! analysis over road files.
//!
//! Configuration comes from an optional JSON document; command-line flags
//! override config keys. Exit codes: 0 success, 1 i/o or input error,
//! 2 infeasible geometry, 3 solver non-convergence (outputs still written).

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use sweptplan::envelope::{
    envelope_report, swept_envelope_with_spacing, write_envelope_csv, EnvelopeError, EnvelopeReport, SweptEnvelope,
    DEFAULT_EDGE_SPACING, DEFAULT_TRANSIENT_MARGIN,
};
use sweptplan::planner::{
    receding_horizon_run, rti_step, sqp_solve, Corridor, DriveResult, ObjectiveMode, PlanConfig, PlanMode,
    PlanProblem, PlannerError, RoadWindow,
};
use sweptplan::qp::QpError;
use sweptplan::road::{load_road, GlobalPath, RoadError, RoadFormat, RoadPath};
use sweptplan::tuning::{self, optimal_k, TuningError, KAPPA_STRAIGHT, K_DEFAULT};
use sweptplan::vehicle::{
    self, read_trajectory_csv, write_trajectory_csv, BusParams, Trajectory, TractorTrailerParams, VehicleError,
    VehicleKind, VehicleParams, VehicleState,
};

#[derive(Parser)]
#[command(name = "sweptplan", version, about = "On-road path planning for buses and tractor-trailers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the geometric tuning for a road radius.
    Tune(CommonArgs),
    /// Solve one planning window and write the trajectory.
    Plan(CommonArgs),
    /// Receding-horizon drive with swept-envelope analysis.
    Drive(CommonArgs),
    /// Swept envelope of an existing trajectory file.
    Envelope(CommonArgs),
    /// Tuned objective vs rear-axle-only baseline on the same road.
    Compare(CommonArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config JSON; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Road file (.csv or .json).
    #[arg(long)]
    road: Option<PathBuf>,
    /// Vehicle preset: "bus" or "tt" (full parameters go in the config).
    #[arg(long)]
    vehicle: Option<String>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Road radius for `tune`, m (signed; positive = left turn).
    #[arg(long, allow_negative_numbers = true)]
    radius: Option<f64>,
    /// Planner mode: "sqp" or "rti".
    #[arg(long)]
    mode: Option<String>,
    /// Planning horizon, m.
    #[arg(long)]
    horizon: Option<f64>,
    /// Executed length per replan, m.
    #[arg(long)]
    execute: Option<f64>,
    /// Curvature smoothness weight.
    #[arg(long)]
    omega_kappa: Option<f64>,
    /// Trajectory CSV input for `envelope`.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Write solve times as 0.0 for byte-reproducible outputs.
    #[arg(long)]
    zero_times: bool,
    /// Also write an SVG plot.
    #[arg(long)]
    svg: bool,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct ExperimentConfig {
    road: Option<PathBuf>,
    vehicle: Option<VehicleParams>,
    plan: Option<PlanConfig>,
    out_dir: Option<PathBuf>,
    radius: Option<f64>,
    start: Option<StartState>,
    trajectory: Option<PathBuf>,
    margin_m: Option<f64>,
    edge_spacing: Option<f64>,
    zero_times: Option<bool>,
    svg: Option<bool>,
}

#[derive(Debug, Deserialize, Clone, Copy, Default)]
#[serde(deny_unknown_fields, default)]
struct StartState {
    e_y: f64,
    e_psi: f64,
    beta1: f64,
    kappa: Option<f64>,
}

#[derive(Debug)]
enum CliError {
    Io(String),
    Infeasible(String),
    NoConvergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::NoConvergence(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Infeasible(m) | CliError::NoConvergence(m) => m,
        }
    }
}

impl From<RoadError> for CliError {
    fn from(e: RoadError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TuningError> for CliError {
    fn from(e: TuningError) -> Self {
        CliError::Infeasible(e.to_string())
    }
}

impl From<VehicleError> for CliError {
    fn from(e: VehicleError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<EnvelopeError> for CliError {
    fn from(e: EnvelopeError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<PlannerError> for CliError {
    fn from(e: PlannerError) -> Self {
        fn classify(e: &PlannerError) -> u8 {
            match e {
                PlannerError::InvalidProblem { .. } | PlannerError::Tuning(_) => 2,
                PlannerError::Qp(QpError::InfeasibleDetected { .. }) => 2,
                PlannerError::Window { source, .. } => classify(source),
                _ => 1,
            }
        }
        match classify(&e) {
            2 => CliError::Infeasible(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Tune(args) => cmd_tune(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Drive(args) => cmd_drive(args),
        Command::Envelope(args) => cmd_envelope(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Resolved experiment settings after merging config file and flags.
struct Resolved {
    road_path: Option<PathBuf>,
    vehicle: VehicleParams,
    plan: PlanConfig,
    out_dir: PathBuf,
    radius: Option<f64>,
    start: StartState,
    trajectory: Option<PathBuf>,
    margin_m: f64,
    edge_spacing: f64,
    zero_times: bool,
    svg: bool,
}

fn resolve(args: &CommonArgs) -> Result<Resolved, CliError> {
    let config: ExperimentConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Io(format!("config {}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    let vehicle = match args.vehicle.as_deref() {
        Some("bus") => VehicleParams::Bus(BusParams::default_city_bus()),
        Some("tt") | Some("tractor_trailer") => {
            VehicleParams::TractorTrailer(TractorTrailerParams::default_semitrailer())
        }
        Some(other) => return Err(CliError::Io(format!("unknown vehicle preset {other:?} (use bus or tt)"))),
        None => config
            .vehicle
            .unwrap_or(VehicleParams::Bus(BusParams::default_city_bus())),
    };
    vehicle.validate()?;
    let mut plan = config.plan.unwrap_or_default();
    if let Some(mode) = args.mode.as_deref() {
        plan.mode = match mode {
            "sqp" => PlanMode::Sqp,
            "rti" => PlanMode::Rti,
            other => return Err(CliError::Io(format!("unknown mode {other:?} (use sqp or rti)"))),
        };
    }
    if let Some(h) = args.horizon {
        plan.horizon_m = h;
    }
    if let Some(e) = args.execute {
        plan.execute_m = e;
    }
    if let Some(w) = args.omega_kappa {
        plan.omega_kappa = w;
    }
    Ok(Resolved {
        road_path: args.road.clone().or(config.road),
        vehicle,
        plan,
        out_dir: args.out_dir.clone().or(config.out_dir).unwrap_or_else(|| PathBuf::from("out")),
        radius: args.radius.or(config.radius),
        start: config.start.unwrap_or_default(),
        trajectory: args.trajectory.clone().or(config.trajectory),
        margin_m: config.margin_m.unwrap_or(DEFAULT_TRANSIENT_MARGIN),
        edge_spacing: config.edge_spacing.unwrap_or(DEFAULT_EDGE_SPACING),
        zero_times: args.zero_times || config.zero_times.unwrap_or(false),
        svg: args.svg || config.svg.unwrap_or(false),
    })
}

fn load_road_file(path: &Path) -> Result<RoadPath, CliError> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => RoadFormat::Json,
        _ => RoadFormat::Csv,
    };
    let file = fs::File::open(path)
        .map_err(|e| CliError::Io(format!("cannot open road file {}: {e}", path.display())))?;
    Ok(load_road(file, format)?)
}

fn require_road(r: &Resolved) -> Result<(RoadPath, GlobalPath), CliError> {
    let path = r
        .road_path
        .as_ref()
        .ok_or_else(|| CliError::Io("no road file given (use --road or the config)".into()))?;
    let road = load_road_file(path)?;
    let globals = GlobalPath::new(&road);
    Ok((road, globals))
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

/// Initial state with the auxiliary error refreshed by exact projection.
fn start_state(
    road: &RoadPath,
    globals: &GlobalPath,
    start: &StartState,
    params: &VehicleParams,
) -> Result<(VehicleState, f64), CliError> {
    let z = match params {
        VehicleParams::Bus(p) => {
            let aux = vehicle::aux_error_bus(road, globals, 0.0, start.e_y, start.e_psi, p)?;
            VehicleState::from_core(VehicleKind::Bus, &[start.e_y, start.e_psi], aux)
        }
        VehicleParams::TractorTrailer(p) => {
            let aux = vehicle::aux_error_tt(road, globals, 0.0, start.e_y, start.e_psi, start.beta1, p)?;
            VehicleState::from_core(VehicleKind::TractorTrailer, &[start.e_y, start.e_psi, start.beta1], aux)
        }
    };
    let kappa_max = params.tractor().kappa_max;
    let kappa = start
        .kappa
        .unwrap_or_else(|| road.samples()[0].kappa.clamp(-kappa_max, kappa_max));
    Ok((z, kappa))
}

fn cmd_tune(args: &CommonArgs) -> Result<(), CliError> {
    let r = resolve(args)?;
    let radius = r
        .radius
        .ok_or_else(|| CliError::Io("tune needs --radius (or \"radius\" in the config)".into()))?;
    let output = if radius.abs() >= 1.0 / KAPPA_STRAIGHT {
        serde_json::json!({
            "straight": true,
            "k": K_DEFAULT,
            "note": format!("|radius| >= {} m is treated as straight; every positive weight is optimal there", 1.0 / KAPPA_STRAIGHT),
        })
    } else {
        let sol = optimal_k(radius, &r.vehicle)?;
        serde_json::to_value(&sol).map_err(|e| CliError::Io(e.to_string()))?
    };
    let text = serde_json::to_string_pretty(&output).map_err(|e| CliError::Io(e.to_string()))?;
    println!("{text}");
    if args.out_dir.is_some() {
        ensure_out_dir(&r.out_dir)?;
        write_json(&r.out_dir.join("tune.json"), &output)?;
    }
    Ok(())
}

fn trajectory_from_plan(
    road: &RoadPath,
    globals: &GlobalPath,
    start_index: usize,
    states: Vec<VehicleState>,
    kappas: Vec<f64>,
) -> Trajectory {
    let poses = states
        .iter()
        .enumerate()
        .map(|(i, st)| {
            vehicle::rear_axle_pose(globals, (start_index + i) as f64 * road.delta_s(), st.e_y(), st.e_psi())
        })
        .collect();
    Trajectory { start_index, delta_s: road.delta_s(), states, kappas, poses }
}

fn cmd_plan(args: &CommonArgs) -> Result<(), CliError> {
    let r = resolve(args)?;
    let (road, globals) = require_road(&r)?;
    r.plan.validate()?;
    let n = r.plan.horizon_steps();
    let window = RoadWindow::new(&road, &globals, 0, n)?;
    let k_values = match r.plan.objective {
        ObjectiveMode::Tuned => tuning::k_schedule(&road, &r.vehicle)?.values[..=n].to_vec(),
        ObjectiveMode::RearAxleOnly => vec![1.0; n + 1],
    };
    let corridor = Corridor::from_road(&window, &r.vehicle);
    let (z0, kappa0) = start_state(&road, &globals, &r.start, &r.vehicle)?;
    let problem = PlanProblem::new(window, z0, kappa0, k_values, corridor, &r.vehicle)?;
    let result = match r.plan.mode {
        PlanMode::Sqp => sqp_solve(&problem, &r.plan, None)?,
        PlanMode::Rti => rti_step(&problem, &r.plan, None)?,
    };
    ensure_out_dir(&r.out_dir)?;
    let converged = result.stats.converged;
    let solve_time = if r.zero_times { 0.0 } else { result.stats.solve_time_s };
    let stats = serde_json::json!({
        "mode": mode_name(r.plan.mode),
        "vehicle": kind_name(r.vehicle.kind()),
        "objective": result.objective,
        "sqp_iters": result.stats.sqp_iters,
        "qp_solves": result.stats.qp_solves,
        "qp_iters": result.stats.qp_iters,
        "solve_time_s": solve_time,
        "converged": converged,
        "constraint_violation": result.stats.constraint_violation,
        "n_steps": n,
        "delta_s": road.delta_s(),
    });
    write_json(&r.out_dir.join("stats.json"), &stats)?;
    let traj = trajectory_from_plan(&road, &globals, 0, result.states, result.kappas);
    let mut csv = Vec::new();
    write_trajectory_csv(&mut csv, &traj).map_err(|e| CliError::Io(e.to_string()))?;
    write_text(&r.out_dir.join("trajectory.csv"), &String::from_utf8_lossy(&csv))?;
    if r.svg {
        let svg = render_svg(&road, &globals, None, Some(&traj));
        write_text(&r.out_dir.join("plan.svg"), &svg)?;
    }
    println!(
        "plan: {} steps, objective {:.3e}, {} SQP iters, converged: {}",
        n, result.objective, result.stats.sqp_iters, converged
    );
    if !converged {
        return Err(CliError::NoConvergence("plan did not converge (outputs written)".into()));
    }
    Ok(())
}

fn mode_name(mode: PlanMode) -> &'static str {
    match mode {
        PlanMode::Sqp => "sqp",
        PlanMode::Rti => "rti",
    }
}

fn kind_name(kind: VehicleKind) -> &'static str {
    match kind {
        VehicleKind::Bus => "bus",
        VehicleKind::TractorTrailer => "tractor_trailer",
    }
}

/// Balanced width predicted by the stationary geometry, when the road has
/// constant nonzero curvature.
fn expected_width(road: &RoadPath, params: &VehicleParams) -> Option<f64> {
    let k0 = road.samples()[0].kappa;
    let constant = road.samples().iter().all(|s| (s.kappa - k0).abs() < 1e-12);
    if !constant || k0.abs() < KAPPA_STRAIGHT {
        return None;
    }
    optimal_k(1.0 / k0, params)
        .ok()
        .map(|sol| (sol.r_road - sol.r_left).abs())
}

fn drive_stats_json(result: &DriveResult, road: &RoadPath, vehicle: VehicleKind, zero_times: bool) -> serde_json::Value {
    let windows: Vec<serde_json::Value> = result
        .windows
        .iter()
        .map(|w| {
            serde_json::json!({
                "window": w.window,
                "start_index": w.start_index,
                "sqp_iters": w.sqp_iters,
                "qp_solves": w.qp_solves,
                "qp_iters": w.qp_iters,
                "solve_time_s": if zero_times { 0.0 } else { w.solve_time_s },
                "converged": w.converged,
                "objective": w.objective,
            })
        })
        .collect();
    let n_windows = result.windows.len().max(1);
    let mean_iters =
        result.windows.iter().map(|w| w.sqp_iters).sum::<usize>() as f64 / n_windows as f64;
    serde_json::json!({
        "mode": mode_name(result.mode),
        "vehicle": kind_name(vehicle),
        "windows": result.windows.len(),
        "mean_solve_s": if zero_times { 0.0 } else { result.mean_solve_time_s() },
        "max_solve_s": if zero_times { 0.0 } else { result.max_solve_time_s() },
        "mean_sqp_iters": mean_iters,
        "total_qp_iters": result.windows.iter().map(|w| w.qp_iters).sum::<usize>(),
        "converged_windows": result.windows.iter().filter(|w| w.converged).count(),
        "delta_s": road.delta_s(),
        "per_window": windows,
    })
}

fn run_drive(
    r: &Resolved,
    road: &RoadPath,
    globals: &GlobalPath,
    objective: ObjectiveMode,
) -> Result<(DriveResult, SweptEnvelope, EnvelopeReport), CliError> {
    let mut plan = r.plan;
    plan.objective = objective;
    plan.delta_s = road.delta_s();
    let (z0, kappa0) = start_state(road, globals, &r.start, &r.vehicle)?;
    let result = receding_horizon_run(road, globals, &z0, kappa0, &r.vehicle, &plan)?;
    let env = swept_envelope_with_spacing(road, globals, &result.driven, &r.vehicle, r.edge_spacing)?;
    let report = envelope_report(&env, r.margin_m, expected_width(road, &r.vehicle));
    Ok((result, env, report))
}

fn cmd_drive(args: &CommonArgs) -> Result<(), CliError> {
    let r = resolve(args)?;
    let (road, globals) = require_road(&r)?;
    let (result, env, report) = run_drive(&r, &road, &globals, r.plan.objective)?;
    ensure_out_dir(&r.out_dir)?;

    let mut csv = Vec::new();
    write_trajectory_csv(&mut csv, &result.driven).map_err(|e| CliError::Io(e.to_string()))?;
    write_text(&r.out_dir.join("trajectory.csv"), &String::from_utf8_lossy(&csv))?;

    let mut env_csv = Vec::new();
    write_envelope_csv(&mut env_csv, &env)?;
    write_text(&r.out_dir.join("envelope.csv"), &String::from_utf8_lossy(&env_csv))?;

    let metrics = serde_json::to_value(&report).map_err(|e| CliError::Io(e.to_string()))?;
    write_json(&r.out_dir.join("metrics.json"), &metrics)?;
    let stats = drive_stats_json(&result, &road, r.vehicle.kind(), r.zero_times);
    write_json(&r.out_dir.join("stats.json"), &stats)?;
    if r.svg {
        let svg = render_svg(&road, &globals, Some(&env), Some(&result.driven));
        write_text(&r.out_dir.join("drive.svg"), &svg)?;
    }

    println!("drive summary ({} mode, {} windows):", mode_name(result.mode), result.windows.len());
    println!("  solve time   mean {:.4} s   max {:.4} s", result.mean_solve_time_s(), result.max_solve_time_s());
    println!(
        "  widths       left {:.3} m   right {:.3} m   imbalance {:.3} m",
        report.max_left_width, report.max_right_width, report.imbalance
    );
    println!(
        "  interior     left {:.3} m   right {:.3} m   imbalance {:.3} m (margin {} m)",
        report.interior_left_width, report.interior_right_width, report.interior_imbalance, report.margin_m
    );
    if let Some(w) = report.expected_width {
        println!("  expected geometric width {w:.3} m");
    }

    if result.mode == PlanMode::Sqp && result.windows.iter().any(|w| !w.converged) {
        return Err(CliError::NoConvergence("some windows did not converge (outputs written)".into()));
    }
    Ok(())
}

fn cmd_envelope(args: &CommonArgs) -> Result<(), CliError> {
    let r = resolve(args)?;
    let (road, globals) = require_road(&r)?;
    let traj_path = r
        .trajectory
        .as_ref()
        .ok_or_else(|| CliError::Io("envelope needs --trajectory (or \"trajectory\" in the config)".into()))?;
    let file = fs::File::open(traj_path)
        .map_err(|e| CliError::Io(format!("cannot open trajectory {}: {e}", traj_path.display())))?;
    let traj = read_trajectory_csv(file)?;
    if traj.states[0].kind() != r.vehicle.kind() {
        return Err(CliError::Io("trajectory vehicle kind does not match --vehicle".into()));
    }
    let env = swept_envelope_with_spacing(&road, &globals, &traj, &r.vehicle, r.edge_spacing)?;
    let report = envelope_report(&env, r.margin_m, expected_width(&road, &r.vehicle));
    ensure_out_dir(&r.out_dir)?;
    let mut env_csv = Vec::new();
    write_envelope_csv(&mut env_csv, &env)?;
    write_text(&r.out_dir.join("envelope.csv"), &String::from_utf8_lossy(&env_csv))?;
    write_json(&r.out_dir.join("metrics.json"), &serde_json::to_value(&report).map_err(|e| CliError::Io(e.to_string()))?)?;
    if r.svg {
        let svg = render_svg(&road, &globals, Some(&env), Some(&traj));
        write_text(&r.out_dir.join("envelope.svg"), &svg)?;
    }
    println!(
        "envelope: left {:.3} m, right {:.3} m, imbalance {:.3} m",
        report.max_left_width, report.max_right_width, report.imbalance
    );
    Ok(())
}

fn cmd_compare(args: &CommonArgs) -> Result<(), CliError> {
    let r = resolve(args)?;
    let (road, globals) = require_road(&r)?;
    let (tuned_run, tuned_env, tuned_report) = run_drive(&r, &road, &globals, ObjectiveMode::Tuned)?;
    let (base_run, base_env, base_report) = run_drive(&r, &road, &globals, ObjectiveMode::RearAxleOnly)?;
    ensure_out_dir(&r.out_dir)?;

    for (name, env, report, run) in [
        ("tuned", &tuned_env, &tuned_report, &tuned_run),
        ("baseline", &base_env, &base_report, &base_run),
    ] {
        let mut env_csv = Vec::new();
        write_envelope_csv(&mut env_csv, env)?;
        write_text(&r.out_dir.join(format!("{name}_envelope.csv")), &String::from_utf8_lossy(&env_csv))?;
        write_json(
            &r.out_dir.join(format!("{name}_metrics.json")),
            &serde_json::to_value(report).map_err(|e| CliError::Io(e.to_string()))?,
        )?;
        let mut csv = Vec::new();
        write_trajectory_csv(&mut csv, &run.driven).map_err(|e| CliError::Io(e.to_string()))?;
        write_text(&r.out_dir.join(format!("{name}_trajectory.csv")), &String::from_utf8_lossy(&csv))?;
    }
    let delta = base_report.interior_imbalance - tuned_report.interior_imbalance;
    let compare = serde_json::json!({
        "tuned_imbalance": tuned_report.interior_imbalance,
        "baseline_imbalance": base_report.interior_imbalance,
        "imbalance_delta": delta,
        "tuned_widths": [tuned_report.interior_left_width, tuned_report.interior_right_width],
        "baseline_widths": [base_report.interior_left_width, base_report.interior_right_width],
        "margin_m": r.margin_m,
    });
    write_json(&r.out_dir.join("compare.json"), &compare)?;
    println!(
        "compare: tuned imbalance {:.3} m vs baseline {:.3} m (delta {:.3} m)",
        tuned_report.interior_imbalance, base_report.interior_imbalance, delta
    );
    Ok(())
}

/// Minimal static SVG: road boundaries, centerline, swept band, driven path.
fn render_svg(
    road: &RoadPath,
    globals: &GlobalPath,
    env: Option<&SweptEnvelope>,
    traj: Option<&Trajectory>,
) -> String {
    let samples = road.samples();
    let center: Vec<(f64, f64)> = samples.iter().map(|s| globals.point_at(s.s)).collect();
    let left: Vec<(f64, f64)> = samples.iter().map(|s| globals.offset_point(s.s, s.w_left)).collect();
    let right: Vec<(f64, f64)> = samples.iter().map(|s| globals.offset_point(s.s, -s.w_right)).collect();

    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for &(x, y) in center.iter().chain(&left).chain(&right) {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    let pad = 5.0;
    let w = max_x - min_x + 2.0 * pad;
    let h = max_y - min_y + 2.0 * pad;
    let scale = 900.0 / w.max(h);
    let map = |x: f64, y: f64| ((x - min_x + pad) * scale, (max_y - y + pad) * scale);
    let polyline = |pts: &[(f64, f64)], style: &str| {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (px, py) = map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        format!("<polyline points=\"{}\" style=\"{style}\"/>\n", coords.join(" "))
    };

    let mut body = String::new();
    body.push_str(&polyline(&left, "fill:none;stroke:#555;stroke-width:1.5"));
    body.push_str(&polyline(&right, "fill:none;stroke:#555;stroke-width:1.5"));
    body.push_str(&polyline(&center, "fill:none;stroke:#aaa;stroke-width:1;stroke-dasharray:6 4"));
    if let Some(env) = env {
        let mut band: Vec<(f64, f64)> = Vec::new();
        for (i, s) in env.grid.iter().enumerate() {
            if let Some(l) = env.left[i] {
                band.push(globals.offset_point(*s, l));
            }
        }
        for (i, s) in env.grid.iter().enumerate().rev() {
            if let Some(rv) = env.right[i] {
                band.push(globals.offset_point(*s, rv));
            }
        }
        if !band.is_empty() {
            let coords: Vec<String> = band
                .iter()
                .map(|&(x, y)| {
                    let (px, py) = map(x, y);
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            body.push_str(&format!(
                "<polygon points=\"{}\" style=\"fill:rgba(46,139,87,0.30);stroke:#2e8b57;stroke-width:0.8\"/>\n",
                coords.join(" ")
            ));
        }
    }
    if let Some(traj) = traj {
        let pts: Vec<(f64, f64)> = traj.poses.iter().map(|p| (p.x, p.y)).collect();
        body.push_str(&polyline(&pts, "fill:none;stroke:#1f6fb2;stroke-width:1.5"));
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.0} {:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n",
        w * scale,
        h * scale,
        w * scale,
        h * scale
    )
}

//! `platoon`: analysis, synthesis, simulation and sweeps for mixed platoons.

mod config;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use platoon_core::modal::{self, ModalError, Tolerances};
use platoon_core::ovm::ClosureMode;
use platoon_core::par::{self, Exec};
use platoon_core::platoon::{self, platoon_from_params, LinearizedPlatoon, PlatoonError};
use platoon_core::sim::{self, Disturbance, SimError, Trajectory};
use platoon_core::synth::{self, robust, Controller, SynthError, SynthOptions};
use serde_json::json;
use thiserror::Error;

use config::ExperimentConfig;
use svg::Series;

#[derive(Parser)]
#[command(name = "platoon", version, about = "Mixed-traffic platoon control experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// PBH controllability/observability report of the linearized platoon.
    Analyze(Opts),
    /// Synthesize an H∞ output-feedback controller.
    Synthesize(Opts),
    /// Run the nonlinear simulation.
    Simulate(Opts),
    /// Brake each human-driven vehicle in turn and tabulate the metrics.
    Sweep(Opts),
}

#[derive(Args)]
struct Opts {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the simulation seed (and the Monte-Carlo seed of robust synthesis).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    robust: bool,
    /// Synthesize on the full ring model instead of the reduced one.
    #[arg(long)]
    full_ring: bool,
    #[arg(long)]
    plot: bool,
    /// Controller JSON; overrides `controller_file` from the config.
    #[arg(long)]
    controller: Option<PathBuf>,
    /// Also write the assembled first-stage SDP to `sdp.json` (synthesize).
    #[arg(long)]
    dump_sdp: bool,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Plant(#[from] PlatoonError),
    #[error(transparent)]
    Analysis(#[from] ModalError),
    #[error(transparent)]
    Synthesis(#[from] SynthError),
    #[error(transparent)]
    Simulation(SimError),
    #[error("{0}")]
    Io(String),
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => CliError::Config(m),
            other => CliError::Simulation(other),
        }
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::Plant(_) => "PlantError",
            CliError::Analysis(_) => "AnalysisError",
            CliError::Synthesis(_) => "SynthesisError",
            CliError::Simulation(SimError::Collision { .. }) => "Collision",
            CliError::Simulation(_) => "SimulationError",
            CliError::Io(_) => "IoError",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Config(e.to_string().trim().to_string())),
    };
    let res = match &cli.cmd {
        Command::Analyze(o) => prepare(o).and_then(|cfg| analyze(&cfg, o)),
        Command::Synthesize(o) => prepare(o).and_then(|cfg| synthesize(&cfg, o)),
        Command::Simulate(o) => prepare(o).and_then(|cfg| simulate(&cfg, o)),
        Command::Sweep(o) => prepare(o).and_then(|cfg| sweep(&cfg, o)),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", json!({ "kind": e.kind(), "message": e.to_string() }));
    ExitCode::from(e.exit_code())
}

fn prepare(o: &Opts) -> Result<ExperimentConfig, CliError> {
    let cfg = ExperimentConfig::load(&o.config).map_err(CliError::Config)?;
    fs::create_dir_all(&o.out)
        .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", o.out.display())))?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn plant(cfg: &ExperimentConfig) -> Result<LinearizedPlatoon, CliError> {
    let p = &cfg.platoon;
    let vehicles = cfg.vehicles().map_err(CliError::Config)?;
    Ok(platoon_from_params(
        &vehicles,
        p.road,
        p.v_star_mps,
        ClosureMode::FixedVStar,
        &cfg.observed(),
        &p.weights,
    )?)
}

fn analyze(cfg: &ExperimentConfig, o: &Opts) -> Result<(), CliError> {
    let plant = plant(cfg)?;
    let m = &plant.matrices;
    let report = modal::pbh_report(&m.a, &m.b, &m.c, &Tolerances::default())?;
    println!(
        "stabilizable={} detectable={} uncontrollable_at_origin={}",
        report.stabilizable, report.detectable, report.uncontrollable_at_origin
    );
    let doc = json!({
        "road": plant.spec.road,
        "n_vehicles": plant.spec.n,
        "v_star_mps": plant.eq.v_star,
        "equilibrium_spacing_m": plant.eq.s_star,
        "observed": plant.spec.observed,
        "report": report,
    });
    write(&o.out.join("analysis.json"), &to_json(&doc))
}

fn synthesize(cfg: &ExperimentConfig, o: &Opts) -> Result<(), CliError> {
    let plant = plant(cfg)?;
    let full_ring = o.full_ring || cfg.synthesis.full_ring;
    let opts = SynthOptions {
        allow_marginal: full_ring,
        seed: o.seed.unwrap_or(cfg.synthesis.seed),
        ..SynthOptions::default()
    };
    let robust_mode = o.robust || cfg.synthesis.robust;
    if o.dump_sdp {
        let reduce = plant.spec.road.is_ring() && !full_ring;
        let base = if reduce { platoon::reduce_ring(&plant)?.matrices } else { plant.matrices.clone() };
        let prog = if robust_mode {
            let vehicles = cfg.vehicles().map_err(CliError::Config)?;
            let unc = robust::platoon_uncertainty(&plant, &vehicles, &cfg.spread(), reduce)?;
            robust::robust_lmi_program(&base, &unc)?
        } else {
            synth::nominal_lmi_program(&base)?
        };
        let conic = prog.assemble(&opts.lmi).map_err(SynthError::from)?;
        write(&o.out.join("sdp.json"), &(conic.to_json() + "\n"))?;
    }
    let res = if robust_mode {
        let vehicles = cfg.vehicles().map_err(CliError::Config)?;
        robust::synthesize_platoon_robust(&plant, &vehicles, &cfg.spread(), full_ring, &opts)?.0
    } else {
        synth::synthesize_platoon(&plant, full_ring, &opts)?
    };
    println!("gamma={} order={}", res.gamma, res.controller.order());
    write(&o.out.join("controller.json"), &(res.controller.to_json() + "\n"))?;
    let doc = json!({
        "gamma": res.gamma,
        "robust": res.controller.meta.robust,
        "reduced": res.controller.meta.reduced,
        "order": res.controller.order(),
        "diagnostics": res.diagnostics,
    });
    write(&o.out.join("synthesis.json"), &to_json(&doc))
}

fn load_controller(cfg: &ExperimentConfig, o: &Opts) -> Result<Option<Controller>, CliError> {
    let Some(path) = o.controller.as_ref().or(cfg.controller_file.as_ref()) else {
        return Ok(None);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("controller file {}: {e}", path.display())))?;
    Controller::from_json(&text)
        .map(Some)
        .map_err(|e| CliError::Config(format!("controller file {}: {e}", path.display())))
}

fn simulate(cfg: &ExperimentConfig, o: &Opts) -> Result<(), CliError> {
    let controller = load_controller(cfg, o)?;
    let sc = cfg.scenario(o.seed).map_err(CliError::Config)?;
    let stride = cfg.simulation.as_ref().map_or(10, |s| s.csv_stride);
    let csv_path = o.out.join("trajectory.csv");
    let traj = match sim::simulate(&sc, controller.as_ref()) {
        Ok(t) => t,
        Err(SimError::Collision { vehicle, t_s, spacing_m, trajectory }) => {
            write(&csv_path, &trajectory.to_csv(stride))?;
            return Err(CliError::Simulation(SimError::Collision { vehicle, t_s, spacing_m, trajectory }));
        }
        Err(e) => return Err(e.into()),
    };
    write(&csv_path, &traj.to_csv(stride))?;
    let metrics = sim::compute_metrics(&traj, &traj.eq, &cfg.platoon.weights);
    let doc = json!({
        "controlled": traj.controlled,
        "metrics": metrics,
        "closure_error_m": traj.closure_error(),
        "events": traj.events.len(),
    });
    write(&o.out.join("metrics.json"), &to_json(&doc))?;
    println!(
        "cost={} max_spacing_error_cav={} settle_time_s={:?}",
        metrics.quadratic_cost, metrics.max_spacing_error_cav, metrics.settle_time_s
    );
    if o.plot {
        let highlight: Vec<usize> = sc.disturbances.iter().map(|d| d.vehicle).collect();
        write(
            &o.out.join("velocity.svg"),
            &per_vehicle_plot(&traj, &traj.v, &highlight, "Velocity", "v (m/s)"),
        )?;
        write(
            &o.out.join("spacing.svg"),
            &per_vehicle_plot(&traj, &traj.s, &highlight, "Spacing", "s (m)"),
        )?;
    }
    Ok(())
}

/// Vehicle 1 in blue, disturbed vehicles in black, the rest in grey.
fn per_vehicle_plot(traj: &Trajectory, data: &[Vec<f64>], highlight: &[usize], title: &str, ylabel: &str) -> String {
    let stride = traj.len().div_ceil(2000).max(1);
    let mut series: Vec<Series> = (0..traj.n)
        .map(|i| {
            let (color, width) = if i == 0 {
                ("blue", 2.0)
            } else if highlight.contains(&(i + 1)) {
                ("black", 1.5)
            } else {
                ("#aaaaaa", 1.0)
            };
            Series {
                points: (0..traj.len()).step_by(stride).map(|k| (traj.t[k], data[k][i])).collect(),
                color,
                width,
            }
        })
        .collect();
    // draw the highlighted curves last so they stay visible
    series.sort_by_key(|s| s.width.to_bits());
    svg::line_plot(title, "t (s)", ylabel, &series)
}

fn sweep(cfg: &ExperimentConfig, o: &Opts) -> Result<(), CliError> {
    let controller = load_controller(cfg, o)?;
    let base = cfg.scenario(o.seed).map_err(CliError::Config)?;
    let n = base.n();
    let pulse = &cfg.sweep;
    let runs = par::map_range(Exec::Parallel, n - 1, |k| {
        let mut sc = base.clone();
        sc.disturbances = vec![Disturbance {
            vehicle: k + 2,
            start_s: pulse.start_s,
            duration_s: pulse.duration_s,
            accel_mps2: pulse.accel_mps2,
        }];
        sim::simulate(&sc, controller.as_ref())
            .map(|t| sim::compute_metrics(&t, &t.eq, &cfg.platoon.weights))
    });
    let mut csv = String::from("vehicle,max_spacing_error_cav_m,quadratic_cost,settle_time_s,min_spacing_m\n");
    let mut rows = Vec::with_capacity(runs.len());
    for (k, r) in runs.into_iter().enumerate() {
        let m = r?;
        let settle = m.settle_time_s.map(|t| t.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            k + 2,
            m.max_spacing_error_cav,
            m.quadratic_cost,
            settle,
            m.min_spacing_m
        ));
        rows.push((k + 2, m));
    }
    write(&o.out.join("sweep.csv"), &csv)?;
    println!("{} runs written to {}", rows.len(), o.out.join("sweep.csv").display());
    if o.plot {
        let pts = |f: fn(&sim::Metrics) -> f64| Series {
            points: rows.iter().map(|(i, m)| (*i as f64, f(m))).collect(),
            color: "black",
            width: 1.5,
        };
        write(
            &o.out.join("sweep_spacing_error.svg"),
            &svg::line_plot(
                "Max CAV spacing error",
                "perturbed vehicle",
                "max |s1 - s1*| (m)",
                &[pts(|m| m.max_spacing_error_cav)],
            ),
        )?;
        write(
            &o.out.join("sweep_cost.svg"),
            &svg::line_plot("Quadratic cost", "perturbed vehicle", "cost", &[pts(|m| m.quadratic_cost)]),
        )?;
    }
    Ok(())
}

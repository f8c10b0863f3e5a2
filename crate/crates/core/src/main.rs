use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};

use rebound_planner::bench::{self, BenchmarkSpec};
use rebound_planner::config::Config;
use rebound_planner::io::{self, MapFile};
use rebound_planner::planner::{Planner, RobotState, SolverKind};
use rebound_planner::service::{self, MapLibrary, ServeOptions, Simulation};
use rebound_planner::Vec3;

#[derive(Parser)]
#[command(name = "rebound", version, about = "Local trajectory planner for a point robot in 3D")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Plan one trajectory and write it as CSV.
    Plan {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_vec3)]
        start: Vec3,
        #[arg(long, value_parser = parse_vec3)]
        goal: Vec3,
        #[arg(long)]
        out: PathBuf,
        /// Sample rate of the CSV (Hz).
        #[arg(long, default_value_t = io::DEFAULT_SAMPLE_RATE)]
        rate: f64,
        /// Also dump the anchor/direction pairs of every iteration as JSON lines.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Run the simulation service.
    Serve {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Initial robot position; defaults to 1 m inside the map's lower corner.
        #[arg(long, value_parser = parse_vec3)]
        start: Option<Vec3>,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
    },
    /// Fly seeded random forests and write per-run metrics as CSV.
    Bench {
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0.5)]
        density: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "lbfgs")]
        solver: SolverKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write zero timings so that reports are byte-identical across runs.
        #[arg(long)]
        no_timing: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write one of the benchmark's random maps as a map file.
    GenMap {
        #[arg(long, default_value_t = 0.5)]
        density: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|c| c.trim().parse::<f64>().map_err(|e| format!("{c:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(format!("expected x,y,z, got {s:?}")),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, String> {
    match path {
        Some(p) => Config::load(p).map_err(|e| e.to_string()),
        None => Ok(Config::default()),
    }
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("writing {}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.cmd {
        Cmd::Plan { map, config, start, goal, out, rate, pairs } => {
            let cfg = load_config(config.as_deref())?;
            if !(rate > 0.0) {
                return Err("--rate must be positive".into());
            }
            let library = MapLibrary { dir: None, config: cfg.clone() };
            let grid = library.load_file(&map)?;
            let mut planner = Planner::new(cfg);
            planner.record_pairs = pairs.is_some();
            let outcome = planner.plan(0.0, &RobotState::at_rest(start), goal, &grid);
            if let Some(p) = &pairs {
                write(p, &io::pairs_jsonl(&outcome.pair_history))?;
            }
            let s = &outcome.stats;
            eprintln!(
                "status {} rebound_iterations {} evaluations {} optimize_ms {:.3}",
                outcome.status.name(),
                s.rebound_iterations,
                s.rebound_evaluations + s.refine_evaluations,
                s.optimize_ms
            );
            let traj = outcome
                .trajectory
                .ok_or_else(|| format!("planning failed: {}", outcome.message.unwrap_or_default()))?;
            write(&out, &io::trajectory_csv(&traj, rate).map_err(|e| e.to_string())?)
        }
        Cmd::Serve { map, config, port, host, start, time_scale } => {
            let cfg = load_config(config.as_deref())?;
            let library = MapLibrary {
                dir: map.parent().map(Path::to_path_buf),
                config: cfg.clone(),
            };
            let grid = library.load_file(&map)?;
            let home = start.unwrap_or_else(|| grid.origin() + Vec3::repeat(1.0));
            let name = map.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let sim = Simulation::new(cfg, grid, &name, home, library);
            let listener = TcpListener::bind((host.as_str(), port)).map_err(|e| format!("binding {host}:{port}: {e}"))?;
            eprintln!("listening on {}", listener.local_addr().map_err(|e| e.to_string())?);
            let opts = ServeOptions {
                tick: Duration::from_millis(20),
                time_scale,
            };
            service::serve(listener, sim, opts, Arc::new(AtomicBool::new(false))).map_err(|e| e.to_string())
        }
        Cmd::Bench { runs, density, seed, solver, config, out, no_timing, threads } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.planner.solver = solver;
            let mut spec = BenchmarkSpec {
                runs,
                density,
                seed,
                solver,
                config: cfg,
                record_timing: !no_timing,
                ..BenchmarkSpec::default()
            };
            if let Some(t) = threads {
                spec.threads = t.max(1);
            }
            let records = bench::run_benchmark(&spec).map_err(|e| e.to_string())?;
            let s = bench::summarize(&records);
            eprintln!(
                "success {:.2} mean evaluations {:.1} mean optimize_ms {:.3}",
                s.success_rate, s.avg.function_evaluations, s.avg.optimize_ms
            );
            write(&out, &bench::report_csv(&records))
        }
        Cmd::GenMap { density, seed, out } => {
            let spec = BenchmarkSpec { density, ..BenchmarkSpec::default() };
            let grid = bench::gen_random_map(&spec, seed).map_err(|e| e.to_string())?;
            write(&out, &MapFile::from_grid(&grid).to_text())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line entry point.
//!
//! Verbs: `run` (single bias point), `sweep` (IV), `ensemble` (disorder
//! statistics), `validate` (config check only), `bench` (strong-scaling
//! harness). Exit codes: 0 success, 2 config error, 3 solver
//! non-convergence (partial outputs kept), 4 transport failure.

use clap::{Parser, Subcommand, ValueEnum};
use negfsim::config::{load_config, RunConfig};
use negfsim::parallel::{
    build_comm_schedule, execute_round, in_process_mesh, partition_tuples, socket_mesh, Transport,
    TupleDiags,
};
use negfsim::profiler::{emit_profile, Profiler};
use negfsim::sweep::{self, csv_row, CSV_HEADER};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

const EXIT_CONFIG: u8 = 2;
const EXIT_NONCONVERGED: u8 = 3;
const EXIT_TRANSPORT: u8 = 4;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TransportKind {
    Inprocess,
    Socket,
}

#[derive(Parser)]
#[command(name = "negfsim", about = "NEGF quantum transport simulator for thin-body transistors")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Path to the run configuration file.
    #[arg(long, global = true, default_value = "negfsim.cfg")]
    config: PathBuf,
    /// Worker count (overrides the config).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Message fabric for multi-worker reductions.
    #[arg(long, global = true, value_enum, default_value = "inprocess")]
    transport: TransportKind,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Device / ensemble base seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Verb {
    /// Solve a single bias point (first configured gate voltage).
    Run,
    /// Two-curve (ballistic + scattered) IV sweep over all gate voltages.
    Sweep,
    /// Disorder-ensemble statistics at fixed bias.
    Ensemble,
    /// Parse and validate the configuration, reporting every violation.
    Validate,
    /// Strong-scaling harness over --workers (busy-time projection).
    Bench,
}

fn load(cli: &Cli) -> Result<RunConfig, u8> {
    match load_config(&cli.config) {
        Ok(mut cfg) => {
            if let Some(w) = cli.workers {
                cfg.solver.workers = w;
            }
            if let Some(out) = &cli.out {
                cfg.output_dir = out.display().to_string();
            }
            if let Some(seed) = cli.seed {
                cfg.device.rng_seed = seed;
                if let Some(e) = &mut cfg.ensemble {
                    e.base_seed = seed;
                }
            }
            Ok(cfg)
        }
        Err(errors) => {
            eprintln!("configuration errors in {}:", cli.config.display());
            for e in errors {
                eprintln!("  {e}");
            }
            Err(EXIT_CONFIG)
        }
    }
}

/// Exercise one distributed reduction round over the configured transport so
/// multi-worker runs go through the real exchange path; returns Err on any
/// transport failure.
fn transport_smoke(cfg: &RunConfig, kind: TransportKind) -> Result<(), String> {
    let n = cfg.solver.workers;
    if n <= 1 {
        return Ok(());
    }
    let (graph, assignment) =
        sweep::build_sample(cfg, cfg.device.rng_seed).map_err(|e| e.to_string())?;
    let grid = Arc::new(sweep::build_grid(cfg, &graph, &assignment).map_err(|e| e.to_string())?);
    let costs: Vec<f64> = vec![1.0; grid.n_tuples()];
    let partition = Arc::new(partition_tuples(&costs, n).map_err(|e| e.to_string())?);
    let schedule = Arc::new(build_comm_schedule(&partition, &grid).map_err(|e| e.to_string())?);
    let n_sites = graph.n_active_sites() * cfg.device.orbitals_per_site;
    let mut handles = Vec::new();
    let run = |w: usize,
               mut transport: Box<dyn Transport + Send>,
               grid: Arc<negfsim::ekgrid::EkGrid>,
               partition: Arc<negfsim::parallel::Partition>,
               schedule: Arc<negfsim::parallel::CommSchedule>| {
        std::thread::spawn(move || {
            let local: TupleDiags = partition
                .tuples_of(w)
                .into_iter()
                .map(|t| {
                    let v = vec![negfsim::linalg::C64::new(0.0, -1.0); n_sites];
                    (t, (v.clone(), v))
                })
                .collect();
            execute_round(w, &partition, &schedule, &grid, &local, transport.as_mut())
                .map(|_| ())
                .map_err(|e| e.to_string())
        })
    };
    match kind {
        TransportKind::Inprocess => {
            for (w, endpoint) in in_process_mesh(n, Duration::from_secs(60)).into_iter().enumerate() {
                handles.push(run(w, Box::new(endpoint), grid.clone(), partition.clone(), schedule.clone()));
            }
        }
        TransportKind::Socket => {
            let mesh = socket_mesh(n, 39400).map_err(|e| e.to_string())?;
            for (w, endpoint) in mesh.into_iter().enumerate() {
                handles.push(run(w, Box::new(endpoint), grid.clone(), partition.clone(), schedule.clone()));
            }
        }
    }
    for h in handles {
        h.join().map_err(|_| "worker panicked".to_string())??;
    }
    Ok(())
}

fn write_profile(trees: Vec<(usize, Vec<negfsim::profiler::ProfileNode>)>, out_dir: &Path) {
    let xml = emit_profile(&trees);
    if let Err(e) = std::fs::write(out_dir.join("profile.xml"), xml) {
        eprintln!("warning: cannot write profile.xml: {e}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(cfg) => cfg,
        Err(code) => return ExitCode::from(code),
    };
    let out_dir = PathBuf::from(&cfg.output_dir);
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        eprintln!("cannot create output directory {}: {e}", out_dir.display());
        return ExitCode::from(EXIT_CONFIG);
    }

    match cli.verb {
        Verb::Validate => {
            println!("configuration ok: {}", cli.config.display());
            ExitCode::SUCCESS
        }
        Verb::Run => {
            if let Err(e) = transport_smoke(&cfg, cli.transport) {
                eprintln!("transport failure: {e}");
                return ExitCode::from(EXIT_TRANSPORT);
            }
            let vg = cfg.bias.gate_voltages_v.first().copied().unwrap_or(0.0);
            let mut profiler = Profiler::new(0);
            profiler.tic("run");
            let mut ok = true;
            for &scattered in &[false, true] {
                profiler.tic(if scattered { "scattered" } else { "ballistic" });
                let res = sweep::run_point(&cfg, vg, cfg.device.rng_seed, scattered, None);
                profiler
                    .toc(if scattered { "scattered" } else { "ballistic" })
                    .unwrap();
                match res {
                    Ok(out) => {
                        println!("{CSV_HEADER}");
                        println!("{}", csv_row(&out.record));
                        if out.record.status != "ok" {
                            ok = false;
                        }
                    }
                    Err(e) => {
                        eprintln!("solver error: {e}");
                        ok = false;
                    }
                }
            }
            profiler.toc("run").unwrap();
            write_profile(vec![profiler.finish().unwrap()], &out_dir);
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_NONCONVERGED)
            }
        }
        Verb::Sweep => {
            if let Err(e) = transport_smoke(&cfg, cli.transport) {
                eprintln!("transport failure: {e}");
                return ExitCode::from(EXIT_TRANSPORT);
            }
            let mut profiler = Profiler::new(0);
            profiler.tic("sweep");
            let result = sweep::iv_sweep(&cfg, &out_dir);
            profiler.toc("sweep").unwrap();
            write_profile(vec![profiler.finish().unwrap()], &out_dir);
            match result {
                Ok(records) => {
                    println!("wrote {} rows to {}", records.len(), out_dir.join("sweep.csv").display());
                    if records.iter().all(|r| r.status == "ok") {
                        ExitCode::SUCCESS
                    } else {
                        eprintln!("some points did not converge; partial outputs kept");
                        ExitCode::from(EXIT_NONCONVERGED)
                    }
                }
                Err(e) => {
                    eprintln!("sweep failed: {e}");
                    ExitCode::from(EXIT_NONCONVERGED)
                }
            }
        }
        Verb::Ensemble => {
            let mut profiler = Profiler::new(0);
            profiler.tic("ensemble");
            let result = sweep::ensemble(&cfg, &out_dir);
            profiler.toc("ensemble").unwrap();
            write_profile(vec![profiler.finish().unwrap()], &out_dir);
            match result {
                Ok(records) => {
                    println!(
                        "wrote {} rows to {}",
                        records.len(),
                        out_dir.join("ensemble.csv").display()
                    );
                    if records.iter().all(|r| r.status == "ok") {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_NONCONVERGED)
                    }
                }
                Err(e) => {
                    eprintln!("ensemble failed: {e}");
                    ExitCode::from(EXIT_NONCONVERGED)
                }
            }
        }
        Verb::Bench => {
            let workers = [1usize, 2, 4, 8];
            match sweep::bench_scaling(&cfg, &workers, false) {
                Ok(rows) => {
                    println!("# busy-time strong-scaling projection (single-host measurement)");
                    println!("workers,max_busy_s,total_busy_s,efficiency,imbalance");
                    for r in &rows {
                        println!(
                            "{},{:.6},{:.6},{:.4},{:.4}",
                            r.workers, r.max_busy_s, r.total_busy_s, r.efficiency, r.imbalance
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("bench failed: {e}");
                    ExitCode::from(EXIT_NONCONVERGED)
                }
            }
        }
    }
}

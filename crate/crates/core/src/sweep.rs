//! Run drivers: single bias point, IV sweep, disorder ensemble, memory step
//! report and the strong-scaling bench harness, plus the CSV/plot artifacts.

use crate::config::RunConfig;
use crate::device::{
    apply_surface_roughness, assemble_hamiltonian, assign_alloy, build_device, AlloyAssignment,
    BlockTridiagonalOperator, DeviceGraph,
};
use crate::ekgrid::{self, EkGrid, GridMode};
use crate::leads::{evaluate_lead, AttachSide, LeadModel};
use crate::linalg::C64;
use crate::negf::GreensSlice;
use crate::observables::{current_density, CurrentResult};
use crate::parallel::{estimate_cost, partition_tuples};
use crate::poisson::{self, outer_scf, ChargeModel, PoissonMesh, ScfOutcome};
use crate::scattering::{
    born_iteration, bose_occupation, reduce_couplings, BornInputs, CouplingConstants, SigmaState,
    TupleLeads,
};
use std::io::Write;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("device: {0}")]
    Device(#[from] crate::device::DeviceError),
    #[error("grid: {0}")]
    Grid(#[from] crate::ekgrid::GridError),
    #[error("lead: {0}")]
    Lead(#[from] crate::leads::LeadError),
    #[error("scattering: {0}")]
    Scattering(#[from] crate::scattering::ScatteringError),
    #[error("poisson: {0}")]
    Poisson(#[from] crate::poisson::PoissonError),
    #[error("observable: {0}")]
    Observable(#[from] crate::observables::ObservableError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("contacts must be rank-uniform: first slabs have ranks {0} and {1}")]
    RoughContact(usize, usize),
}

/// One CSV row of a sweep/ensemble.
#[derive(Debug, Clone)]
pub struct IvRecord {
    pub vg: f64,
    pub vd: f64,
    pub sample_seed: u64,
    /// "ballistic" or "scattered".
    pub mode: &'static str,
    pub current_a_per_nm: f64,
    pub outer_iters: usize,
    pub inner_iters_total: usize,
    pub max_current_nonuniformity: f64,
    pub status: String,
    pub wall_s: f64,
}

/// Fixed, versioned schema. `wall_s` is the only run-dependent column; every
/// other byte is deterministic for a given config and seed.
pub const CSV_HEADER: &str =
    "# iv-sweep csv schema v1\nvg,vd,sample_seed,mode,current_A_per_nm,outer_iters,inner_iters_total,max_current_nonuniformity,status,wall_s";

pub fn csv_row(r: &IvRecord) -> String {
    format!(
        "{:.6},{:.6},{},{},{:.12e},{},{},{:.6e},{},{:.3}",
        r.vg,
        r.vd,
        r.sample_seed,
        r.mode,
        r.current_a_per_nm,
        r.outer_iters,
        r.inner_iters_total,
        r.max_current_nonuniformity,
        r.status,
        r.wall_s
    )
}

/// Strip the trailing wall_s column — the deterministic part of a row.
pub fn csv_row_deterministic(line: &str) -> &str {
    match line.rfind(',') {
        Some(p) if !line.starts_with('#') && line.contains(',') => &line[..p],
        _ => line,
    }
}

// ---------------------------------------------------------------------------
// Geometry + leads
// ---------------------------------------------------------------------------

/// Build the device graph and disorder assignment for one sample seed.
pub fn build_sample(
    cfg: &RunConfig,
    sample_seed: u64,
) -> Result<(DeviceGraph, AlloyAssignment), SweepError> {
    let mut spec = cfg.device.clone();
    spec.rng_seed = sample_seed;
    let mut graph = build_device(&spec)?;
    if let Some(rs) = &spec.roughness {
        graph = apply_surface_roughness(&graph, spec.lattice_constant_nm, rs)?;
    }
    let assignment = assign_alloy(&graph, &cfg.materials, spec.alloy_fraction_x, spec.disorder_mode, sample_seed)?;
    Ok((graph, assignment))
}

/// Semi-infinite flat-band contacts that repeat the adjacent boundary slab of
/// H(k). Requires the two end slab pairs to be rank-uniform (roughness must
/// not thin the contacts).
pub fn lead_models(h: &BlockTridiagonalOperator, mu_l: f64, mu_r: f64) -> Result<(LeadModel, LeadModel), SweepError> {
    let ranks = h.ranks();
    let n = h.n_slabs();
    if ranks[0] != ranks[1] {
        return Err(SweepError::RoughContact(ranks[0], ranks[1]));
    }
    if ranks[n - 1] != ranks[n - 2] {
        return Err(SweepError::RoughContact(ranks[n - 2], ranks[n - 1]));
    }
    let left = LeadModel {
        h00: h.diagonal_blocks[0].clone(),
        h01: h.coupling_blocks[0].adjoint(),
        mu_ev: mu_l,
        attach: AttachSide::First,
    };
    let right = LeadModel {
        h00: h.diagonal_blocks[n - 1].clone(),
        h01: h.coupling_blocks[n - 2].clone(),
        mu_ev: mu_r,
        attach: AttachSide::Last,
    };
    Ok((left, right))
}

/// Evaluate both contact self-energies at every grid tuple.
pub fn evaluate_all_leads(
    hams: &[BlockTridiagonalOperator],
    grid: &EkGrid,
    mu_l: f64,
    mu_r: f64,
    temperature_k: f64,
) -> Result<Vec<TupleLeads>, SweepError> {
    let mut leads = Vec::with_capacity(grid.n_tuples());
    for e_idx in 0..grid.n_energies() {
        let e = grid.energies_ev[e_idx];
        for k_idx in 0..grid.n_momenta() {
            let k = grid.momenta_inv_nm[k_idx];
            let (l, r) = lead_models(&hams[k_idx], mu_l, mu_r)?;
            // 1e-10 relative residual: disordered boundary blocks can pin the
            // fixed-point polish at a roundoff floor near 1e-11, and lead
            // self-energy errors at this level are orders of magnitude below
            // every downstream observable tolerance
            let first = evaluate_lead(&l, e, k, temperature_k, 1e-6, 1e-10)?;
            let last = evaluate_lead(&r, e, k, temperature_k, 1e-6, 1e-10)?;
            leads.push(TupleLeads { first, last });
        }
    }
    Ok(leads)
}

/// Quadrature grid per config. Adaptive mode refines a homogeneous base grid
/// on a ballistic energy-resolved current indicator.
pub fn build_grid(
    cfg: &RunConfig,
    graph: &DeviceGraph,
    assignment: &AlloyAssignment,
) -> Result<EkGrid, SweepError> {
    let g = &cfg.grid;
    let base = ekgrid::build_homogeneous(
        g.e_min_ev,
        g.e_max_ev,
        cfg.scattering.optical_energy_ev,
        g.points_per_eop,
        g.n_momenta,
        cfg.device.transverse_period_nm(),
    )?;
    if g.mode == GridMode::Homogeneous || g.adaptive_budget == 0 {
        return Ok(base);
    }
    // ballistic probe for the refinement indicator
    let phi = vec![0.0; graph.n_active_sites()];
    let hams = assemble_all(graph, assignment, cfg, &base, &phi)?;
    let leads = evaluate_all_leads(
        &hams,
        &base,
        cfg.bias.mu_source_ev,
        cfg.bias.mu_drain_ev,
        cfg.scattering.temperature_k,
    )?;
    let inputs = BornInputs {
        hamiltonians: &hams,
        leads: &leads,
        grid: &base,
        couplings: CouplingConstants {
            k_ac_ev2_nm: 0.0,
            k_op_ev2_nm: 0.0,
        },
        n0: 0.0,
    };
    let outcome = born_iteration(&inputs, None, 1.0, 1e-6, 1)?;
    let current = current_density(&hams, &outcome.slices, &base)?;
    let indicator: Vec<f64> = current.spectrum_a_per_nm_ev.iter().map(|v| v.abs()).collect();
    Ok(ekgrid::refine_adaptive(&base, &indicator, g.adaptive_budget)?)
}

fn assemble_all(
    graph: &DeviceGraph,
    assignment: &AlloyAssignment,
    cfg: &RunConfig,
    grid: &EkGrid,
    phi_sites_v: &[f64],
) -> Result<Vec<BlockTridiagonalOperator>, SweepError> {
    grid.momenta_inv_nm
        .iter()
        .map(|&k| {
            assemble_hamiltonian(graph, assignment, &cfg.materials, &cfg.device, k, phi_sites_v)
                .map_err(SweepError::from)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Charge model: NEGF density at fixed potential
// ---------------------------------------------------------------------------

/// NEGF charge model driving the outer Poisson loop. The Born self-energy is
/// warm-started across outer iterations (and across bias points when the
/// model is reused).
pub struct NegfChargeModel<'a> {
    pub cfg: &'a RunConfig,
    pub graph: &'a DeviceGraph,
    pub assignment: &'a AlloyAssignment,
    pub grid: &'a EkGrid,
    pub couplings: CouplingConstants,
    pub n0: f64,
    pub warm: Option<SigmaState>,
    /// Hamiltonians and converged slices of the most recent density call.
    pub last_hams: Vec<BlockTridiagonalOperator>,
    pub last_slices: Vec<GreensSlice>,
    pub last_converged: bool,
}

impl<'a> NegfChargeModel<'a> {
    pub fn new(
        cfg: &'a RunConfig,
        graph: &'a DeviceGraph,
        assignment: &'a AlloyAssignment,
        grid: &'a EkGrid,
        scattered: bool,
    ) -> Result<Self, SweepError> {
        let couplings = if scattered {
            reduce_couplings(&cfg.scattering)?
        } else {
            CouplingConstants {
                k_ac_ev2_nm: 0.0,
                k_op_ev2_nm: 0.0,
            }
        };
        let n0 = bose_occupation(cfg.scattering.optical_energy_ev, cfg.scattering.temperature_k);
        Ok(NegfChargeModel {
            cfg,
            graph,
            assignment,
            grid,
            couplings,
            n0,
            warm: None,
            last_hams: Vec::new(),
            last_slices: Vec::new(),
            last_converged: true,
        })
    }

    pub fn site_volume_nm3(&self) -> f64 {
        self.cfg.device.lattice_constant_nm * self.cfg.device.cross_section_area_nm2
    }
}

impl ChargeModel for NegfChargeModel<'_> {
    fn density(&mut self, phi_per_site_v: &[f64]) -> Result<(Vec<f64>, usize), String> {
        let cfg = self.cfg;
        let hams = assemble_all(self.graph, self.assignment, cfg, self.grid, phi_per_site_v)
            .map_err(|e| e.to_string())?;
        let leads = evaluate_all_leads(
            &hams,
            self.grid,
            cfg.bias.mu_source_ev,
            cfg.bias.mu_drain_ev,
            cfg.scattering.temperature_k,
        )
        .map_err(|e| e.to_string())?;
        let inputs = BornInputs {
            hamiltonians: &hams,
            leads: &leads,
            grid: self.grid,
            couplings: self.couplings,
            n0: self.n0,
        };
        let outcome = born_iteration(
            &inputs,
            self.warm.take(),
            cfg.solver.born_mixing,
            cfg.solver.born_tolerance_ev,
            cfg.solver.born_max_iterations,
        )
        .map_err(|e| e.to_string())?;
        self.warm = Some(outcome.sigma.clone());
        self.last_converged = outcome.converged;
        let gl: Vec<Vec<C64>> = outcome.slices.iter().map(|s| s.gl_site_diag()).collect();
        let density = poisson::density_from_g(&gl, self.grid, self.site_volume_nm3())
            .map_err(|e| e.to_string())?;
        self.last_hams = hams;
        self.last_slices = outcome.slices;
        Ok((density, outcome.iterations))
    }
}

// ---------------------------------------------------------------------------
// Single bias point
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct PointOutcome {
    pub record: IvRecord,
    pub scf: ScfOutcome,
    pub current: CurrentResult,
}

pub fn build_mesh(cfg: &RunConfig, graph: &DeviceGraph, vg: f64) -> Result<PoissonMesh, SweepError> {
    Ok(PoissonMesh::double_gate(
        graph,
        cfg.device.lattice_constant_nm,
        cfg.poisson.eps_semiconductor,
        cfg.poisson.eps_oxide,
        cfg.poisson.n_oxide_rows,
        cfg.poisson.doping_n_d_per_nm3,
        vg,
        vg,
    )?)
}

/// Run one bias point (one mode). `phi_init` warm-starts the outer loop from
/// a neighbouring bias point.
pub fn run_point(
    cfg: &RunConfig,
    vg: f64,
    sample_seed: u64,
    scattered: bool,
    phi_init: Option<Vec<f64>>,
) -> Result<PointOutcome, SweepError> {
    let start = Instant::now();
    let (graph, assignment) = build_sample(cfg, sample_seed)?;
    let grid = build_grid(cfg, &graph, &assignment)?;
    let mesh = build_mesh(cfg, &graph, vg)?;
    let mut model = NegfChargeModel::new(cfg, &graph, &assignment, &grid, scattered)?;
    let scf = outer_scf(
        &mesh,
        &mut model,
        phi_init,
        cfg.solver.outer_mixing,
        cfg.solver.outer_tolerance_v,
        cfg.solver.outer_max_iterations,
    )?;
    let current = current_density(&model.last_hams, &model.last_slices, &grid)?;
    let n_if = current.per_interface_a_per_nm.len();
    let mid = current.per_interface_a_per_nm[n_if / 2];
    let status = if scf.converged && model.last_converged {
        "ok".to_string()
    } else if !scf.converged {
        "outer_unconverged".to_string()
    } else {
        "born_unconverged".to_string()
    };
    let record = IvRecord {
        vg,
        vd: cfg.bias.drain_voltage_v,
        sample_seed,
        mode: if scattered { "scattered" } else { "ballistic" },
        current_a_per_nm: mid,
        outer_iters: scf.outer_iterations,
        inner_iters_total: scf.inner_iterations_total,
        max_current_nonuniformity: current.max_nonuniformity,
        status,
        wall_s: start.elapsed().as_secs_f64(),
    };
    Ok(PointOutcome {
        record,
        scf,
        current,
    })
}

// ---------------------------------------------------------------------------
// Sweep / ensemble drivers
// ---------------------------------------------------------------------------

fn open_csv(path: &Path) -> std::io::Result<std::fs::File> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{CSV_HEADER}")?;
    f.flush()?;
    Ok(f)
}

fn append_row(f: &mut std::fs::File, r: &IvRecord) -> std::io::Result<()> {
    writeln!(f, "{}", csv_row(r))?;
    // crash-safe: every record hits the file before the next point starts
    f.flush()
}

/// Two-curve IV sweep (ballistic and scattered at every gate voltage), with
/// incremental CSV flushing and gnuplot-compatible `.dat` companions.
/// Per-point solver failures are recorded in-row; the sweep continues.
pub fn iv_sweep(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<IvRecord>, SweepError> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = open_csv(&out_dir.join("sweep.csv"))?;
    let mut records = Vec::new();
    for &scattered in &[false, true] {
        let mut phi_init: Option<Vec<f64>> = None;
        for &vg in &cfg.bias.gate_voltages_v {
            let record = match run_point(cfg, vg, cfg.device.rng_seed, scattered, phi_init.clone()) {
                Ok(out) => {
                    phi_init = Some(out.scf.phi_nodes_v.clone());
                    out.record
                }
                Err(e) => IvRecord {
                    vg,
                    vd: cfg.bias.drain_voltage_v,
                    sample_seed: cfg.device.rng_seed,
                    mode: if scattered { "scattered" } else { "ballistic" },
                    current_a_per_nm: f64::NAN,
                    outer_iters: 0,
                    inner_iters_total: 0,
                    max_current_nonuniformity: f64::NAN,
                    status: format!("error:{}", e.to_string().replace(',', ";")),
                    wall_s: 0.0,
                },
            };
            append_row(&mut csv, &record)?;
            records.push(record);
        }
    }
    write_dat_companions(&records, out_dir)?;
    Ok(records)
}

fn write_dat_companions(records: &[IvRecord], out_dir: &Path) -> std::io::Result<()> {
    for mode in ["ballistic", "scattered"] {
        let mut f = std::fs::File::create(out_dir.join(format!("sweep_{mode}.dat")))?;
        writeln!(f, "# vg_V current_A_per_nm")?;
        for r in records.iter().filter(|r| r.mode == mode && r.status == "ok") {
            writeln!(f, "{:.6} {:.12e}", r.vg, r.current_a_per_nm)?;
        }
    }
    Ok(())
}

/// Disorder ensemble at the first configured gate voltage: sample seeds
/// base_seed + i, ballistic and scattered rows per sample.
pub fn ensemble(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<IvRecord>, SweepError> {
    let ens = cfg
        .ensemble
        .clone()
        .unwrap_or(crate::config::EnsembleSettings {
            n_samples: 1,
            base_seed: cfg.device.rng_seed,
        });
    std::fs::create_dir_all(out_dir)?;
    let mut csv = open_csv(&out_dir.join("ensemble.csv"))?;
    let vg = cfg.bias.gate_voltages_v.first().copied().unwrap_or(0.0);
    let mut records = Vec::new();
    for i in 0..ens.n_samples {
        let seed = ens.base_seed + i as u64;
        for &scattered in &[false, true] {
            let record = match run_point(cfg, vg, seed, scattered, None) {
                Ok(out) => out.record,
                Err(e) => IvRecord {
                    vg,
                    vd: cfg.bias.drain_voltage_v,
                    sample_seed: seed,
                    mode: if scattered { "scattered" } else { "ballistic" },
                    current_a_per_nm: f64::NAN,
                    outer_iters: 0,
                    inner_iters_total: 0,
                    max_current_nonuniformity: f64::NAN,
                    status: format!("error:{}", e.to_string().replace(',', ";")),
                    wall_s: 0.0,
                },
            };
            append_row(&mut csv, &record)?;
            records.push(record);
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Memory step report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MemoryStepReport {
    /// (tuples held in series, peak bytes).
    pub rows: Vec<(usize, usize)>,
    pub slope_bytes_per_tuple: f64,
    pub intercept_bytes: f64,
    pub r_squared: f64,
}

/// Least-squares affine fit y = a + b x with coefficient of determination.
pub fn affine_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - (a + b * x)).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (a, b, r2)
}

/// Instrumented peak-memory measurement: solve and *retain* `t` Green's
/// function slices at a time, recording the allocator peak for each t.
pub fn memory_step_report(
    ham: &BlockTridiagonalOperator,
    leads: &TupleLeads,
    energy_ev: f64,
    tuples_in_series: &[usize],
) -> Result<MemoryStepReport, SweepError> {
    use crate::memtrack;
    use crate::negf::{solve_slice, SelfEnergyTotal};
    use crate::scattering::assemble_total;
    let ranks = ham.ranks();
    let zero_phonon = crate::scattering::SelfEnergySet {
        energy_ev,
        sigma_r_phonon_diag: vec![C64::new(0.0, 0.0); ham.total_rank()],
        sigma_l_phonon_diag: vec![C64::new(0.0, 0.0); ham.total_rank()],
    };
    let total: SelfEnergyTotal =
        assemble_total(&leads.first, &leads.last, &zero_phonon, energy_ev, &ranks)?;
    let mut rows = Vec::new();
    for &t in tuples_in_series {
        memtrack::reset_peak();
        let base = memtrack::current_bytes();
        let mut held: Vec<GreensSlice> = Vec::new();
        for _ in 0..t {
            held.push(solve_slice(ham, &total, energy_ev, 0.0, true).map_err(
                crate::scattering::ScatteringError::from,
            )?);
        }
        let peak = memtrack::peak_bytes().saturating_sub(base);
        drop(held);
        rows.push((t, peak));
    }
    let xs: Vec<f64> = rows.iter().map(|&(t, _)| t as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|&(_, p)| p as f64).collect();
    let (a, b, r2) = affine_fit(&xs, &ys);
    Ok(MemoryStepReport {
        rows,
        slope_bytes_per_tuple: b,
        intercept_bytes: a,
        r_squared: r2,
    })
}

// ---------------------------------------------------------------------------
// Bench harness: busy-time strong scaling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub workers: usize,
    /// Busiest worker's summed solve time, s.
    pub max_busy_s: f64,
    /// Sum over all tuples, s (the 1-worker busy time).
    pub total_busy_s: f64,
    /// total / (workers * max_busy) — efficiency of the busy-time projection.
    pub efficiency: f64,
    pub imbalance: f64,
}

/// A prepared benchmark problem: grid plus per-momentum Hamiltonians, ready
/// for timing passes.
struct BenchProblem {
    grid: EkGrid,
    hams: Vec<BlockTridiagonalOperator>,
    mu_source_ev: f64,
    mu_drain_ev: f64,
    temperature_k: f64,
}

fn bench_prepare(cfg: &RunConfig, adaptive: bool) -> Result<BenchProblem, SweepError> {
    let (graph, assignment) = build_sample(cfg, cfg.device.rng_seed)?;
    let mut cfg_grid = cfg.clone();
    cfg_grid.grid.mode = if adaptive { GridMode::Adaptive } else { GridMode::Homogeneous };
    if adaptive && cfg_grid.grid.adaptive_budget == 0 {
        cfg_grid.grid.adaptive_budget = cfg.grid.n_momenta.max(4);
    }
    let grid = build_grid(&cfg_grid, &graph, &assignment)?;
    let phi = vec![0.0; graph.n_active_sites()];
    let hams = assemble_all(&graph, &assignment, cfg, &grid, &phi)?;
    Ok(BenchProblem {
        grid,
        hams,
        mu_source_ev: cfg.bias.mu_source_ev,
        mu_drain_ev: cfg.bias.mu_drain_ev,
        temperature_k: cfg.scattering.temperature_k,
    })
}

/// One timing pass over every tuple of the grid, recording into `tuple_times`
/// the minimum over passes. The timed job is the full per-tuple work a worker
/// performs: both contact self-energies (whose decimation/polish cost is
/// strongly energy dependent) plus the RGF solve. Minimum over whole passes
/// (not back-to-back repeats per tuple) suppresses scheduler noise on a
/// shared host: a transient slowdown corrupts at most one pass and the
/// per-tuple minimum discards it.
fn bench_pass(p: &BenchProblem, tuple_times: &mut [f64]) -> Result<(), SweepError> {
    for e_idx in 0..p.grid.n_energies() {
        for k_idx in 0..p.grid.n_momenta() {
            let t = p.grid.tuple_index(e_idx, k_idx);
            let e = p.grid.energies_ev[e_idx];
            let k = p.grid.momenta_inv_nm[k_idx];
            let zero = crate::scattering::SelfEnergySet {
                energy_ev: e,
                sigma_r_phonon_diag: vec![C64::new(0.0, 0.0); p.hams[k_idx].total_rank()],
                sigma_l_phonon_diag: vec![C64::new(0.0, 0.0); p.hams[k_idx].total_rank()],
            };
            let start = Instant::now();
            let (lm, rm) = lead_models(&p.hams[k_idx], p.mu_source_ev, p.mu_drain_ev)?;
            let first = evaluate_lead(&lm, e, k, p.temperature_k, 1e-6, 1e-10)?;
            let last = evaluate_lead(&rm, e, k, p.temperature_k, 1e-6, 1e-10)?;
            let total =
                crate::scattering::assemble_total(&first, &last, &zero, e, &p.hams[k_idx].ranks())?;
            let _ = crate::negf::solve_slice(&p.hams[k_idx], &total, e, k, false)
                .map_err(crate::scattering::ScatteringError::from)?;
            let dt = start.elapsed().as_secs_f64();
            tuple_times[t] = tuple_times[t].min(dt);
        }
    }
    Ok(())
}

/// Project the partition's per-worker busy times from measured per-tuple
/// times for each requested worker count.
fn bench_project(p: &BenchProblem, tuple_times: &[f64], workers_list: &[usize]) -> Vec<BenchRow> {
    let total_busy: f64 = tuple_times.iter().sum();
    let costs: Vec<f64> = (0..p.grid.n_tuples())
        .map(|_| estimate_cost(&p.hams[0].ranks()))
        .collect();
    let mut out = Vec::new();
    for &w in workers_list {
        let partition = partition_tuples(&costs, w).expect("workers >= 1");
        let mut busy = vec![0.0f64; w];
        for (t, &owner) in partition.assignment.iter().enumerate() {
            busy[owner] += tuple_times[t];
        }
        let max_busy = busy.iter().cloned().fold(0.0f64, f64::max);
        let mean = total_busy / w as f64;
        out.push(BenchRow {
            workers: w,
            max_busy_s: max_busy,
            total_busy_s: total_busy,
            efficiency: if max_busy > 0.0 { total_busy / (w as f64 * max_busy) } else { 1.0 },
            imbalance: if mean > 0.0 { max_busy / mean - 1.0 } else { 0.0 },
        });
    }
    out
}

const BENCH_REPS: usize = 6;

/// Solve every tuple once, timing each, then project the partition's
/// per-worker busy times for each requested worker count. On a single-core
/// host this is a projection of parallel wall time from measured serial
/// per-tuple times, not a concurrent wall-clock measurement.
pub fn bench_scaling(
    cfg: &RunConfig,
    workers_list: &[usize],
    adaptive: bool,
) -> Result<Vec<BenchRow>, SweepError> {
    let p = bench_prepare(cfg, adaptive)?;
    let mut tuple_times = vec![f64::INFINITY; p.grid.n_tuples()];
    for _ in 0..BENCH_REPS {
        bench_pass(&p, &mut tuple_times)?;
    }
    Ok(bench_project(&p, &tuple_times, workers_list))
}

/// Benchmark two grid configurations as a matched pair, interleaving their
/// timing passes (A, B, A, B, ...). Interleaving makes a sustained host
/// slowdown contaminate the same pass index of both measurements instead of
/// one side's entire measurement, so the per-tuple minimum rejects it
/// symmetrically — essential when comparing the two imbalances per run.
pub fn bench_pair(
    cfg_a: &RunConfig,
    adaptive_a: bool,
    cfg_b: &RunConfig,
    adaptive_b: bool,
    workers_list: &[usize],
) -> Result<(Vec<BenchRow>, Vec<BenchRow>), SweepError> {
    let pa = bench_prepare(cfg_a, adaptive_a)?;
    let pb = bench_prepare(cfg_b, adaptive_b)?;
    let mut times_a = vec![f64::INFINITY; pa.grid.n_tuples()];
    let mut times_b = vec![f64::INFINITY; pb.grid.n_tuples()];
    for _ in 0..BENCH_REPS {
        bench_pass(&pa, &mut times_a)?;
        bench_pass(&pb, &mut times_b)?;
    }
    Ok((bench_project(&pa, &times_a, workers_list), bench_project(&pb, &times_b, workers_list)))
}

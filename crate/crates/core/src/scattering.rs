//! Phonon self-energies and the self-consistent Born iteration.
//!
//! Acoustic deformation-potential scattering is treated elastically; optical
//! deformation-potential scattering inelastically with a single phonon energy
//! E_op. Both self-energies are strictly diagonal in the site basis and
//! independent of the transverse momentum, so they are evaluated once per
//! energy and broadcast across the k grid.

use crate::constants::KB_EV_PER_K;
use crate::constants::{AMU_NM2_PS2_EV, HBAR_EV_PS};
use crate::device::BlockTridiagonalOperator;
use crate::ekgrid::{EkGrid, ShiftRef};
use crate::leads::LeadSelfEnergy;
use crate::linalg::C64;
use crate::negf::{self, GreensSlice, NegfError, SelfEnergyTotal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScatteringError {
    #[error("weight count {weights} does not match diagonal set count {diags}")]
    WeightMismatch { weights: usize, diags: usize },
    #[error("site count mismatch: expected {expected}, got {got}")]
    SiteMismatch { expected: usize, got: usize },
    #[error("energy tag mismatch between self-energy parts: {0} vs {1}")]
    TagMismatch(f64, f64),
    #[error("non-positive scattering parameter: {0}")]
    BadParam(&'static str),
    #[error("solver failure during Born iteration: {0}")]
    Solver(#[from] NegfError),
}

/// Physical inputs of the phonon models, in eV / nm / ps / amu / K units.
#[derive(Debug, Clone)]
pub struct ScatteringParams {
    /// Acoustic deformation potential D.
    pub d_acoustic_ev: f64,
    /// Sound velocity v.
    pub sound_velocity_nm_ps: f64,
    /// Debye energy (hbar omega_D).
    pub debye_energy_ev: f64,
    /// Optical phonon energy (hbar omega_0).
    pub optical_energy_ev: f64,
    /// Optical deformation potential epsilon.
    pub d_optical_ev_nm: f64,
    /// Mass density rho.
    pub mass_density_amu_nm3: f64,
    /// Transverse cross-section area A.
    pub area_nm2: f64,
    pub temperature_k: f64,
}

impl ScatteringParams {
    pub fn validate(&self) -> Result<(), ScatteringError> {
        let checks = [
            (self.d_acoustic_ev, "d_acoustic_ev"),
            (self.sound_velocity_nm_ps, "sound_velocity_nm_ps"),
            (self.debye_energy_ev, "debye_energy_ev"),
            (self.optical_energy_ev, "optical_energy_ev"),
            (self.d_optical_ev_nm, "d_optical_ev_nm"),
            (self.mass_density_amu_nm3, "mass_density_amu_nm3"),
            (self.area_nm2, "area_nm2"),
            (self.temperature_k, "temperature_k"),
        ];
        for (v, name) in checks {
            if !(v > 0.0) {
                return Err(ScatteringError::BadParam(name));
            }
        }
        Ok(())
    }

    /// Bose occupation of the optical mode; always recomputed, never cached.
    pub fn n0(&self) -> f64 {
        bose_occupation(self.optical_energy_ev, self.temperature_k)
    }
}

/// Reduced prefactors of the acoustic and optical self-energies. Both carry
/// eV^2 * nm so that multiplying by a momentum weight (1/nm) and a Green's
/// function diagonal (1/eV) yields an energy.
#[derive(Debug, Clone, Copy)]
pub struct CouplingConstants {
    pub k_ac_ev2_nm: f64,
    pub k_op_ev2_nm: f64,
}

/// Reduce the physical parameters to the two scalar prefactors.
///
/// Acoustic: K_ac = D^2 k_B T / (2 * E_D * rho v^2 * A). rho v^2 is converted
/// from amu/(nm ps^2) to eV/nm^3, leaving eV^2 * nm as required.
///
/// Optical: K_op = hbar^2 eps^2 / (8 pi^2 * E_op * A), with omega_0 = E_op /
/// hbar. The published optical prefactor is dimensionally loose (it omits a
/// normalization volume); the residual nm*ps^2/eV factor is read as 1 in this
/// unit system, which makes the default couplings illustrative rather than
/// material-exact. This function is the single place unit conventions live.
pub fn reduce_couplings(params: &ScatteringParams) -> Result<CouplingConstants, ScatteringError> {
    params.validate()?;
    let rho_v2_ev_nm3 =
        params.mass_density_amu_nm3 * params.sound_velocity_nm_ps.powi(2) * AMU_NM2_PS2_EV;
    let k_ac = params.d_acoustic_ev.powi(2) * KB_EV_PER_K * params.temperature_k
        / (2.0 * params.debye_energy_ev * rho_v2_ev_nm3 * params.area_nm2);
    let k_op = (HBAR_EV_PS * params.d_optical_ev_nm).powi(2)
        / (8.0 * std::f64::consts::PI.powi(2) * params.optical_energy_ev * params.area_nm2);
    Ok(CouplingConstants {
        k_ac_ev2_nm: k_ac,
        k_op_ev2_nm: k_op,
    })
}

/// n0 = 1 / (exp(E_op / k_B T) - 1).
pub fn bose_occupation(e_op_ev: f64, temperature_k: f64) -> f64 {
    assert!(e_op_ev > 0.0 && temperature_k > 0.0);
    1.0 / ((e_op_ev / (KB_EV_PER_K * temperature_k)).exp() - 1.0)
}

/// Per-energy phonon self-energy diagonals over all device sites.
#[derive(Debug, Clone)]
pub struct SelfEnergySet {
    pub energy_ev: f64,
    pub sigma_r_phonon_diag: Vec<C64>,
    pub sigma_l_phonon_diag: Vec<C64>,
}

fn check_weights(n_weights: usize, n_diags: usize) -> Result<(), ScatteringError> {
    if n_weights != n_diags {
        return Err(ScatteringError::WeightMismatch {
            weights: n_weights,
            diags: n_diags,
        });
    }
    Ok(())
}

fn weighted_sum(diags: &[Vec<C64>], weights: &[f64]) -> Result<Vec<C64>, ScatteringError> {
    check_weights(weights.len(), diags.len())?;
    let n = diags.first().map_or(0, |d| d.len());
    let mut out = vec![C64::new(0.0, 0.0); n];
    for (d, &w) in diags.iter().zip(weights) {
        if d.len() != n {
            return Err(ScatteringError::SiteMismatch {
                expected: n,
                got: d.len(),
            });
        }
        for (o, &v) in out.iter_mut().zip(d) {
            *o += v * w;
        }
    }
    Ok(out)
}

/// Elastic acoustic self-energy at fixed E: K_ac * sum_{k'} w_{k'} diag G(k',E).
/// Applies identically to the retarded and lesser functions, and the result is
/// the same for every k.
pub fn acoustic_self_energy(
    g_diags_per_k: &[Vec<C64>],
    k_weights: &[f64],
    k_ac_ev2_nm: f64,
) -> Result<Vec<C64>, ScatteringError> {
    let mut s = weighted_sum(g_diags_per_k, k_weights)?;
    for v in &mut s {
        *v *= k_ac_ev2_nm;
    }
    Ok(s)
}

/// Momentum-integrated diagonals at the two shifted energies; `None` means the
/// shift falls outside the grid and contributes zero.
#[derive(Debug, Clone)]
pub struct ShiftedDiagonals<'a> {
    pub plus: Option<&'a [C64]>,
    pub minus: Option<&'a [C64]>,
}

fn term(acc: &mut [C64], shifted: Option<&[C64]>, factor: f64) -> Result<(), ScatteringError> {
    if let Some(d) = shifted {
        if d.len() != acc.len() {
            return Err(ScatteringError::SiteMismatch {
                expected: acc.len(),
                got: d.len(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(d) {
            *a += v * factor;
        }
    }
    Ok(())
}

/// Inelastic optical lesser self-energy:
/// Sigma^<(E) = K_op * [(1+n0) <G^<(E+E_op)> + n0 <G^<(E-E_op)>]
/// where <.> is the momentum integral (already folded into the inputs).
pub fn optical_lesser_self_energy(
    gl: &ShiftedDiagonals,
    n_sites: usize,
    k_op_ev2_nm: f64,
    n0: f64,
) -> Result<Vec<C64>, ScatteringError> {
    let mut out = vec![C64::new(0.0, 0.0); n_sites];
    term(&mut out, gl.plus, 1.0 + n0)?;
    term(&mut out, gl.minus, n0)?;
    for v in &mut out {
        *v *= k_op_ev2_nm;
    }
    Ok(out)
}

/// Inelastic optical retarded self-energy, principal value dropped:
/// Sigma^R(E) = K_op * [(1+n0) <G^R(E-E_op)> + n0 <G^R(E+E_op)>
///                      + 1/2 <G^<(E-E_op)> - 1/2 <G^<(E+E_op)>].
pub fn optical_retarded_self_energy(
    gr: &ShiftedDiagonals,
    gl: &ShiftedDiagonals,
    n_sites: usize,
    k_op_ev2_nm: f64,
    n0: f64,
) -> Result<Vec<C64>, ScatteringError> {
    let mut out = vec![C64::new(0.0, 0.0); n_sites];
    term(&mut out, gr.minus, 1.0 + n0)?;
    term(&mut out, gr.plus, n0)?;
    term(&mut out, gl.minus, 0.5)?;
    term(&mut out, gl.plus, -0.5)?;
    for v in &mut out {
        *v *= k_op_ev2_nm;
    }
    Ok(out)
}

/// Split a flat per-site diagonal into per-slab vectors following the block
/// ranks of the operator at hand.
pub fn split_by_ranks(flat: &[C64], ranks: &[usize]) -> Vec<Vec<C64>> {
    let mut out = Vec::with_capacity(ranks.len());
    let mut off = 0;
    for &r in ranks {
        out.push(flat[off..off + r].to_vec());
        off += r;
    }
    out
}

/// Combine lead boundary blocks with the phonon diagonal into the total
/// self-energy of Eq. (3) form consumed by the Green's function solvers.
pub fn assemble_total(
    lead_first: &LeadSelfEnergy,
    lead_last: &LeadSelfEnergy,
    phonon: &SelfEnergySet,
    energy_ev: f64,
    ranks: &[usize],
) -> Result<SelfEnergyTotal, ScatteringError> {
    for tag in [lead_first.energy_ev, lead_last.energy_ev, phonon.energy_ev] {
        if (tag - energy_ev).abs() > 1e-9 {
            return Err(ScatteringError::TagMismatch(tag, energy_ev));
        }
    }
    let total: usize = ranks.iter().sum();
    if phonon.sigma_r_phonon_diag.len() != total {
        return Err(ScatteringError::SiteMismatch {
            expected: total,
            got: phonon.sigma_r_phonon_diag.len(),
        });
    }
    Ok(SelfEnergyTotal {
        sigma_r_diag: split_by_ranks(&phonon.sigma_r_phonon_diag, ranks),
        sigma_l_diag: split_by_ranks(&phonon.sigma_l_phonon_diag, ranks),
        lead_r_first: Some(lead_first.sigma_r.clone()),
        lead_r_last: Some(lead_last.sigma_r.clone()),
        lead_l_first: Some(lead_first.sigma_lesser.clone()),
        lead_l_last: Some(lead_last.sigma_lesser.clone()),
    })
}

/// Lead boundary blocks for one tuple, first and last slab.
#[derive(Debug, Clone)]
pub struct TupleLeads {
    pub first: LeadSelfEnergy,
    pub last: LeadSelfEnergy,
}

/// Everything the Born iteration needs that does not change between iterates.
pub struct BornInputs<'a> {
    /// One Hamiltonian per momentum point, identical slab ranks.
    pub hamiltonians: &'a [BlockTridiagonalOperator],
    /// Lead blocks per tuple, indexed by `grid.tuple_index`.
    pub leads: &'a [TupleLeads],
    pub grid: &'a EkGrid,
    pub couplings: CouplingConstants,
    pub n0: f64,
}

/// Per-energy phonon self-energy state, warm-startable across outer
/// iterations and bias points.
#[derive(Debug, Clone)]
pub struct SigmaState {
    /// One set per grid energy.
    pub per_energy: Vec<SelfEnergySet>,
}

impl SigmaState {
    pub fn zero(grid: &EkGrid, n_sites: usize) -> Self {
        SigmaState {
            per_energy: grid
                .energies_ev
                .iter()
                .map(|&e| SelfEnergySet {
                    energy_ev: e,
                    sigma_r_phonon_diag: vec![C64::new(0.0, 0.0); n_sites],
                    sigma_l_phonon_diag: vec![C64::new(0.0, 0.0); n_sites],
                })
                .collect(),
        }
    }
}

#[derive(Debug)]
pub struct BornOutcome {
    /// One slice per tuple, `grid.tuple_index` order, off-diagonals included.
    pub slices: Vec<GreensSlice>,
    pub sigma: SigmaState,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

fn resolve_shift(rows: &[Vec<C64>], shift: &ShiftRef, n_sites: usize) -> Option<Vec<C64>> {
    match shift {
        ShiftRef::Exact(i) => Some(rows[*i].clone()),
        ShiftRef::Interp { lo, hi, frac } => {
            let mut v = vec![C64::new(0.0, 0.0); n_sites];
            for s in 0..n_sites {
                v[s] = rows[*lo][s] * (1.0 - frac) + rows[*hi][s] * *frac;
            }
            Some(v)
        }
        ShiftRef::Absent => None,
    }
}

fn solve_all(
    inputs: &BornInputs,
    sigma: &SigmaState,
    with_offdiag: bool,
) -> Result<Vec<GreensSlice>, ScatteringError> {
    let grid = inputs.grid;
    let mut slices = Vec::with_capacity(grid.n_tuples());
    for e_idx in 0..grid.n_energies() {
        let e = grid.energies_ev[e_idx];
        for k_idx in 0..grid.n_momenta() {
            let t = grid.tuple_index(e_idx, k_idx);
            let h = &inputs.hamiltonians[k_idx];
            let total = assemble_total(
                &inputs.leads[t].first,
                &inputs.leads[t].last,
                &sigma.per_energy[e_idx],
                e,
                &h.ranks(),
            )?;
            slices.push(negf::solve_slice(
                h,
                &total,
                e,
                grid.momenta_inv_nm[k_idx],
                with_offdiag,
            )?);
        }
    }
    Ok(slices)
}

/// Momentum-integrated G^R and G^< site diagonals per energy.
fn k_reduced_rows(grid: &EkGrid, slices: &[GreensSlice]) -> (Vec<Vec<C64>>, Vec<Vec<C64>>) {
    let n_sites = slices[0].gr_site_diag().len();
    let mut gr_rows = vec![vec![C64::new(0.0, 0.0); n_sites]; grid.n_energies()];
    let mut gl_rows = vec![vec![C64::new(0.0, 0.0); n_sites]; grid.n_energies()];
    for e_idx in 0..grid.n_energies() {
        for k_idx in 0..grid.n_momenta() {
            let s = &slices[grid.tuple_index(e_idx, k_idx)];
            let w = grid.momentum_weights_inv_nm[k_idx];
            for (acc, v) in gr_rows[e_idx].iter_mut().zip(s.gr_site_diag()) {
                *acc += v * w;
            }
            for (acc, v) in gl_rows[e_idx].iter_mut().zip(s.gl_site_diag()) {
                *acc += v * w;
            }
        }
    }
    (gr_rows, gl_rows)
}

/// Recompute the phonon self-energies for every energy from momentum-reduced
/// Green's function rows.
pub fn phonon_update(
    grid: &EkGrid,
    gr_rows: &[Vec<C64>],
    gl_rows: &[Vec<C64>],
    couplings: &CouplingConstants,
    n0: f64,
) -> Result<SigmaState, ScatteringError> {
    let n_sites = gr_rows[0].len();
    let mut per_energy = Vec::with_capacity(grid.n_energies());
    for e_idx in 0..grid.n_energies() {
        // rows are already k-integrated, so the acoustic sum is a single term
        let ac_r = acoustic_self_energy(
            std::slice::from_ref(&gr_rows[e_idx]),
            &[1.0],
            couplings.k_ac_ev2_nm,
        )?;
        let ac_l = acoustic_self_energy(
            std::slice::from_ref(&gl_rows[e_idx]),
            &[1.0],
            couplings.k_ac_ev2_nm,
        )?;
        let pair = &grid.optical_shifts[e_idx];
        let gr_plus = resolve_shift(gr_rows, &pair.plus, n_sites);
        let gr_minus = resolve_shift(gr_rows, &pair.minus, n_sites);
        let gl_plus = resolve_shift(gl_rows, &pair.plus, n_sites);
        let gl_minus = resolve_shift(gl_rows, &pair.minus, n_sites);
        let gr_sh = ShiftedDiagonals {
            plus: gr_plus.as_deref(),
            minus: gr_minus.as_deref(),
        };
        let gl_sh = ShiftedDiagonals {
            plus: gl_plus.as_deref(),
            minus: gl_minus.as_deref(),
        };
        let op_l = optical_lesser_self_energy(&gl_sh, n_sites, couplings.k_op_ev2_nm, n0)?;
        let op_r =
            optical_retarded_self_energy(&gr_sh, &gl_sh, n_sites, couplings.k_op_ev2_nm, n0)?;
        let sigma_r: Vec<C64> = ac_r.iter().zip(&op_r).map(|(a, o)| a + o).collect();
        let sigma_l: Vec<C64> = ac_l.iter().zip(&op_l).map(|(a, o)| a + o).collect();
        per_energy.push(SelfEnergySet {
            energy_ev: grid.energies_ev[e_idx],
            sigma_r_phonon_diag: sigma_r,
            sigma_l_phonon_diag: sigma_l,
        });
    }
    Ok(SigmaState { per_energy })
}

const RESIDUAL_FLOOR_EV: f64 = 1e-12;

fn residual(old: &SigmaState, new: &SigmaState) -> f64 {
    let mut worst: f64 = 0.0;
    for (o, n) in old.per_energy.iter().zip(&new.per_energy) {
        for (a, b) in o
            .sigma_r_phonon_diag
            .iter()
            .chain(&o.sigma_l_phonon_diag)
            .zip(n.sigma_r_phonon_diag.iter().chain(&n.sigma_l_phonon_diag))
        {
            worst = worst.max((b - a).norm() / (a.norm() + RESIDUAL_FLOOR_EV));
        }
    }
    worst
}

fn mix(old: &mut SigmaState, new: &SigmaState, mixing: f64) {
    for (o, n) in old.per_energy.iter_mut().zip(&new.per_energy) {
        for (a, b) in o.sigma_r_phonon_diag.iter_mut().zip(&n.sigma_r_phonon_diag) {
            *a += (b - *a) * mixing;
        }
        for (a, b) in o.sigma_l_phonon_diag.iter_mut().zip(&n.sigma_l_phonon_diag) {
            *a += (b - *a) * mixing;
        }
    }
}

/// Self-consistent Born loop over Eqs. (1)-(6): solve all tuples, recompute
/// the phonon self-energies, linearly mix, repeat until the max relative
/// change of the diagonals drops below `tol`. Returns the best iterate with a
/// convergence flag rather than aborting at `max_iter`.
pub fn born_iteration(
    inputs: &BornInputs,
    warm_start: Option<SigmaState>,
    mixing: f64,
    tol: f64,
    max_iter: usize,
) -> Result<BornOutcome, ScatteringError> {
    assert!(mixing > 0.0 && mixing <= 1.0, "mixing in (0,1]");
    assert!(tol > 0.0);
    let n_sites = inputs.hamiltonians[0].total_rank();
    let ballistic = inputs.couplings.k_ac_ev2_nm == 0.0 && inputs.couplings.k_op_ev2_nm == 0.0;
    let mut sigma = warm_start.unwrap_or_else(|| SigmaState::zero(inputs.grid, n_sites));
    let mut residual_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        // off-diagonals are only needed for currents after convergence
        let slices = solve_all(inputs, &sigma, false)?;
        if ballistic {
            residual_history.push(0.0);
            converged = true;
            break;
        }
        let (gr_rows, gl_rows) = k_reduced_rows(inputs.grid, &slices);
        let new_sigma = phonon_update(
            inputs.grid,
            &gr_rows,
            &gl_rows,
            &inputs.couplings,
            inputs.n0,
        )?;
        let res = residual(&sigma, &new_sigma);
        residual_history.push(res);
        mix(&mut sigma, &new_sigma, mixing);
        if res < tol {
            converged = true;
            break;
        }
    }
    // final pass with off-diagonal blocks for the current integrand
    let slices = solve_all(inputs, &sigma, true)?;
    Ok(BornOutcome {
        slices,
        sigma,
        iterations,
        residual_history,
        converged,
    })
}

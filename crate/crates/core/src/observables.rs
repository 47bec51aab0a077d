//! Charge-current observables and the ballistic transmission oracle.
//!
//! The bond current through interface i follows from the commutator form of
//! Eq. (8): its (E,k)-resolved integrand is 2 Re Tr[H_{i,i+1} G^<_{i+1,i}],
//! which for a ballistic device reduces exactly to T(E) (f_L - f_R). The
//! prefactor e/(h pi) contains spin degeneracy and the 1/(2 pi) of the
//! transverse momentum integral; momentum weights sum to the full zone
//! measure, so the result is a current per transverse nm.

use crate::constants::{H_EV_S, Q_COULOMB};
use crate::device::BlockTridiagonalOperator;
use crate::ekgrid::EkGrid;
use crate::leads::LeadSelfEnergy;
use crate::linalg::{mat_mul, C64};
use crate::negf::{dense_reference, GreensSlice, NegfError, SelfEnergyTotal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObservableError {
    #[error("lesser off-diagonal blocks missing from slice at E = {0} eV")]
    MissingOffdiag(f64),
    #[error("slice count {got} does not match grid tuple count {expected}")]
    SliceCount { got: usize, expected: usize },
    #[error("dense solver failure: {0}")]
    Dense(#[from] NegfError),
}

/// Interface-resolved current and its energy spectrum.
#[derive(Debug, Clone)]
pub struct CurrentResult {
    /// Current through each of the n_slabs-1 interfaces, A per transverse nm.
    pub per_interface_a_per_nm: Vec<f64>,
    /// Energy-resolved current spectrum of the middle interface (same
    /// prefactor, per eV), one value per grid energy.
    pub spectrum_a_per_nm_ev: Vec<f64>,
    /// max_i |I_i - I_mean| / max(|I_mean|, eps) — conservation diagnostic.
    pub max_nonuniformity: f64,
}

/// (E,k)-resolved integrand 2 Re Tr[H_{i,i+1} G^<_{i+1,i}] per interface.
pub fn current_integrand(
    h: &BlockTridiagonalOperator,
    slice: &GreensSlice,
) -> Result<Vec<f64>, ObservableError> {
    let gl_off = slice
        .gl_offdiag
        .as_ref()
        .ok_or(ObservableError::MissingOffdiag(slice.energy_ev))?;
    let mut out = Vec::with_capacity(h.coupling_blocks.len());
    for (i, b) in h.coupling_blocks.iter().enumerate() {
        // G^<_{i+1,i} = -(G^<_{i,i+1})^dag for anti-Hermitian lesser functions
        let g_lower = gl_off[i].adjoint().map(|z| -z);
        let prod = mat_mul(b, &g_lower);
        let tr: C64 = (0..prod.nrows()).map(|p| prod[(p, p)]).sum();
        out.push(2.0 * tr.re);
    }
    Ok(out)
}

/// Assemble the full Eq. (8) current from per-tuple slices: quadrature over
/// both grid axes with the e/(h pi) prefactor.
pub fn current_density(
    hamiltonians: &[BlockTridiagonalOperator],
    slices: &[GreensSlice],
    grid: &EkGrid,
) -> Result<CurrentResult, ObservableError> {
    if slices.len() != grid.n_tuples() {
        return Err(ObservableError::SliceCount {
            got: slices.len(),
            expected: grid.n_tuples(),
        });
    }
    let n_if = hamiltonians[0].coupling_blocks.len();
    let prefactor = Q_COULOMB / (H_EV_S * std::f64::consts::PI);
    let mut per_interface = vec![0.0; n_if];
    let mid = n_if / 2;
    let mut spectrum = vec![0.0; grid.n_energies()];
    for e_idx in 0..grid.n_energies() {
        let we = grid.energy_weights_ev[e_idx];
        for k_idx in 0..grid.n_momenta() {
            let wk = grid.momentum_weights_inv_nm[k_idx];
            let slice = &slices[grid.tuple_index(e_idx, k_idx)];
            let c = current_integrand(&hamiltonians[k_idx], slice)?;
            for (acc, v) in per_interface.iter_mut().zip(&c) {
                *acc += prefactor * we * wk * v;
            }
            spectrum[e_idx] += prefactor * wk * c[mid];
        }
    }
    let mean = per_interface.iter().sum::<f64>() / n_if as f64;
    let scale = mean.abs().max(1e-30);
    let max_nonuniformity = per_interface
        .iter()
        .map(|v| (v - mean).abs() / scale)
        .fold(0.0, f64::max);
    Ok(CurrentResult {
        per_interface_a_per_nm: per_interface,
        spectrum_a_per_nm_ev: spectrum,
        max_nonuniformity,
    })
}

/// Caroli transmission T = Tr[Gamma_L G^R Gamma_R G^R^dag] via the dense
/// solver; independent oracle for ballistic currents.
pub fn ballistic_transmission(
    h: &BlockTridiagonalOperator,
    lead_first: &LeadSelfEnergy,
    lead_last: &LeadSelfEnergy,
    energy_ev: f64,
) -> Result<f64, ObservableError> {
    let ranks = h.ranks();
    let n = h.n_slabs();
    let mut sigma = SelfEnergyTotal::zero(&ranks);
    sigma.lead_r_first = Some(lead_first.sigma_r.clone());
    sigma.lead_r_last = Some(lead_last.sigma_r.clone());
    let (gr, _) = dense_reference(h, &sigma, energy_ev)?;
    let total = h.total_rank();
    let r_first = ranks[0];
    let r_last = ranks[n - 1];
    let off_last = total - r_last;
    // G^R block connecting first and last slabs
    let g_1n = gr.view((0, off_last), (r_first, r_last)).into_owned();
    let t = mat_mul(
        &mat_mul(&mat_mul(&lead_first.gamma, &g_1n), &lead_last.gamma),
        &g_1n.adjoint(),
    );
    Ok((0..t.nrows()).map(|p| t[(p, p)].re).sum())
}

//! Physical constants in the eV / nm / ps unit system used throughout.

/// Boltzmann constant, eV per kelvin.
pub const KB_EV_PER_K: f64 = 8.617333262e-5;

/// Planck constant, eV * s.
pub const H_EV_S: f64 = 4.135667696e-15;

/// Reduced Planck constant, eV * ps.
pub const HBAR_EV_PS: f64 = 6.582119569e-4;

/// Elementary charge, coulomb.
pub const Q_COULOMB: f64 = 1.602176634e-19;

/// Conversion factor: 1 amu * (nm/ps)^2 in eV.
pub const AMU_NM2_PS2_EV: f64 = 1.0364269e-2;

/// e / eps0 in V * nm (for the Poisson right-hand side with densities in 1/nm^3).
pub const E_OVER_EPS0_V_NM: f64 = 18.0943;

/// Fermi-Dirac occupation f(E - mu) at temperature T (kelvin).
pub fn fermi(e_minus_mu_ev: f64, temperature_k: f64) -> f64 {
    let x = e_minus_mu_ev / (KB_EV_PER_K * temperature_k);
    if x > 500.0 {
        0.0
    } else if x < -500.0 {
        1.0
    } else {
        1.0 / (x.exp() + 1.0)
    }
}

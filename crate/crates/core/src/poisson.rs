//! Electrostatics: finite-volume Poisson solve on the device cross-section
//! (Eq. (9) form, div eps grad Phi = e(n - N_D)/eps0) and the outer
//! charge-self-consistency loop coupling it to the NEGF density of Eq. (7).
//!
//! The mesh is a uniform rectangular grid: one node per device site plus
//! oxide padding rows above and below; the outermost rows are the two gate
//! electrodes (Dirichlet), all other boundary faces are zero-flux.

use crate::constants::E_OVER_EPS0_V_NM;
use crate::device::DeviceGraph;
use crate::ekgrid::EkGrid;
use crate::linalg::C64;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoissonError {
    #[error("mesh has no Dirichlet node; the system is singular")]
    AllNeumann,
    #[error("non-positive permittivity at node {0}")]
    BadPermittivity(usize),
    #[error("density length {got} does not match device site count {expected}")]
    DensityLength { got: usize, expected: usize },
    #[error("linear solve failed (singular system)")]
    Singular,
    #[error("slice count {got} does not match grid tuple count {expected}")]
    SliceCount { got: usize, expected: usize },
    #[error("charge model failure: {0}")]
    Model(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    Dirichlet(f64),
    Neumann,
}

/// Rectangular node-centered mesh. Node index = row * nx + col; rows run from
/// the bottom gate to the top gate, columns along transport.
#[derive(Debug, Clone)]
pub struct PoissonMesh {
    pub nx: usize,
    pub ny: usize,
    pub spacing_nm: f64,
    pub permittivity: Vec<f64>,
    pub doping_n_d_per_nm3: Vec<f64>,
    pub boundary: Vec<Boundary>,
    /// node index per active device site, in Hamiltonian site order.
    pub site_map: Vec<usize>,
}

impl PoissonMesh {
    /// Double-gate layout: device rows sandwiched between `n_oxide` oxide
    /// rows on each side; outermost rows are the gate electrodes.
    pub fn double_gate(
        graph: &DeviceGraph,
        spacing_nm: f64,
        eps_semiconductor: f64,
        eps_oxide: f64,
        n_oxide: usize,
        doping_per_nm3: f64,
        gate_top_v: f64,
        gate_bottom_v: f64,
    ) -> Result<Self, PoissonError> {
        let nx = graph.n_slabs;
        let ny = graph.sites_per_slab + 2 * n_oxide.max(1);
        let pad = n_oxide.max(1);
        let n_nodes = nx * ny;
        let mut permittivity = vec![eps_oxide; n_nodes];
        let mut doping = vec![0.0; n_nodes];
        let mut boundary = vec![Boundary::Neumann; n_nodes];
        for row in pad..pad + graph.sites_per_slab {
            for col in 0..nx {
                let node = row * nx + col;
                permittivity[node] = eps_semiconductor;
                doping[node] = doping_per_nm3;
            }
        }
        for col in 0..nx {
            boundary[col] = Boundary::Dirichlet(gate_bottom_v);
            boundary[(ny - 1) * nx + col] = Boundary::Dirichlet(gate_top_v);
        }
        let mut site_map = Vec::new();
        for slab in 0..graph.n_slabs {
            for t in 0..graph.sites_per_slab {
                let site = graph.site_index(slab, t);
                if graph.sites[site].active {
                    site_map.push((pad + t) * nx + slab);
                }
            }
        }
        let mesh = PoissonMesh {
            nx,
            ny,
            spacing_nm,
            permittivity,
            doping_n_d_per_nm3: doping,
            boundary,
            site_map,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn validate(&self) -> Result<(), PoissonError> {
        if !self
            .boundary
            .iter()
            .any(|b| matches!(b, Boundary::Dirichlet(_)))
        {
            return Err(PoissonError::AllNeumann);
        }
        for (i, &e) in self.permittivity.iter().enumerate() {
            if !(e > 0.0) {
                return Err(PoissonError::BadPermittivity(i));
            }
        }
        Ok(())
    }

    fn neighbors(&self, node: usize) -> [Option<usize>; 4] {
        let (row, col) = (node / self.nx, node % self.nx);
        [
            (col > 0).then(|| node - 1),
            (col + 1 < self.nx).then(|| node + 1),
            (row > 0).then(|| node - self.nx),
            (row + 1 < self.ny).then(|| node + self.nx),
        ]
    }

    /// Per-node RHS e(n - N_D)/eps0 in V/nm^2, with the electron density
    /// scattered from device sites onto their nodes.
    pub fn charge_rhs(&self, density_per_site: &[f64]) -> Result<Vec<f64>, PoissonError> {
        if density_per_site.len() != self.site_map.len() {
            return Err(PoissonError::DensityLength {
                got: density_per_site.len(),
                expected: self.site_map.len(),
            });
        }
        let mut n = vec![0.0; self.n_nodes()];
        for (site, &node) in self.site_map.iter().enumerate() {
            n[node] += density_per_site[site];
        }
        Ok((0..self.n_nodes())
            .map(|i| E_OVER_EPS0_V_NM * (n[i] - self.doping_n_d_per_nm3[i]))
            .collect())
    }
}

/// Electron density of Eq. (7): n = (2 pi)^-2 integral dE dk Im diag G^<,
/// divided by the per-site volume.
pub fn density_from_g(
    gl_site_diags: &[Vec<C64>],
    grid: &EkGrid,
    site_volume_nm3: f64,
) -> Result<Vec<f64>, PoissonError> {
    if gl_site_diags.len() != grid.n_tuples() {
        return Err(PoissonError::SliceCount {
            got: gl_site_diags.len(),
            expected: grid.n_tuples(),
        });
    }
    let n_sites = gl_site_diags[0].len();
    let norm = 1.0 / (4.0 * std::f64::consts::PI.powi(2) * site_volume_nm3);
    let mut out = vec![0.0; n_sites];
    for e_idx in 0..grid.n_energies() {
        let we = grid.energy_weights_ev[e_idx];
        for k_idx in 0..grid.n_momenta() {
            let wk = grid.momentum_weights_inv_nm[k_idx];
            let diag = &gl_site_diags[grid.tuple_index(e_idx, k_idx)];
            for (acc, v) in out.iter_mut().zip(diag) {
                *acc += norm * we * wk * v.im;
            }
        }
    }
    Ok(out)
}

/// Finite-volume assembly and direct solve. Harmonic-mean face
/// permittivities; Dirichlet rows eliminated to identity equations.
pub fn assemble_and_solve(mesh: &PoissonMesh, rhs_v_nm2: &[f64]) -> Result<Vec<f64>, PoissonError> {
    mesh.validate()?;
    let n = mesh.n_nodes();
    let h2 = mesh.spacing_nm * mesh.spacing_nm;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for i in 0..n {
        match mesh.boundary[i] {
            Boundary::Dirichlet(v) => {
                a[(i, i)] = 1.0;
                b[i] = v;
            }
            Boundary::Neumann => {
                for nbr in mesh.neighbors(i).into_iter().flatten() {
                    let ef = 2.0 * mesh.permittivity[i] * mesh.permittivity[nbr]
                        / (mesh.permittivity[i] + mesh.permittivity[nbr]);
                    a[(i, i)] -= ef;
                    a[(i, nbr)] += ef;
                }
                b[i] = rhs_v_nm2[i] * h2;
            }
        }
    }
    let lu = a.lu();
    lu.solve(&b)
        .map(|x| x.as_slice().to_vec())
        .ok_or(PoissonError::Singular)
}

/// |total interior charge - total Dirichlet boundary flux| / max(|charge|, floor)
/// on a solved potential; discrete Gauss-law diagnostic.
pub fn gauss_law_residual(mesh: &PoissonMesh, phi: &[f64], rhs_v_nm2: &[f64]) -> f64 {
    let h2 = mesh.spacing_nm * mesh.spacing_nm;
    let mut charge = 0.0;
    let mut flux = 0.0;
    for i in 0..mesh.n_nodes() {
        match mesh.boundary[i] {
            Boundary::Neumann => charge += rhs_v_nm2[i] * h2,
            Boundary::Dirichlet(_) => {
                for nbr in mesh.neighbors(i).into_iter().flatten() {
                    if matches!(mesh.boundary[nbr], Boundary::Dirichlet(_)) {
                        continue;
                    }
                    let ef = 2.0 * mesh.permittivity[i] * mesh.permittivity[nbr]
                        / (mesh.permittivity[i] + mesh.permittivity[nbr]);
                    flux += ef * (phi[i] - phi[nbr]);
                }
            }
        }
    }
    (charge - flux).abs() / charge.abs().max(1e-30)
}

/// Density provider for the outer loop: everything between the potential and
/// the charge (Hamiltonian rebuild, Born iteration, quadrature) lives behind
/// this trait so the electrostatics stays testable in isolation.
pub trait ChargeModel {
    /// Electron density per device site (1/nm^3) at the given per-site
    /// potential (V); also reports the inner (Born) iteration count.
    fn density(&mut self, phi_per_site_v: &[f64]) -> Result<(Vec<f64>, usize), String>;
}

#[derive(Debug, Clone)]
pub struct ScfOutcome {
    pub phi_nodes_v: Vec<f64>,
    pub phi_sites_v: Vec<f64>,
    pub density_per_nm3: Vec<f64>,
    pub outer_iterations: usize,
    pub inner_iterations_total: usize,
    pub converged: bool,
    /// max |delta Phi| per outer iteration, V.
    pub trace_v: Vec<f64>,
}

/// Outer self-consistency loop: NEGF density at fixed Phi, Poisson solve,
/// linear potential mixing with weight beta, until the max node update drops
/// below tol_phi_v.
pub fn outer_scf(
    mesh: &PoissonMesh,
    model: &mut dyn ChargeModel,
    phi_init_nodes_v: Option<Vec<f64>>,
    beta: f64,
    tol_phi_v: f64,
    max_outer: usize,
) -> Result<ScfOutcome, PoissonError> {
    assert!(beta > 0.0 && beta <= 1.0, "beta in (0,1]");
    assert!(tol_phi_v > 0.0);
    let mut phi = phi_init_nodes_v.unwrap_or_else(|| vec![0.0; mesh.n_nodes()]);
    let mut trace = Vec::new();
    let mut inner_total = 0;
    let mut converged = false;
    let mut outer = 0;
    let mut density = vec![0.0; mesh.site_map.len()];
    // plain potential mixing with adaptive damping: the effective beta is
    // halved whenever the fixed-point residual grows (a fixed beta can lock
    // into a two-cycle when a resonance crosses the contact window) and
    // recovers geometrically while the residual shrinks
    let mut beta_eff = beta;
    let mut prev_residual = f64::INFINITY;
    let mut best_residual = f64::INFINITY;
    let mut best_phi = phi.clone();
    while outer < max_outer {
        outer += 1;
        let phi_sites: Vec<f64> = mesh.site_map.iter().map(|&n| phi[n]).collect();
        let (n_new, inner) = model.density(&phi_sites).map_err(PoissonError::Model)?;
        inner_total += inner;
        density = n_new;
        let rhs = mesh.charge_rhs(&density)?;
        let phi_new = assemble_and_solve(mesh, &rhs)?;
        // unmixed fixed-point residual: beta-independent convergence test
        let residual = phi
            .iter()
            .zip(&phi_new)
            .map(|(p, pn)| (pn - p).abs())
            .fold(0.0f64, f64::max);
        trace.push(residual);
        if residual < best_residual {
            best_residual = residual;
            best_phi.clone_from(&phi);
        }
        if residual < tol_phi_v {
            converged = true;
            // adopt the final solve so the fixed-point property holds exactly
            phi = phi_new;
            break;
        }
        if residual > prev_residual {
            beta_eff = (0.5 * beta_eff).max(0.125 * beta);
        } else {
            beta_eff = (1.1 * beta_eff).min(beta);
        }
        prev_residual = residual;
        for (p, pn) in phi.iter_mut().zip(&phi_new) {
            *p += beta_eff * (pn - *p);
        }
    }
    if !converged {
        // max_outer exceeded: return the best iterate, flagged. The last
        // iterate of an oscillating loop can be far worse than the best one
        // seen, so re-evaluate the model there to make the returned density
        // and observables consistent with the returned potential.
        phi = best_phi;
        let phi_sites: Vec<f64> = mesh.site_map.iter().map(|&n| phi[n]).collect();
        let (n_new, inner) = model.density(&phi_sites).map_err(PoissonError::Model)?;
        inner_total += inner;
        density = n_new;
    }
    let phi_sites: Vec<f64> = mesh.site_map.iter().map(|&n| phi[n]).collect();
    Ok(ScfOutcome {
        phi_nodes_v: phi,
        phi_sites_v: phi_sites,
        density_per_nm3: density,
        outer_iterations: outer,
        inner_iterations_total: inner_total,
        converged,
        trace_v: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{build_device, DeviceSpec, DisorderMode};

    fn spec(n_slabs: usize, m: usize) -> DeviceSpec {
        DeviceSpec {
            n_slabs,
            sites_per_slab: m,
            lattice_constant_nm: 0.5,
            cross_section_area_nm2: 2.0,
            orbitals_per_site: 1,
            alloy_fraction_x: 0.0,
            disorder_mode: DisorderMode::Vca,
            rng_seed: 1,
            roughness: None,
        }
    }

    fn flat_mesh(nx: usize, ny: usize, top: f64, bottom: f64) -> PoissonMesh {
        let g = build_device(&spec(nx, ny - 2)).unwrap();
        PoissonMesh::double_gate(&g, 0.5, 11.7, 3.9, 1, 0.0, top, bottom).unwrap()
    }

    #[test]
    fn all_neumann_rejected() {
        let mut mesh = flat_mesh(4, 6, 0.0, 0.0);
        for b in &mut mesh.boundary {
            *b = Boundary::Neumann;
        }
        assert!(matches!(mesh.validate(), Err(PoissonError::AllNeumann)));
    }

    #[test]
    fn zero_charge_zero_gates_gives_zero_phi() {
        let mesh = flat_mesh(5, 7, 0.0, 0.0);
        let rhs = vec![0.0; mesh.n_nodes()];
        let phi = assemble_and_solve(&mesh, &rhs).unwrap();
        for v in &phi {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn laplace_linear_between_plates() {
        // uniform permittivity, zero charge, asymmetric gates: Phi linear in y
        let mut mesh = flat_mesh(4, 9, 1.0, -0.5);
        for e in &mut mesh.permittivity {
            *e = 11.7;
        }
        let rhs = vec![0.0; mesh.n_nodes()];
        let phi = assemble_and_solve(&mesh, &rhs).unwrap();
        let ny = mesh.ny;
        for row in 0..ny {
            let frac = row as f64 / (ny - 1) as f64;
            let expect = -0.5 + 1.5 * frac;
            for col in 0..mesh.nx {
                let v = phi[row * mesh.nx + col];
                assert!((v - expect).abs() < 1e-10, "row {row}: {v} vs {expect}");
            }
        }
    }

    #[test]
    fn manufactured_solution_second_order() {
        // 1-column mesh, Phi*(y) = sin(pi y / L): rhs = -eps (pi/L)^2 sin
        let mut errs = Vec::new();
        for &ny in &[17usize, 33, 65] {
            let g = build_device(&spec(3, ny - 2)).unwrap();
            let l = 1.0;
            let h = l / (ny - 1) as f64;
            let mut mesh = PoissonMesh::double_gate(&g, h, 1.0, 1.0, 1, 0.0, 0.0, 0.0).unwrap();
            for e in &mut mesh.permittivity {
                *e = 1.0;
            }
            let pi = std::f64::consts::PI;
            let rhs: Vec<f64> = (0..mesh.n_nodes())
                .map(|n| {
                    let y = (n / mesh.nx) as f64 * h;
                    -(pi / l).powi(2) * (pi * y / l).sin()
                })
                .collect();
            let phi = assemble_and_solve(&mesh, &rhs).unwrap();
            let err = (0..mesh.n_nodes())
                .map(|n| {
                    let y = (n / mesh.nx) as f64 * h;
                    (phi[n] - (pi * y / l).sin()).abs()
                })
                .fold(0.0, f64::max);
            errs.push(err);
        }
        let r1 = errs[0] / errs[1];
        let r2 = errs[1] / errs[2];
        for r in [r1, r2] {
            let order = r.log2();
            assert!((order - 2.0).abs() < 0.1, "order {order}, ratios {errs:?}");
        }
    }

    #[test]
    fn gauss_law_on_charged_solve() {
        let mesh = flat_mesh(6, 10, 0.3, 0.3);
        let mut rhs = vec![0.0; mesh.n_nodes()];
        for (i, r) in rhs.iter_mut().enumerate() {
            if matches!(mesh.boundary[i], Boundary::Neumann) {
                *r = 0.02 * ((i % 7) as f64 - 3.0);
            }
        }
        let phi = assemble_and_solve(&mesh, &rhs).unwrap();
        let res = gauss_law_residual(&mesh, &phi, &rhs);
        assert!(res < 1e-8, "gauss residual {res}");
    }

    struct FixedDensity(Vec<f64>);
    impl ChargeModel for FixedDensity {
        fn density(&mut self, _phi: &[f64]) -> Result<(Vec<f64>, usize), String> {
            Ok((self.0.clone(), 1))
        }
    }

    #[test]
    fn fixed_density_scf_fixed_point() {
        let mesh = flat_mesh(5, 8, 0.2, 0.2);
        let n_sites = mesh.site_map.len();
        let mut model = FixedDensity(vec![0.003; n_sites]);
        let out = outer_scf(&mesh, &mut model, None, 1.0, 1e-9, 50).unwrap();
        assert!(out.converged);
        assert!(out.outer_iterations <= 2, "{}", out.outer_iterations);
        // re-running from the converged potential changes nothing: 1 iteration
        let again = outer_scf(
            &mesh,
            &mut model,
            Some(out.phi_nodes_v.clone()),
            1.0,
            1e-9,
            50,
        )
        .unwrap();
        assert!(again.converged);
        assert_eq!(again.outer_iterations, 1);
        assert!((again.phi_nodes_v[10] - out.phi_nodes_v[10]).abs() < 1e-9);
    }

    #[test]
    fn density_quadrature_single_term() {
        let grid = crate::ekgrid::build_homogeneous(0.0, 0.1, 0.1, 1, 1, 2.0).unwrap();
        // two energies, one momentum; put Im G^< = c at site 0, first tuple
        let c = 0.8;
        let mut diags = vec![vec![C64::new(0.0, 0.0); 3]; grid.n_tuples()];
        diags[0][0] = C64::new(0.0, c);
        let vsite = 0.125;
        let n = density_from_g(&diags, &grid, vsite).unwrap();
        let expect = grid.energy_weights_ev[0] * grid.momentum_weights_inv_nm[0] * c
            / (4.0 * std::f64::consts::PI.powi(2) * vsite);
        assert!((n[0] - expect).abs() < 1e-15 * expect.abs().max(1.0));
        assert_eq!(n[1], 0.0);
    }
}

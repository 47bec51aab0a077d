//! Atomistic device graph and block-tridiagonal Hamiltonian assembly.
//!
//! The device is a stack of slabs along the transport direction. Each slab is
//! a chain of sites along the periodic transverse direction; transverse wrap
//! bonds close the ring and carry the Bloch phase exp(+-ikW). Alloy disorder
//! is applied either in the virtual crystal approximation or as an explicit
//! random Ge placement, and surface roughness deactivates correlated runs of
//! surface sites, shrinking the per-slab block rank.

use crate::linalg::{CMatrix, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("device needs at least 3 slabs, got {0}")]
    TooFewSlabs(usize),
    #[error("sites_per_slab must be >= 1, got {0}")]
    NoSites(usize),
    #[error("alloy fraction must lie in [0,1], got {0}")]
    BadAlloyFraction(f64),
    #[error("cross-section area must be positive, got {0}")]
    BadArea(f64),
    #[error("orbitals_per_site must be 1 or 2, got {0}")]
    BadOrbitals(usize),
    #[error("roughness amplitude {amplitude} would disconnect slab {slab} (thickness {thickness})")]
    RoughnessDisconnects {
        amplitude: usize,
        slab: usize,
        thickness: usize,
    },
    #[error("potential length {got} does not match active site count {expected}")]
    PhiLengthMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisorderMode {
    Vca,
    Random,
}

#[derive(Debug, Clone, Copy)]
pub struct RoughnessSpec {
    /// Maximum surface-site deletion depth in atomic layers.
    pub amplitude: usize,
    /// Correlation length along transport, nm.
    pub correlation_length_nm: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct DeviceSpec {
    pub n_slabs: usize,
    pub sites_per_slab: usize,
    /// Lattice constant, nm.
    pub lattice_constant_nm: f64,
    /// Per-atom transverse area entering the scattering prefactors, nm^2.
    pub cross_section_area_nm2: f64,
    pub orbitals_per_site: usize,
    pub alloy_fraction_x: f64,
    pub disorder_mode: DisorderMode,
    pub rng_seed: u64,
    pub roughness: Option<RoughnessSpec>,
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if self.n_slabs < 3 {
            return Err(DeviceError::TooFewSlabs(self.n_slabs));
        }
        if self.sites_per_slab < 1 {
            return Err(DeviceError::NoSites(self.sites_per_slab));
        }
        if !(0.0..=1.0).contains(&self.alloy_fraction_x) {
            return Err(DeviceError::BadAlloyFraction(self.alloy_fraction_x));
        }
        if self.cross_section_area_nm2 <= 0.0 {
            return Err(DeviceError::BadArea(self.cross_section_area_nm2));
        }
        if self.orbitals_per_site == 0 || self.orbitals_per_site > 2 {
            return Err(DeviceError::BadOrbitals(self.orbitals_per_site));
        }
        Ok(())
    }

    /// Transverse period W of the periodic direction, nm.
    pub fn transverse_period_nm(&self) -> f64 {
        self.sites_per_slab as f64 * self.lattice_constant_nm
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaterialParams {
    pub onsite_si_ev: f64,
    pub onsite_ge_ev: f64,
    pub hopping_si_ev: f64,
    pub hopping_ge_ev: f64,
    pub hopping_sige_ev: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Species {
    Si,
    Ge,
}

#[derive(Debug, Clone, Copy)]
pub struct Site {
    pub slab: usize,
    pub transverse: usize,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BondKind {
    IntraSlab,
    InterSlab,
}

#[derive(Debug, Clone, Copy)]
pub struct Bond {
    pub site_i: usize,
    pub site_j: usize,
    pub kind: BondKind,
    pub transverse_wrap: bool,
}

#[derive(Debug, Clone)]
pub struct DeviceGraph {
    pub n_slabs: usize,
    pub sites_per_slab: usize,
    pub sites: Vec<Site>,
    pub bonds: Vec<Bond>,
}

impl DeviceGraph {
    pub fn site_index(&self, slab: usize, transverse: usize) -> usize {
        slab * self.sites_per_slab + transverse
    }

    pub fn active_sites_in_slab(&self, slab: usize) -> Vec<usize> {
        (0..self.sites_per_slab)
            .map(|t| self.site_index(slab, t))
            .filter(|&i| self.sites[i].active)
            .collect()
    }

    pub fn n_active_sites(&self) -> usize {
        self.sites.iter().filter(|s| s.active).count()
    }
}

/// Per-site electronic parameters after disorder assignment.
#[derive(Debug, Clone)]
pub enum AlloyAssignment {
    /// Virtual crystal: one averaged onsite and hopping for every site/bond.
    Vca { onsite_ev: f64, hopping_ev: f64 },
    /// Explicit random placement; bond hoppings follow the species pair.
    Random { species: Vec<Species> },
}

impl AlloyAssignment {
    pub fn onsite(&self, site: usize, params: &MaterialParams) -> f64 {
        match self {
            AlloyAssignment::Vca { onsite_ev, .. } => *onsite_ev,
            AlloyAssignment::Random { species } => match species[site] {
                Species::Si => params.onsite_si_ev,
                Species::Ge => params.onsite_ge_ev,
            },
        }
    }

    pub fn hopping(&self, site_i: usize, site_j: usize, params: &MaterialParams) -> f64 {
        match self {
            AlloyAssignment::Vca { hopping_ev, .. } => *hopping_ev,
            AlloyAssignment::Random { species } => match (species[site_i], species[site_j]) {
                (Species::Si, Species::Si) => params.hopping_si_ev,
                (Species::Ge, Species::Ge) => params.hopping_ge_ev,
                _ => params.hopping_sige_ev,
            },
        }
    }
}

/// Build the pristine device graph: all sites active, nearest-neighbor bonds,
/// transverse wrap bonds closing the periodic ring (absent for width 1).
pub fn build_device(spec: &DeviceSpec) -> Result<DeviceGraph, DeviceError> {
    spec.validate()?;
    let (n, m) = (spec.n_slabs, spec.sites_per_slab);
    let mut sites = Vec::with_capacity(n * m);
    for slab in 0..n {
        for transverse in 0..m {
            sites.push(Site {
                slab,
                transverse,
                active: true,
            });
        }
    }
    let mut bonds = Vec::new();
    let idx = |s: usize, t: usize| s * m + t;
    for slab in 0..n {
        // intra-slab chain plus the wrap bond
        for t in 0..m.saturating_sub(1) {
            bonds.push(Bond {
                site_i: idx(slab, t),
                site_j: idx(slab, t + 1),
                kind: BondKind::IntraSlab,
                transverse_wrap: false,
            });
        }
        if m >= 2 {
            bonds.push(Bond {
                site_i: idx(slab, m - 1),
                site_j: idx(slab, 0),
                kind: BondKind::IntraSlab,
                transverse_wrap: true,
            });
        }
        // inter-slab bonds at matching transverse index
        if slab + 1 < n {
            for t in 0..m {
                bonds.push(Bond {
                    site_i: idx(slab, t),
                    site_j: idx(slab + 1, t),
                    kind: BondKind::InterSlab,
                    transverse_wrap: false,
                });
            }
        }
    }
    Ok(DeviceGraph {
        n_slabs: n,
        sites_per_slab: m,
        sites,
        bonds,
    })
}

/// Assign alloy species or averaged parameters. Reproducible from the seed in
/// RANDOM mode; the seed is ignored in VCA mode.
pub fn assign_alloy(
    graph: &DeviceGraph,
    params: &MaterialParams,
    x: f64,
    mode: DisorderMode,
    seed: u64,
) -> Result<AlloyAssignment, DeviceError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(DeviceError::BadAlloyFraction(x));
    }
    match mode {
        DisorderMode::Vca => Ok(AlloyAssignment::Vca {
            onsite_ev: (1.0 - x) * params.onsite_si_ev + x * params.onsite_ge_ev,
            hopping_ev: (1.0 - x) * params.hopping_si_ev + x * params.hopping_ge_ev,
        }),
        DisorderMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let species = graph
                .sites
                .iter()
                .map(|_| {
                    if rng.gen::<f64>() < x {
                        Species::Ge
                    } else {
                        Species::Si
                    }
                })
                .collect();
            Ok(AlloyAssignment::Random { species })
        }
    }
}

/// Error function, Abramowitz & Stegun 7.1.26 (|err| < 1.5e-7).
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Per-slab thinning depths from a thresholded, exponentially correlated
/// Gaussian field along transport (AR(1) with rho = exp(-a/l_corr)).
pub fn roughness_depths(
    n_slabs: usize,
    lattice_constant_nm: f64,
    spec: &RoughnessSpec,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rho = if spec.correlation_length_nm.is_infinite() {
        1.0
    } else {
        (-lattice_constant_nm / spec.correlation_length_nm).exp()
    };
    let mut gauss = Vec::with_capacity(n_slabs);
    let mut g = standard_normal(&mut rng);
    gauss.push(g);
    for _ in 1..n_slabs {
        let xi = standard_normal(&mut rng);
        g = rho * g + (1.0 - rho * rho).sqrt() * xi;
        gauss.push(g);
    }
    gauss
        .iter()
        .map(|&g| ((spec.amplitude as f64) * normal_cdf(g)).round() as usize)
        .collect()
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniforms; cheap and reproducible.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deactivate surface sites per the seeded correlated profile. The highest
/// transverse indices of each slab are removed, never the full slab.
pub fn apply_surface_roughness(
    graph: &DeviceGraph,
    lattice_constant_nm: f64,
    spec: &RoughnessSpec,
) -> Result<DeviceGraph, DeviceError> {
    if spec.amplitude == 0 {
        return Ok(graph.clone());
    }
    if spec.amplitude >= graph.sites_per_slab {
        return Err(DeviceError::RoughnessDisconnects {
            amplitude: spec.amplitude,
            slab: 0,
            thickness: graph.sites_per_slab,
        });
    }
    let depths = roughness_depths(graph.n_slabs, lattice_constant_nm, spec);
    let mut out = graph.clone();
    for (slab, &depth) in depths.iter().enumerate() {
        if depth >= graph.sites_per_slab {
            return Err(DeviceError::RoughnessDisconnects {
                amplitude: spec.amplitude,
                slab,
                thickness: graph.sites_per_slab,
            });
        }
        for d in 0..depth {
            let t = graph.sites_per_slab - 1 - d;
            let idx = out.site_index(slab, t);
            out.sites[idx].active = false;
        }
    }
    Ok(out)
}

/// Block-tridiagonal operator H(k) - e*Phi in the slab basis.
#[derive(Debug, Clone)]
pub struct BlockTridiagonalOperator {
    /// One square block per slab; rank = active sites * orbitals.
    pub diagonal_blocks: Vec<CMatrix>,
    /// Coupling H_{i,i+1}, shape rank_i x rank_{i+1}.
    pub coupling_blocks: Vec<CMatrix>,
}

impl BlockTridiagonalOperator {
    pub fn n_slabs(&self) -> usize {
        self.diagonal_blocks.len()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.diagonal_blocks.iter().map(|b| b.nrows()).collect()
    }

    pub fn total_rank(&self) -> usize {
        self.diagonal_blocks.iter().map(|b| b.nrows()).sum()
    }

    /// Dense assembly, for oracles and small systems.
    pub fn to_dense(&self) -> CMatrix {
        let n = self.total_rank();
        let mut out = CMatrix::zeros(n, n);
        let mut offsets = Vec::with_capacity(self.n_slabs());
        let mut acc = 0;
        for b in &self.diagonal_blocks {
            offsets.push(acc);
            acc += b.nrows();
        }
        for (i, b) in self.diagonal_blocks.iter().enumerate() {
            out.view_mut((offsets[i], offsets[i]), (b.nrows(), b.ncols()))
                .copy_from(b);
        }
        for (i, c) in self.coupling_blocks.iter().enumerate() {
            out.view_mut((offsets[i], offsets[i + 1]), (c.nrows(), c.ncols()))
                .copy_from(c);
            out.view_mut((offsets[i + 1], offsets[i]), (c.ncols(), c.nrows()))
                .copy_from(&c.adjoint());
        }
        out
    }
}

/// Assemble H(k) - e*Phi from the graph and disorder assignment.
///
/// `phi_v` holds one entry per active site, ordered by (slab, transverse).
/// Intra-slab wrap bonds carry the phase exp(i k W); the orbital index (0 or 1)
/// replicates the lattice with independent copies coupled only to like
/// orbitals.
pub fn assemble_hamiltonian(
    graph: &DeviceGraph,
    assignment: &AlloyAssignment,
    params: &MaterialParams,
    spec: &DeviceSpec,
    k_inv_nm: f64,
    phi_v: &[f64],
) -> Result<BlockTridiagonalOperator, DeviceError> {
    let n_active = graph.n_active_sites();
    if phi_v.len() != n_active {
        return Err(DeviceError::PhiLengthMismatch {
            got: phi_v.len(),
            expected: n_active,
        });
    }
    let norb = spec.orbitals_per_site;
    // map site -> (slab, position within slab block, active-site serial)
    let mut slab_pos = vec![usize::MAX; graph.sites.len()];
    let mut active_serial = vec![usize::MAX; graph.sites.len()];
    let mut slab_counts = vec![0usize; graph.n_slabs];
    let mut serial = 0usize;
    for (i, s) in graph.sites.iter().enumerate() {
        if s.active {
            slab_pos[i] = slab_counts[s.slab];
            slab_counts[s.slab] += 1;
            active_serial[i] = serial;
            serial += 1;
        }
    }
    let mut diag: Vec<CMatrix> = slab_counts
        .iter()
        .map(|&c| CMatrix::zeros(c * norb, c * norb))
        .collect();
    let mut coup: Vec<CMatrix> = (0..graph.n_slabs - 1)
        .map(|i| CMatrix::zeros(slab_counts[i] * norb, slab_counts[i + 1] * norb))
        .collect();

    for (i, s) in graph.sites.iter().enumerate() {
        if !s.active {
            continue;
        }
        let onsite = assignment.onsite(i, params) - phi_v[active_serial[i]];
        for orb in 0..norb {
            let p = slab_pos[i] * norb + orb;
            diag[s.slab][(p, p)] += C64::new(onsite, 0.0);
        }
    }

    let w = spec.transverse_period_nm();
    let phase = C64::from_polar(1.0, k_inv_nm * w);
    for bond in &graph.bonds {
        let (si, sj) = (graph.sites[bond.site_i], graph.sites[bond.site_j]);
        if !si.active || !sj.active {
            continue;
        }
        let t = assignment.hopping(bond.site_i, bond.site_j, params);
        let amp = if bond.transverse_wrap {
            C64::new(t, 0.0) * phase
        } else {
            C64::new(t, 0.0)
        };
        for orb in 0..norb {
            let pi = slab_pos[bond.site_i] * norb + orb;
            let pj = slab_pos[bond.site_j] * norb + orb;
            match bond.kind {
                BondKind::IntraSlab => {
                    let b = &mut diag[si.slab];
                    b[(pi, pj)] += amp;
                    b[(pj, pi)] += amp.conj();
                }
                BondKind::InterSlab => {
                    coup[si.slab][(pi, pj)] += amp;
                }
            }
        }
    }
    Ok(BlockTridiagonalOperator {
        diagonal_blocks: diag,
        coupling_blocks: coup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::hermiticity_defect;

    fn test_params() -> MaterialParams {
        MaterialParams {
            onsite_si_ev: 0.0,
            onsite_ge_ev: 1.0,
            hopping_si_ev: -1.0,
            hopping_ge_ev: -0.8,
            hopping_sige_ev: -0.9,
        }
    }

    fn spec(n_slabs: usize, sites: usize) -> DeviceSpec {
        DeviceSpec {
            n_slabs,
            sites_per_slab: sites,
            lattice_constant_nm: 0.5,
            cross_section_area_nm2: 0.25,
            orbitals_per_site: 1,
            alloy_fraction_x: 0.0,
            disorder_mode: DisorderMode::Vca,
            rng_seed: 1,
            roughness: None,
        }
    }

    #[test]
    fn minimal_chain_counts() {
        let g = build_device(&spec(3, 1)).unwrap();
        assert_eq!(g.sites.len(), 3);
        assert_eq!(
            g.bonds
                .iter()
                .filter(|b| b.kind == BondKind::InterSlab)
                .count(),
            2
        );
        assert_eq!(g.bonds.iter().filter(|b| b.transverse_wrap).count(), 0);
    }

    #[test]
    fn block_rank_arithmetic() {
        let g = build_device(&spec(20, 12)).unwrap();
        assert_eq!(g.sites.len(), 240);
        let asg = assign_alloy(&g, &test_params(), 0.0, DisorderMode::Vca, 0).unwrap();
        let h = assemble_hamiltonian(&g, &asg, &test_params(), &spec(20, 12), 0.0, &vec![0.0; 240])
            .unwrap();
        assert_eq!(h.ranks(), vec![12; 20]);
    }

    #[test]
    fn production_scale_rank_240_blocks() {
        // 6x2-unit-cell cross section scaled so a slab block has 240^2 elements
        let s = spec(5, 240);
        let g = build_device(&s).unwrap();
        let asg = assign_alloy(&g, &test_params(), 0.0, DisorderMode::Vca, 0).unwrap();
        let h =
            assemble_hamiltonian(&g, &asg, &test_params(), &s, 0.0, &vec![0.0; 5 * 240]).unwrap();
        assert_eq!(h.diagonal_blocks[0].len(), 240 * 240);
    }

    #[test]
    fn reject_small_devices() {
        assert!(build_device(&spec(2, 4)).is_err());
        assert!(build_device(&spec(3, 0)).is_err());
    }

    #[test]
    fn vca_onsite_average() {
        let g = build_device(&spec(4, 3)).unwrap();
        let asg = assign_alloy(&g, &test_params(), 0.1, DisorderMode::Vca, 7).unwrap();
        match asg {
            AlloyAssignment::Vca { onsite_ev, .. } => assert!((onsite_ev - 0.1).abs() < 1e-15),
            _ => panic!("expected VCA"),
        }
    }

    #[test]
    fn random_x_zero_all_si() {
        let g = build_device(&spec(4, 3)).unwrap();
        for seed in 0..5 {
            let asg = assign_alloy(&g, &test_params(), 0.0, DisorderMode::Random, seed).unwrap();
            match asg {
                AlloyAssignment::Random { species } => {
                    assert!(species.iter().all(|&s| s == Species::Si))
                }
                _ => panic!("expected RANDOM"),
            }
        }
    }

    #[test]
    fn random_alloy_binomial_statistics() {
        // 24000 sites, x = 0.1, 200 seeds: mean Ge count within 3 sigma of 2400.
        let s = spec(100, 240);
        let g = build_device(&s).unwrap();
        let n = 24000.0;
        let x = 0.1;
        let sigma_single = (n as f64 * x * (1.0 - x)).sqrt();
        let n_seeds = 200;
        let mut total = 0usize;
        for seed in 0..n_seeds {
            let asg = assign_alloy(&g, &test_params(), x, DisorderMode::Random, seed).unwrap();
            if let AlloyAssignment::Random { species } = asg {
                total += species.iter().filter(|&&sp| sp == Species::Ge).count();
            }
        }
        let mean = total as f64 / n_seeds as f64;
        let sigma_mean = sigma_single / (n_seeds as f64).sqrt();
        assert!(
            (mean - 2400.0).abs() < 3.0 * sigma_mean,
            "mean Ge count {mean} off by more than 3 sigma ({sigma_mean})"
        );
    }

    #[test]
    fn vca_random_ensemble_consistency() {
        // ensemble average of RANDOM onsite energies converges to the VCA onsite
        let s = spec(3, 10);
        let g = build_device(&s).unwrap();
        let p = test_params();
        let x = 0.3;
        let n_seeds = 1000;
        let mut sum = 0.0;
        let n_sites = g.sites.len() as f64;
        for seed in 0..n_seeds {
            let asg = assign_alloy(&g, &p, x, DisorderMode::Random, seed).unwrap();
            sum += (0..g.sites.len()).map(|i| asg.onsite(i, &p)).sum::<f64>();
        }
        let mean = sum / (n_seeds as f64 * n_sites);
        let vca = (1.0 - x) * p.onsite_si_ev + x * p.onsite_ge_ev;
        let sigma = (x * (1.0 - x)).sqrt() * (p.onsite_ge_ev - p.onsite_si_ev)
            / (n_seeds as f64 * n_sites).sqrt();
        assert!((mean - vca).abs() < 3.0 * sigma, "mean {mean} vs vca {vca}");
    }

    #[test]
    fn roughness_zero_amplitude_noop() {
        let s = spec(6, 4);
        let g = build_device(&s).unwrap();
        let out = apply_surface_roughness(
            &g,
            s.lattice_constant_nm,
            &RoughnessSpec {
                amplitude: 0,
                correlation_length_nm: 2.0,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(out.n_active_sites(), g.n_active_sites());
    }

    #[test]
    fn roughness_deterministic_per_seed() {
        let s = spec(12, 5);
        let g = build_device(&s).unwrap();
        let rs = RoughnessSpec {
            amplitude: 2,
            correlation_length_nm: 1.5,
            seed: 42,
        };
        let a = apply_surface_roughness(&g, s.lattice_constant_nm, &rs).unwrap();
        let b = apply_surface_roughness(&g, s.lattice_constant_nm, &rs).unwrap();
        let act = |g: &DeviceGraph| g.sites.iter().map(|s| s.active).collect::<Vec<_>>();
        assert_eq!(act(&a), act(&b));
    }

    #[test]
    fn roughness_infinite_correlation_uniform() {
        // correlation length -> infinity: every slab gets an identical depth
        let s = spec(30, 4);
        let _g = build_device(&s).unwrap();
        for seed in 0..20 {
            let depths = roughness_depths(
                30,
                s.lattice_constant_nm,
                &RoughnessSpec {
                    amplitude: 1,
                    correlation_length_nm: f64::INFINITY,
                    seed,
                },
            );
            assert!(depths.iter().all(|&d| d == depths[0]), "seed {seed}: {depths:?}");
            assert!(depths[0] <= 1);
        }
    }

    #[test]
    fn roughness_rejects_disconnecting_amplitude() {
        let s = spec(6, 2);
        let g = build_device(&s).unwrap();
        let err = apply_surface_roughness(
            &g,
            s.lattice_constant_nm,
            &RoughnessSpec {
                amplitude: 2,
                correlation_length_nm: 1.0,
                seed: 0,
            },
        );
        assert!(err.is_err());
    }

    #[test]
    fn hamiltonian_real_symmetric_at_k0() {
        let s = spec(5, 4);
        let g = build_device(&s).unwrap();
        let asg = assign_alloy(&g, &test_params(), 0.0, DisorderMode::Vca, 0).unwrap();
        let h = assemble_hamiltonian(&g, &asg, &test_params(), &s, 0.0, &vec![0.0; 20]).unwrap();
        for b in &h.diagonal_blocks {
            assert!(b.iter().all(|z| z.im.abs() < 1e-15));
            assert!(hermiticity_defect(b) < 1e-14);
        }
    }

    #[test]
    fn hamiltonian_hermitian_any_k() {
        let s = spec(4, 5);
        let g = build_device(&s).unwrap();
        let asg = assign_alloy(&g, &test_params(), 0.2, DisorderMode::Random, 3).unwrap();
        let phi: Vec<f64> = (0..20).map(|i| 0.01 * i as f64).collect();
        for &k in &[0.0, 0.37, 1.2, -0.8] {
            let h = assemble_hamiltonian(&g, &asg, &test_params(), &s, k, &phi).unwrap();
            let dense = h.to_dense();
            assert!(hermiticity_defect(&dense) < 1e-14);
        }
    }

    #[test]
    fn hamiltonian_conjugate_at_minus_k() {
        let s = spec(4, 5);
        let g = build_device(&s).unwrap();
        let asg = assign_alloy(&g, &test_params(), 0.0, DisorderMode::Vca, 0).unwrap();
        let hp = assemble_hamiltonian(&g, &asg, &test_params(), &s, 0.7, &vec![0.0; 20]).unwrap();
        let hm = assemble_hamiltonian(&g, &asg, &test_params(), &s, -0.7, &vec![0.0; 20]).unwrap();
        let (dp, dm) = (hp.to_dense(), hm.to_dense());
        for (a, b) in dp.iter().zip(dm.iter()) {
            assert!((a - b.conj()).norm() < 1e-14);
        }
    }

    #[test]
    fn chain_band_eigenvalues() {
        // 1-site-wide chain with t = -1: eigenvalues sample -2 cos(q a)
        let s = spec(10, 1);
        let g = build_device(&s).unwrap();
        let p = MaterialParams {
            onsite_si_ev: 0.0,
            onsite_ge_ev: 0.0,
            hopping_si_ev: -1.0,
            hopping_ge_ev: -1.0,
            hopping_sige_ev: -1.0,
        };
        let asg = assign_alloy(&g, &p, 0.0, DisorderMode::Vca, 0).unwrap();
        let h = assemble_hamiltonian(&g, &asg, &p, &s, 0.0, &vec![0.0; 10]).unwrap();
        let dense = h.to_dense().map(|z| z.re);
        let sym = nalgebra::DMatrix::from_fn(10, 10, |i, j| dense[(i, j)]);
        let mut eig: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().cloned().collect();
        eig.sort_by(f64::total_cmp);
        // open-chain eigenvalues: -2 cos(q a), q a = m pi / (n + 1)
        let mut expect: Vec<f64> = (1..=10)
            .map(|m| -2.0 * (m as f64 * std::f64::consts::PI / 11.0).cos())
            .collect();
        expect.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn block_tridiagonality_structural() {
        // assembling any graph yields exactly n-1 coupling blocks and no more
        let s = spec(7, 3);
        let g = build_device(&s).unwrap();
        let asg = assign_alloy(&g, &test_params(), 0.0, DisorderMode::Vca, 0).unwrap();
        let h = assemble_hamiltonian(&g, &asg, &test_params(), &s, 0.4, &vec![0.0; 21]).unwrap();
        assert_eq!(h.coupling_blocks.len(), 6);
        for b in &g.bonds {
            let (si, sj) = (g.sites[b.site_i].slab, g.sites[b.site_j].slab);
            assert!(si == sj || si + 1 == sj);
        }
    }

    #[test]
    fn rough_device_variable_ranks() {
        let s = DeviceSpec {
            roughness: Some(RoughnessSpec {
                amplitude: 2,
                correlation_length_nm: 1.0,
                seed: 9,
            }),
            ..spec(10, 5)
        };
        let g = build_device(&s).unwrap();
        let g = apply_surface_roughness(&g, s.lattice_constant_nm, &s.roughness.unwrap()).unwrap();
        let asg = assign_alloy(&g, &test_params(), 0.0, DisorderMode::Vca, 0).unwrap();
        let h = assemble_hamiltonian(
            &g,
            &asg,
            &test_params(),
            &s,
            0.0,
            &vec![0.0; g.n_active_sites()],
        )
        .unwrap();
        let ranks = h.ranks();
        assert!(ranks.iter().any(|&r| r < 5), "expected a thinned slab: {ranks:?}");
        assert!(ranks.iter().all(|&r| r >= 3));
    }

    #[test]
    fn phi_length_mismatch_rejected() {
        let s = spec(3, 2);
        let g = build_device(&s).unwrap();
        let asg = assign_alloy(&g, &test_params(), 0.0, DisorderMode::Vca, 0).unwrap();
        assert!(assemble_hamiltonian(&g, &asg, &test_params(), &s, 0.0, &[0.0; 3]).is_err());
    }
}

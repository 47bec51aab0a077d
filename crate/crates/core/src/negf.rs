//! Recursive block-tridiagonal solvers for the retarded and lesser Green's
//! functions.
//!
//! Only the diagonal and first off-diagonal blocks of G^R and G^< are ever
//! formed. Scattering self-energies enter as strictly diagonal values; lead
//! self-energies as full blocks on the boundary slabs. No greater-than
//! function is stored or computed anywhere in this module.

use crate::device::BlockTridiagonalOperator;
use crate::linalg::{mat_inv, mat_mul, CMatrix, C64};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NegfError {
    #[error("singular block pivot at slab {0}")]
    SingularPivot(usize),
    #[error("self-energy diagonal length {got} does not match slab rank {expected} at slab {slab}")]
    SigmaLengthMismatch {
        slab: usize,
        got: usize,
        expected: usize,
    },
    #[error("dense reference guard: total rank {0} exceeds 2000")]
    RankGuard(usize),
    #[error("dense reference: singular full matrix")]
    DenseSingular,
}

/// Total self-energy inputs for one (E,k) tuple: diagonal scattering entries
/// per slab plus full lead blocks on the boundary slabs.
#[derive(Debug, Clone)]
pub struct SelfEnergyTotal {
    pub sigma_r_diag: Vec<Vec<C64>>,
    pub sigma_l_diag: Vec<Vec<C64>>,
    pub lead_r_first: Option<CMatrix>,
    pub lead_r_last: Option<CMatrix>,
    pub lead_l_first: Option<CMatrix>,
    pub lead_l_last: Option<CMatrix>,
}

impl SelfEnergyTotal {
    pub fn zero(ranks: &[usize]) -> Self {
        SelfEnergyTotal {
            sigma_r_diag: ranks.iter().map(|&r| vec![C64::new(0.0, 0.0); r]).collect(),
            sigma_l_diag: ranks.iter().map(|&r| vec![C64::new(0.0, 0.0); r]).collect(),
            lead_r_first: None,
            lead_r_last: None,
            lead_l_first: None,
            lead_l_last: None,
        }
    }

    fn check(&self, ranks: &[usize]) -> Result<(), NegfError> {
        for (slab, (d, &r)) in self.sigma_r_diag.iter().zip(ranks.iter()).enumerate() {
            if d.len() != r {
                return Err(NegfError::SigmaLengthMismatch {
                    slab,
                    got: d.len(),
                    expected: r,
                });
            }
        }
        for (slab, (d, &r)) in self.sigma_l_diag.iter().zip(ranks.iter()).enumerate() {
            if d.len() != r {
                return Err(NegfError::SigmaLengthMismatch {
                    slab,
                    got: d.len(),
                    expected: r,
                });
            }
        }
        Ok(())
    }
}

/// Retarded solution: diagonal blocks, optional first off-diagonal blocks
/// G_{i,i+1}, and the left-connected sweep state reused by the lesser solve.
#[derive(Debug, Clone)]
pub struct RetardedPart {
    pub energy_ev: f64,
    pub diag: Vec<CMatrix>,
    /// G_{i,i+1} per interface, present when requested.
    pub offdiag_upper: Option<Vec<CMatrix>>,
    // left-connected Green functions g^L_i
    g_left: Vec<CMatrix>,
    // A_{i,i+1} = -H_{i,i+1}; A_{i+1,i} is its adjoint
    a_upper: Vec<CMatrix>,
    // cached products from the backward sweep: P_i = g^L_i A_{i,i+1},
    // R_i = P_i G_{i+1,i+1} A_{i+1,i}
    cached_p: Vec<Option<CMatrix>>,
    cached_r: Vec<Option<CMatrix>>,
}

/// Lesser solution blocks.
#[derive(Debug, Clone)]
pub struct LesserPart {
    pub diag: Vec<CMatrix>,
    /// G^<_{i,i+1} per interface, present when requested on the retarded part.
    pub offdiag_upper: Option<Vec<CMatrix>>,
}

/// Diagonal + first-off-diagonal blocks of G^R and G^< at one (E,k) tuple.
#[derive(Debug, Clone)]
pub struct GreensSlice {
    pub energy_ev: f64,
    pub momentum_inv_nm: f64,
    pub gr_diag: Vec<CMatrix>,
    pub gr_offdiag: Option<Vec<CMatrix>>,
    pub gl_diag: Vec<CMatrix>,
    pub gl_offdiag: Option<Vec<CMatrix>>,
}

impl GreensSlice {
    /// Flattened diagonal entries of G^R, slab-major.
    pub fn gr_site_diag(&self) -> Vec<C64> {
        self.gr_diag
            .iter()
            .flat_map(|b| (0..b.nrows()).map(move |i| b[(i, i)]))
            .collect()
    }

    pub fn gl_site_diag(&self) -> Vec<C64> {
        self.gl_diag
            .iter()
            .flat_map(|b| (0..b.nrows()).map(move |i| b[(i, i)]))
            .collect()
    }
}

fn a_diagonal_blocks(
    h: &BlockTridiagonalOperator,
    sigma: &SelfEnergyTotal,
    energy_ev: f64,
) -> Vec<CMatrix> {
    let n = h.n_slabs();
    let e = C64::new(energy_ev, 0.0);
    (0..n)
        .map(|i| {
            let r = h.diagonal_blocks[i].nrows();
            let mut a = CMatrix::from_fn(r, r, |p, q| {
                let eterm = if p == q { e } else { C64::new(0.0, 0.0) };
                eterm - h.diagonal_blocks[i][(p, q)]
            });
            for p in 0..r {
                a[(p, p)] -= sigma.sigma_r_diag[i][p];
            }
            if i == 0 {
                if let Some(lead) = &sigma.lead_r_first {
                    a -= lead;
                }
            }
            if i == n - 1 {
                if let Some(lead) = &sigma.lead_r_last {
                    a -= lead;
                }
            }
            a
        })
        .collect()
}

/// Solve Eq. (1)-type blocks: G^R = [(E)I - H - Sigma^R]^{-1}, forward and
/// backward sweeps over the slab chain. Per-slab ranks may differ.
pub fn solve_retarded(
    h: &BlockTridiagonalOperator,
    sigma: &SelfEnergyTotal,
    energy_ev: f64,
    with_offdiag: bool,
) -> Result<RetardedPart, NegfError> {
    let ranks = h.ranks();
    sigma.check(&ranks)?;
    let n = h.n_slabs();
    let a_diag = a_diagonal_blocks(h, sigma, energy_ev);
    let a_upper: Vec<CMatrix> = h.coupling_blocks.iter().map(|c| c.map(|z| -z)).collect();

    // forward sweep: left-connected g^L_i
    let mut g_left: Vec<CMatrix> = Vec::with_capacity(n);
    for i in 0..n {
        let pivot = if i == 0 {
            a_diag[0].clone()
        } else {
            let al = a_upper[i - 1].adjoint();
            let t = mat_mul(&mat_mul(&al, &g_left[i - 1]), &a_upper[i - 1]);
            &a_diag[i] - t
        };
        g_left.push(mat_inv(&pivot).ok_or(NegfError::SingularPivot(i))?);
    }

    // backward sweep
    let mut diag = vec![CMatrix::zeros(0, 0); n];
    let mut cached_p = vec![None; n.saturating_sub(1)];
    let mut cached_r = vec![None; n.saturating_sub(1)];
    let mut offdiag = if with_offdiag {
        Some(vec![CMatrix::zeros(0, 0); n.saturating_sub(1)])
    } else {
        None
    };
    diag[n - 1] = g_left[n - 1].clone();
    for i in (0..n.saturating_sub(1)).rev() {
        let p = mat_mul(&g_left[i], &a_upper[i]);
        let q = mat_mul(&p, &diag[i + 1]);
        let r = mat_mul(&q, &a_upper[i].adjoint());
        diag[i] = &g_left[i] + mat_mul(&r, &g_left[i]);
        if let Some(off) = offdiag.as_mut() {
            off[i] = q.map(|z| -z);
        }
        cached_p[i] = Some(p);
        cached_r[i] = Some(r);
    }
    Ok(RetardedPart {
        energy_ev,
        diag,
        offdiag_upper: offdiag,
        g_left,
        a_upper,
        cached_p,
        cached_r,
    })
}

/// Solve Eq. (2)-type blocks: G^< = G^R Sigma^< G^R^dag via left-connected
/// forward and backward sweeps. Never forms the full matrix.
pub fn solve_lesser(
    retarded: &RetardedPart,
    sigma: &SelfEnergyTotal,
) -> Result<LesserPart, NegfError> {
    let n = retarded.diag.len();
    let ranks: Vec<usize> = retarded.diag.iter().map(|b| b.nrows()).collect();
    sigma.check(&ranks)?;
    let s_block = |i: usize| {
        let r = ranks[i];
        let mut s = CMatrix::zeros(r, r);
        for p in 0..r {
            s[(p, p)] = sigma.sigma_l_diag[i][p];
        }
        if i == 0 {
            if let Some(lead) = &sigma.lead_l_first {
                s += lead;
            }
        }
        if i == n - 1 {
            if let Some(lead) = &sigma.lead_l_last {
                s += lead;
            }
        }
        s
    };

    // forward: q_i = g^L_i (S_i + A_{i,i-1} q_{i-1} A_{i,i-1}^dag) g^L_i^dag
    let mut q_left: Vec<CMatrix> = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = s_block(i);
        if i > 0 {
            let al = retarded.a_upper[i - 1].adjoint();
            s += mat_mul(&mat_mul(&al, &q_left[i - 1]), &al.adjoint());
        }
        let g = &retarded.g_left[i];
        q_left.push(mat_mul(&mat_mul(g, &s), &g.adjoint()));
    }

    // backward:
    // G^<_i = q_i + P_i G^<_{i+1} P_i^dag + R_i q_i + q_i R_i^dag
    let mut diag = vec![CMatrix::zeros(0, 0); n];
    let mut offdiag = retarded
        .offdiag_upper
        .as_ref()
        .map(|_| vec![CMatrix::zeros(0, 0); n.saturating_sub(1)]);
    diag[n - 1] = q_left[n - 1].clone();
    for i in (0..n.saturating_sub(1)).rev() {
        let p = retarded.cached_p[i].as_ref().expect("backward cache");
        let r = retarded.cached_r[i].as_ref().expect("backward cache");
        let m = mat_mul(p, &diag[i + 1]);
        let term2 = mat_mul(&m, &p.adjoint());
        let term3 = mat_mul(r, &q_left[i]);
        let term4 = mat_mul(&q_left[i], &r.adjoint());
        diag[i] = &q_left[i] + term2 + term3 + term4;
        if let Some(off) = offdiag.as_mut() {
            // G^<_{i,i+1} = -q_i A_{i+1,i}^dag G_{i+1}^dag - P_i G^<_{i+1}
            let al_dag = retarded.a_upper[i].clone(); // (A_{i+1,i})^dag = A_{i,i+1}
            let t1 = mat_mul(
                &mat_mul(&q_left[i], &al_dag),
                &retarded.diag[i + 1].adjoint(),
            );
            off[i] = (t1 + m).map(|z| -z);
        }
    }
    Ok(LesserPart {
        diag,
        offdiag_upper: offdiag,
    })
}

/// One-call solve of both Green's functions for a tuple.
pub fn solve_slice(
    h: &BlockTridiagonalOperator,
    sigma: &SelfEnergyTotal,
    energy_ev: f64,
    momentum_inv_nm: f64,
    with_offdiag: bool,
) -> Result<GreensSlice, NegfError> {
    let retarded = solve_retarded(h, sigma, energy_ev, with_offdiag)?;
    let lesser = solve_lesser(&retarded, sigma)?;
    Ok(GreensSlice {
        energy_ev,
        momentum_inv_nm,
        gr_diag: retarded.diag,
        gr_offdiag: retarded.offdiag_upper,
        gl_diag: lesser.diag,
        gl_offdiag: lesser.offdiag_upper,
    })
}

/// Dense reference: direct inversion and sandwich product. Test oracle only.
pub fn dense_reference(
    h: &BlockTridiagonalOperator,
    sigma: &SelfEnergyTotal,
    energy_ev: f64,
) -> Result<(CMatrix, CMatrix), NegfError> {
    let total = h.total_rank();
    if total > 2000 {
        return Err(NegfError::RankGuard(total));
    }
    let ranks = h.ranks();
    sigma.check(&ranks)?;
    let n = h.n_slabs();
    let mut offsets = Vec::with_capacity(n);
    let mut acc = 0;
    for &r in &ranks {
        offsets.push(acc);
        acc += r;
    }
    let mut a = CMatrix::zeros(total, total);
    let a_diag = a_diagonal_blocks(h, sigma, energy_ev);
    for i in 0..n {
        a.view_mut((offsets[i], offsets[i]), (ranks[i], ranks[i]))
            .copy_from(&a_diag[i]);
    }
    for (i, c) in h.coupling_blocks.iter().enumerate() {
        let up = c.map(|z| -z);
        a.view_mut((offsets[i], offsets[i + 1]), (ranks[i], ranks[i + 1]))
            .copy_from(&up);
        a.view_mut((offsets[i + 1], offsets[i]), (ranks[i + 1], ranks[i]))
            .copy_from(&up.adjoint());
    }
    let gr = a.try_inverse().ok_or(NegfError::DenseSingular)?;
    let mut s = CMatrix::zeros(total, total);
    for i in 0..n {
        for p in 0..ranks[i] {
            s[(offsets[i] + p, offsets[i] + p)] = sigma.sigma_l_diag[i][p];
        }
    }
    if let Some(lead) = &sigma.lead_l_first {
        let r = ranks[0];
        let mut v = s.view_mut((0, 0), (r, r));
        v += lead;
    }
    if let Some(lead) = &sigma.lead_l_last {
        let r = ranks[n - 1];
        let off = offsets[n - 1];
        let mut v = s.view_mut((off, off), (r, r));
        v += lead;
    }
    let gl = &gr * s * gr.adjoint();
    Ok((gr, gl))
}

/// Slab offsets into the dense matrix, for oracle comparisons.
pub fn block_offsets(h: &BlockTridiagonalOperator) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(h.n_slabs());
    let mut acc = 0;
    for b in &h.diagonal_blocks {
        offsets.push(acc);
        acc += b.nrows();
    }
    offsets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{fro_norm, max_rel_diff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_instance(
        seed: u64,
        ranks: &[usize],
    ) -> (BlockTridiagonalOperator, SelfEnergyTotal) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rand_c = |rng: &mut ChaCha8Rng| -> C64 {
            C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        };
        let diag: Vec<CMatrix> = ranks
            .iter()
            .map(|&r| {
                let m = CMatrix::from_fn(r, r, |_, _| rand_c(&mut rng));
                (&m + m.adjoint()).scale(0.5)
            })
            .collect();
        let coup: Vec<CMatrix> = ranks
            .windows(2)
            .map(|w| CMatrix::from_fn(w[0], w[1], |_, _| rand_c(&mut rng)))
            .collect();
        let h = BlockTridiagonalOperator {
            diagonal_blocks: diag,
            coupling_blocks: coup,
        };
        let sigma_r_diag: Vec<Vec<C64>> = ranks
            .iter()
            .map(|&r| {
                (0..r)
                    .map(|_| C64::new(rng.gen_range(-0.2..0.2), -rng.gen_range(0.05..0.5)))
                    .collect()
            })
            .collect();
        let sigma_l_diag: Vec<Vec<C64>> = ranks
            .iter()
            .map(|&r| (0..r).map(|_| C64::new(0.0, rng.gen_range(0.0..1.0))).collect())
            .collect();
        let n = ranks.len();
        let mk_lead = |rng: &mut ChaCha8Rng, r: usize| {
            let m = CMatrix::from_fn(r, r, |_, _| {
                C64::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3))
            });
            // dissipative retarded lead: anti-Hermitian part negative
            let herm = (&m + m.adjoint()).scale(0.5);
            let gamma = CMatrix::from_fn(r, r, |i, j| {
                if i == j {
                    C64::new(rng.gen_range(0.1..0.6), 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            });
            &herm - gamma.map(|z| C64::new(0.0, 0.5) * z)
        };
        let lead_r_first = Some(mk_lead(&mut rng, ranks[0]));
        let lead_r_last = Some(mk_lead(&mut rng, ranks[n - 1]));
        let mk_lesser = |rng: &mut ChaCha8Rng, r: usize| {
            let gamma = CMatrix::from_fn(r, r, |i, j| {
                if i == j {
                    C64::new(rng.gen_range(0.0..1.0), 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            });
            gamma.map(|z| C64::new(0.0, 0.5) * z)
        };
        let lead_l_first = Some(mk_lesser(&mut rng, ranks[0]));
        let lead_l_last = Some(mk_lesser(&mut rng, ranks[n - 1]));
        let sigma = SelfEnergyTotal {
            sigma_r_diag,
            sigma_l_diag,
            lead_r_first,
            lead_r_last,
            lead_l_first,
            lead_l_last,
        };
        (h, sigma)
    }

    fn compare_vs_dense(seed: u64, ranks: &[usize], energy: f64) -> f64 {
        let (h, sigma) = random_instance(seed, ranks);
        let slice = solve_slice(&h, &sigma, energy, 0.0, true).unwrap();
        let (gr, gl) = dense_reference(&h, &sigma, energy).unwrap();
        let offsets = block_offsets(&h);
        let rk = h.ranks();
        let mut worst: f64 = 0.0;
        for i in 0..h.n_slabs() {
            let dr = gr.view((offsets[i], offsets[i]), (rk[i], rk[i])).into_owned();
            worst = worst.max(max_rel_diff(&slice.gr_diag[i], &dr, 1e-12));
            let dl = gl.view((offsets[i], offsets[i]), (rk[i], rk[i])).into_owned();
            worst = worst.max(max_rel_diff(&slice.gl_diag[i], &dl, 1e-12));
            if i + 1 < h.n_slabs() {
                let drq = gr
                    .view((offsets[i], offsets[i + 1]), (rk[i], rk[i + 1]))
                    .into_owned();
                worst = worst.max(max_rel_diff(
                    &slice.gr_offdiag.as_ref().unwrap()[i],
                    &drq,
                    1e-12,
                ));
                let dlq = gl
                    .view((offsets[i], offsets[i + 1]), (rk[i], rk[i + 1]))
                    .into_owned();
                worst = worst.max(max_rel_diff(
                    &slice.gl_offdiag.as_ref().unwrap()[i],
                    &dlq,
                    1e-12,
                ));
            }
        }
        worst
    }

    #[test]
    fn single_slab_is_direct_inverse() {
        let (h, sigma) = random_instance(3, &[5]);
        let ret = solve_retarded(&h, &sigma, 0.3, true).unwrap();
        let (gr, _) = dense_reference(&h, &sigma, 0.3).unwrap();
        assert!(max_rel_diff(&ret.diag[0], &gr, 1e-12) < 1e-12);
    }

    #[test]
    fn scalar_eta_identity() {
        // Sigma^R = -i eta, H = 0, E = 0: G^R = i/eta * (-1) = -(i/eta)
        let eta = 0.01;
        let h = BlockTridiagonalOperator {
            diagonal_blocks: vec![CMatrix::zeros(1, 1)],
            coupling_blocks: vec![],
        };
        let mut sigma = SelfEnergyTotal::zero(&[1]);
        sigma.sigma_r_diag[0][0] = C64::new(0.0, -eta);
        let ret = solve_retarded(&h, &sigma, 0.0, false).unwrap();
        let expect = C64::new(0.0, -1.0 / eta);
        assert!((ret.diag[0][(0, 0)] - expect).norm() < 1e-12);
    }

    #[test]
    fn scalar_complex_shift() {
        // rank-1: E=2, H=1, Sigma^R = -0.1i: G^R = 1/(1 + 0.1i)
        let h = BlockTridiagonalOperator {
            diagonal_blocks: vec![CMatrix::from_element(1, 1, C64::new(1.0, 0.0))],
            coupling_blocks: vec![],
        };
        let mut sigma = SelfEnergyTotal::zero(&[1]);
        sigma.sigma_r_diag[0][0] = C64::new(0.0, -0.1);
        let (gr, _) = dense_reference(&h, &sigma, 2.0).unwrap();
        let expect = C64::new(1.0, 0.0) / C64::new(1.0, 0.1);
        assert!((gr[(0, 0)] - expect).norm() < 1e-14);
    }

    #[test]
    fn dense_singular_surfaced() {
        let h = BlockTridiagonalOperator {
            diagonal_blocks: vec![CMatrix::identity(2, 2)],
            coupling_blocks: vec![],
        };
        let sigma = SelfEnergyTotal::zero(&[2]);
        assert!(matches!(
            dense_reference(&h, &sigma, 1.0),
            Err(NegfError::DenseSingular)
        ));
    }

    #[test]
    fn rank_guard() {
        let h = BlockTridiagonalOperator {
            diagonal_blocks: vec![CMatrix::identity(2001, 2001)],
            coupling_blocks: vec![],
        };
        let sigma = SelfEnergyTotal::zero(&[2001]);
        assert!(matches!(
            dense_reference(&h, &sigma, 1.0),
            Err(NegfError::RankGuard(2001))
        ));
    }

    #[test]
    fn rgf_matches_dense_10_blocks_rank_8() {
        for seed in 0..10 {
            let worst = compare_vs_dense(seed, &[8; 10], 0.2);
            assert!(worst < 1e-10, "seed {seed}: worst {worst:.3e}");
        }
    }

    #[test]
    fn rgf_matches_dense_variable_ranks() {
        for seed in 0..10 {
            let worst = compare_vs_dense(seed, &[4, 7, 3, 8, 5, 6, 2], -0.4);
            assert!(worst < 1e-10, "seed {seed}: worst {worst:.3e}");
        }
    }

    #[test]
    fn lesser_zero_sigma_gives_zero() {
        let (h, mut sigma) = random_instance(11, &[4, 4, 4]);
        sigma.sigma_l_diag = vec![vec![C64::new(0.0, 0.0); 4]; 3];
        sigma.lead_l_first = None;
        sigma.lead_l_last = None;
        let slice = solve_slice(&h, &sigma, 0.1, 0.0, true).unwrap();
        for b in &slice.gl_diag {
            assert!(fro_norm(b) < 1e-14);
        }
    }

    #[test]
    fn lesser_anti_hermitian_diagonals() {
        for seed in 0..5 {
            let (h, sigma) = random_instance(seed + 100, &[5, 6, 4, 5]);
            let slice = solve_slice(&h, &sigma, 0.0, 0.0, false).unwrap();
            for b in &slice.gl_diag {
                let defect = fro_norm(&(b + b.adjoint()));
                assert!(defect < 1e-12 * fro_norm(b).max(1.0), "seed {seed}");
            }
        }
    }

    #[test]
    fn spectral_positivity_of_retarded() {
        for seed in 0..5 {
            let (h, sigma) = random_instance(seed + 200, &[6, 6, 6, 6, 6]);
            let slice = solve_slice(&h, &sigma, 0.3, 0.0, false).unwrap();
            for b in &slice.gr_diag {
                // i (G - G^dag) must be PSD
                let spec = (b - b.adjoint()).map(|z| C64::new(0.0, 1.0) * z);
                let min = crate::linalg::min_eigenvalue_hermitian(&spec);
                assert!(min >= -1e-10 * fro_norm(&spec).max(1e-30), "seed {seed}: {min}");
            }
        }
    }

    #[test]
    fn singular_pivot_reports_slab() {
        // block 0 pivot exactly singular: H = E I at slab 0, no dissipation
        let h = BlockTridiagonalOperator {
            diagonal_blocks: vec![CMatrix::identity(2, 2), CMatrix::zeros(2, 2)],
            coupling_blocks: vec![CMatrix::zeros(2, 2)],
        };
        let sigma = SelfEnergyTotal::zero(&[2, 2]);
        match solve_retarded(&h, &sigma, 1.0, false) {
            Err(NegfError::SingularPivot(slab)) => assert_eq!(slab, 0),
            other => panic!("expected singular pivot, got {other:?}"),
        }
    }
}

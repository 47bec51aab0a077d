//! Energy-momentum integration grid with quadrature weights and the optical
//! phonon shift stencil.
//!
//! Homogeneous grids keep the energy spacing commensurate with the optical
//! phonon energy so every interior energy resolves both +-E_op shifts to exact
//! indices. Adaptive refinement inserts midpoints and closes unresolvable
//! shifts with two-point linear interpolation pairs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("degenerate energy range [{0}, {1}]")]
    DegenerateRange(f64, f64),
    #[error("points_per_eop must be >= 1")]
    BadPointsPerEop,
    #[error("n_k must be >= 1")]
    BadNk,
    #[error("value count {got} does not match grid size {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

/// How an energy +- E_op shift resolves on the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShiftRef {
    /// Exact grid index.
    Exact(usize),
    /// Linear interpolation between two indices: value = (1-frac)*lo + frac*hi.
    Interp { lo: usize, hi: usize, frac: f64 },
    /// Falls outside the grid; treated as zero spectral weight.
    Absent,
}

#[derive(Debug, Clone, Copy)]
pub struct ShiftPair {
    pub plus: ShiftRef,
    pub minus: ShiftRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    Homogeneous,
    Adaptive,
}

#[derive(Debug, Clone)]
pub struct EkGrid {
    pub energies_ev: Vec<f64>,
    pub energy_weights_ev: Vec<f64>,
    pub momenta_inv_nm: Vec<f64>,
    pub momentum_weights_inv_nm: Vec<f64>,
    pub optical_shifts: Vec<ShiftPair>,
    pub mode: GridMode,
    pub optical_energy_ev: f64,
}

impl EkGrid {
    pub fn n_energies(&self) -> usize {
        self.energies_ev.len()
    }

    pub fn n_momenta(&self) -> usize {
        self.momenta_inv_nm.len()
    }

    pub fn n_tuples(&self) -> usize {
        self.n_energies() * self.n_momenta()
    }

    /// Lexicographic (energy-major) tuple index.
    pub fn tuple_index(&self, e_idx: usize, k_idx: usize) -> usize {
        e_idx * self.n_momenta() + k_idx
    }

    pub fn tuple_coords(&self, tuple: usize) -> (usize, usize) {
        (tuple / self.n_momenta(), tuple % self.n_momenta())
    }

    pub fn integrate_energy(&self, values: &[f64]) -> Result<f64, GridError> {
        if values.len() != self.n_energies() {
            return Err(GridError::LengthMismatch {
                got: values.len(),
                expected: self.n_energies(),
            });
        }
        Ok(values
            .iter()
            .zip(&self.energy_weights_ev)
            .map(|(v, w)| v * w)
            .sum())
    }

    pub fn integrate_momentum(&self, values: &[f64]) -> Result<f64, GridError> {
        if values.len() != self.n_momenta() {
            return Err(GridError::LengthMismatch {
                got: values.len(),
                expected: self.n_momenta(),
            });
        }
        Ok(values
            .iter()
            .zip(&self.momentum_weights_inv_nm)
            .map(|(v, w)| v * w)
            .sum())
    }

    /// All shift pairs either exactly resolvable or cleanly absent.
    pub fn shifts_all_exact(&self) -> bool {
        self.optical_shifts.iter().all(|s| {
            !matches!(s.plus, ShiftRef::Interp { .. }) && !matches!(s.minus, ShiftRef::Interp { .. })
        })
    }
}

fn trapezoid_weights(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| {
            let lo = if i == 0 { xs[0] } else { xs[i - 1] };
            let hi = if i == n - 1 { xs[n - 1] } else { xs[i + 1] };
            0.5 * (hi - lo)
        })
        .collect()
}

fn resolve_shifts(energies: &[f64], e_op: f64) -> Vec<ShiftPair> {
    let resolve = |target: f64| -> ShiftRef {
        let n = energies.len();
        if target < energies[0] - 1e-12 || target > energies[n - 1] + 1e-12 {
            return ShiftRef::Absent;
        }
        // exact match?
        match energies.binary_search_by(|e| e.partial_cmp(&target).unwrap()) {
            Ok(i) => ShiftRef::Exact(i),
            Err(pos) => {
                if pos > 0 && (energies[pos - 1] - target).abs() < 1e-10 {
                    return ShiftRef::Exact(pos - 1);
                }
                if pos < n && (energies[pos] - target).abs() < 1e-10 {
                    return ShiftRef::Exact(pos);
                }
                if pos == 0 || pos == n {
                    return ShiftRef::Absent;
                }
                let (lo, hi) = (pos - 1, pos);
                let frac = (target - energies[lo]) / (energies[hi] - energies[lo]);
                ShiftRef::Interp { lo, hi, frac }
            }
        }
    };
    energies
        .iter()
        .map(|&e| ShiftPair {
            plus: resolve(e + e_op),
            minus: resolve(e - e_op),
        })
        .collect()
}

/// Homogeneous grid: energy spacing E_op / points_per_eop, range expanded
/// minimally so the spacing divides it; symmetry-reduced uniform k grid over
/// [0, pi/W] whose weights sum to the full zone measure 2 pi / W.
pub fn build_homogeneous(
    e_min_ev: f64,
    e_max_ev: f64,
    e_op_ev: f64,
    points_per_eop: usize,
    n_k: usize,
    transverse_period_nm: f64,
) -> Result<EkGrid, GridError> {
    if e_max_ev <= e_min_ev {
        return Err(GridError::DegenerateRange(e_min_ev, e_max_ev));
    }
    if points_per_eop == 0 {
        return Err(GridError::BadPointsPerEop);
    }
    if n_k == 0 {
        return Err(GridError::BadNk);
    }
    let spacing = e_op_ev / points_per_eop as f64;
    let n_intervals = ((e_max_ev - e_min_ev) / spacing).ceil() as usize;
    let n_intervals = n_intervals.max(1);
    let energies: Vec<f64> = (0..=n_intervals)
        .map(|i| e_min_ev + i as f64 * spacing)
        .collect();
    let energy_weights = trapezoid_weights(&energies);

    let zone = 2.0 * std::f64::consts::PI / transverse_period_nm;
    let half_zone = 0.5 * zone;
    let (momenta, momentum_weights) = if n_k == 1 {
        (vec![0.0], vec![zone])
    } else {
        let h = half_zone / (n_k - 1) as f64;
        let ks: Vec<f64> = (0..n_k).map(|i| i as f64 * h).collect();
        // trapezoid on the half zone, doubled by k <-> -k symmetry
        let ws = trapezoid_weights(&ks).iter().map(|w| 2.0 * w).collect();
        (ks, ws)
    };

    let optical_shifts = resolve_shifts(&energies, e_op_ev);
    Ok(EkGrid {
        energies_ev: energies,
        energy_weights_ev: energy_weights,
        momenta_inv_nm: momenta,
        momentum_weights_inv_nm: momentum_weights,
        optical_shifts,
        mode: GridMode::Homogeneous,
        optical_energy_ev: e_op_ev,
    })
}

/// Insert up to `budget` midpoints into the intervals ranked by
/// indicator * width (indicator averaged over the interval ends). Deterministic
/// tie-break: lower interval index wins.
pub fn refine_adaptive(grid: &EkGrid, indicator: &[f64], budget: usize) -> Result<EkGrid, GridError> {
    if indicator.len() != grid.n_energies() {
        return Err(GridError::LengthMismatch {
            got: indicator.len(),
            expected: grid.n_energies(),
        });
    }
    if budget == 0 {
        return Ok(grid.clone());
    }
    // (score, start energy value, insertion point) per interval; splitting an
    // interval halves its width for subsequent picks
    #[derive(Clone)]
    struct Interval {
        lo: f64,
        hi: f64,
        score_density: f64, // indicator per unit width
        seq: usize,         // original interval index, tie-break
    }
    let mut intervals: Vec<Interval> = (0..grid.n_energies() - 1)
        .map(|i| {
            // an interval is only as hot as its cooler end: taking the min
            // keeps refinement inside a peaked feature instead of bleeding
            // into neighbors that merely share one hot node
            let ind = indicator[i].min(indicator[i + 1]);
            Interval {
                lo: grid.energies_ev[i],
                hi: grid.energies_ev[i + 1],
                score_density: ind,
                seq: i,
            }
        })
        .collect();
    let mut new_points = Vec::new();
    for _ in 0..budget {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (j, iv) in intervals.iter().enumerate() {
            let score = iv.score_density * (iv.hi - iv.lo);
            if j == 0 || score > best_score || (score == best_score && iv.seq < intervals[best].seq)
            {
                best = j;
                best_score = score;
            }
        }
        let iv = intervals[best].clone();
        let mid = 0.5 * (iv.lo + iv.hi);
        new_points.push(mid);
        intervals[best] = Interval {
            lo: iv.lo,
            hi: mid,
            score_density: iv.score_density,
            seq: iv.seq,
        };
        intervals.push(Interval {
            lo: mid,
            hi: iv.hi,
            score_density: iv.score_density,
            seq: iv.seq,
        });
    }
    let mut energies = grid.energies_ev.clone();
    energies.extend(new_points);
    energies.sort_by(f64::total_cmp);
    energies.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let energy_weights = trapezoid_weights(&energies);
    let optical_shifts = resolve_shifts(&energies, grid.optical_energy_ev);
    Ok(EkGrid {
        energies_ev: energies,
        energy_weights_ev: energy_weights,
        momenta_inv_nm: grid.momenta_inv_nm.clone(),
        momentum_weights_inv_nm: grid.momentum_weights_inv_nm.clone(),
        optical_shifts,
        mode: GridMode::Adaptive,
        optical_energy_ev: grid.optical_energy_ev,
    })
}

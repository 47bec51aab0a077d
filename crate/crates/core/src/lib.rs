//! Desk-scale nonequilibrium Green's function (NEGF) transport simulator for
//! ultra-thin-body transistors.
//!
//! The crate solves the coupled retarded/lesser Green's function equations for
//! a block-tridiagonal tight-binding device, with semi-infinite contact
//! self-energies, acoustic and optical deformation-potential phonon scattering
//! in the self-consistent Born approximation, and charge self-consistency with
//! a finite-volume Poisson solve. The (E,k) quadrature space is partitioned
//! across share-nothing workers that exchange Green's function diagonals over
//! a deterministic, deadlock-free schedule.

pub mod config;
pub mod constants;
pub mod device;
pub mod ekgrid;
pub mod leads;
pub mod linalg;
pub mod memtrack;
pub mod negf;
pub mod observables;
pub mod parallel;
pub mod poisson;
pub mod profiler;
pub mod scattering;
pub mod sweep;

pub use linalg::CMatrix;

/// All heap traffic in binaries linking this crate is counted, so profiler
/// nodes can report peak resident bytes per timer scope.
#[global_allocator]
static GLOBAL_ALLOCATOR: memtrack::TrackingAllocator = memtrack::TrackingAllocator;

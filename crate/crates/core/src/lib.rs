//! Fiber-Hamiltonian toolkit for a translation-invariant atom coupled to a
//! quantized field on a truncated Fock space.
//!
//! The crate is organized bottom-up:
//!
//! * [`grid`] discretizes photon momenta on a radial-shell times direction
//!   product grid with quadrature weights and both dispersion relations.
//! * [`fock`] enumerates the truncated occupation basis and builds every
//!   second-quantized operator as a sparse matrix.
//! * [`atom`] solves the radial bound-state problem and tabulates coupling
//!   matrix elements of the field form factors.
//! * [`fiber`] assembles the fixed-total-momentum Hamiltonians on the
//!   atom-field product basis.
//! * [`spectral`] provides eigensolvers, dispersion scans, and window bases.
//! * [`resonance`] evaluates second-order decay-rate matrices on energy
//!   shells.
//! * [`commutator`] builds the conjugate operator, the positivity reports,
//!   the Feshbach reduction, and the virial residual.
//! * [`dynamics`] propagates states with a Krylov exponential and computes
//!   finite-time scattering diagnostics.

pub mod atom;
pub mod commutator;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod fiber;
pub mod fock;
pub mod grid;
pub mod hash;
pub mod io;
pub mod linalg;
pub mod resonance;
pub mod spectral;

pub use error::{Error, Result};
pub use linalg::C64;

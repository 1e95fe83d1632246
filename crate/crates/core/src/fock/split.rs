//! Factorization of the Fock space over a soft/interacting mode partition,
//! the two-factor lift of a partition of unity, and the scattering
//! identification map.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::fock::FockBasis;
use crate::linalg::{C64, CsrMatrix, ZERO};

/// Soft/interacting partition with the induced factor bases.
///
/// The factor ordering is (interacting, soft): a source state maps to
/// product index hard_idx * soft_dim + soft_idx.
#[derive(Debug)]
pub struct ModeSplit {
    pub hard_modes: Vec<u32>,
    pub soft_modes: Vec<u32>,
    pub hard_basis: FockBasis,
    pub soft_basis: FockBasis,
    /// hard-mode id -> factor-local id (and same for soft), dense over modes.
    factor_of: Vec<(bool, u32)>,
}

impl ModeSplit {
    pub fn new(basis: &FockBasis, soft: &[bool]) -> Result<Self> {
        if soft.len() != basis.mode_count() {
            return Err(Error::config(
                "fock.split",
                "partition length must equal the mode count",
            ));
        }
        let mut hard_modes = Vec::new();
        let mut soft_modes = Vec::new();
        let mut factor_of = Vec::with_capacity(soft.len());
        for (m, &is_soft) in soft.iter().enumerate() {
            if is_soft {
                factor_of.push((true, soft_modes.len() as u32));
                soft_modes.push(m as u32);
            } else {
                factor_of.push((false, hard_modes.len() as u32));
                hard_modes.push(m as u32);
            }
        }
        if hard_modes.is_empty() || soft_modes.is_empty() {
            return Err(Error::config(
                "fock.split",
                "both factors need at least one mode",
            ));
        }
        Ok(ModeSplit {
            hard_basis: FockBasis::build(hard_modes.len(), basis.n_max())?,
            soft_basis: FockBasis::build(soft_modes.len(), basis.n_max())?,
            hard_modes,
            soft_modes,
            factor_of,
        })
    }

    pub fn product_dim(&self) -> usize {
        self.hard_basis.dim() * self.soft_basis.dim()
    }

    /// Product index of source state `idx`.
    pub fn product_index(&self, basis: &FockBasis, idx: usize) -> usize {
        let mut hard_pairs: Vec<(u32, u8)> = Vec::new();
        let mut soft_pairs: Vec<(u32, u8)> = Vec::new();
        for &(m, c) in basis.occs(idx) {
            let (is_soft, local) = self.factor_of[m as usize];
            if is_soft {
                soft_pairs.push((local, c));
            } else {
                hard_pairs.push((local, c));
            }
        }
        let h = self
            .hard_basis
            .lookup_pairs(&hard_pairs)
            .expect("factor occupancy within cap");
        let s = self
            .soft_basis
            .lookup_pairs(&soft_pairs)
            .expect("factor occupancy within cap");
        h * self.soft_basis.dim() + s
    }

    /// The reindexing isometry U as a sparse matrix (product_dim x dim),
    /// one unit entry per source state. U*U = 1 exactly.
    pub fn unitary(&self, basis: &FockBasis) -> CsrMatrix {
        let mut trips = Vec::with_capacity(basis.dim());
        for idx in 0..basis.dim() {
            let p = self.product_index(basis, idx);
            trips.push((p as u32, idx as u32, C64::new(1.0, 0.0)));
        }
        CsrMatrix::from_triplets(self.product_dim(), basis.dim(), trips)
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    let mut c = 1.0f64;
    for j in 1..=k.min(n - k) {
        c = c * (n - k.min(n - k) + j) as f64 / j as f64;
    }
    c
}

/// Two-factor lift of a partition (j0, jinf) of the one-particle space:
/// each boson is distributed between the factors with the corresponding
/// amplitude. Output maps F -> F (x) F with column index s, row index
/// left * dim + right.
pub fn breve_gamma(basis: &FockBasis, j0: &[f64], jinf: &[f64]) -> CsrMatrix {
    assert_eq!(j0.len(), basis.mode_count());
    assert_eq!(jinf.len(), basis.mode_count());
    let dim = basis.dim();
    let mut trips = Vec::new();
    let mut left: Vec<(u32, u8)> = Vec::new();
    let mut right: Vec<(u32, u8)> = Vec::new();
    for s in 0..dim {
        let occs = basis.occs(s).to_vec();
        // Enumerate all per-mode splittings a + b = n with binomial weights.
        let mut choice = vec![0u8; occs.len()];
        loop {
            left.clear();
            right.clear();
            let mut amp = 1.0f64;
            for (i, &(m, n)) in occs.iter().enumerate() {
                let a = choice[i];
                let b = n - a;
                amp *= binomial(n as u32, a as u32).sqrt()
                    * j0[m as usize].powi(a as i32)
                    * jinf[m as usize].powi(b as i32);
                if a > 0 {
                    left.push((m, a));
                }
                if b > 0 {
                    right.push((m, b));
                }
            }
            if amp != 0.0 {
                let li = basis.lookup_pairs(&left).expect("within cap");
                let ri = basis.lookup_pairs(&right).expect("within cap");
                trips.push((
                    (li * dim + ri) as u32,
                    s as u32,
                    C64::new(amp, 0.0),
                ));
            }
            // Advance the mixed-radix counter over splittings.
            let mut pos = 0usize;
            loop {
                if pos == occs.len() {
                    break;
                }
                if choice[pos] < occs[pos].1 {
                    choice[pos] += 1;
                    break;
                }
                choice[pos] = 0;
                pos += 1;
            }
            if pos == occs.len() {
                break;
            }
        }
    }
    CsrMatrix::from_triplets(dim * dim, dim, trips)
}

fn combined_amplitude(left: &[(u32, u8)], right: &[(u32, u8)]) -> (Vec<(u32, u8)>, f64) {
    // Merge two ascending pair lists; amplitude is the product of
    // sqrt(C(n+m, m)) over modes occupied in both.
    let mut out = Vec::with_capacity(left.len() + right.len());
    let mut amp = 1.0f64;
    let (mut i, mut j) = (0usize, 0usize);
    while i < left.len() || j < right.len() {
        if j == right.len() || (i < left.len() && left[i].0 < right[j].0) {
            out.push(left[i]);
            i += 1;
        } else if i == left.len() || right[j].0 < left[i].0 {
            out.push(right[j]);
            j += 1;
        } else {
            let (m, a) = left[i];
            let b = right[j].1;
            amp *= binomial((a + b) as u32, b as u32).sqrt();
            out.push((m, a + b));
            i += 1;
            j += 1;
        }
    }
    (out, amp)
}

/// Scattering identification applied to a product vector: the right factor's
/// bosons are created on top of the left factor. Components that would
/// exceed the cap are dropped; their norm is returned alongside the image.
pub fn identification_apply(
    basis: &FockBasis,
    phi: &[C64],
    psi: &[C64],
) -> (Vec<C64>, f64) {
    assert_eq!(phi.len(), basis.dim());
    assert_eq!(psi.len(), basis.dim());
    let mut out = vec![ZERO; basis.dim()];
    let mut dropped: HashMap<Vec<(u32, u8)>, C64> = HashMap::new();
    for (s, ps) in phi.iter().enumerate() {
        if *ps == ZERO {
            continue;
        }
        for (t, pt) in psi.iter().enumerate() {
            if *pt == ZERO {
                continue;
            }
            let (pairs, amp) = combined_amplitude(basis.occs(s), basis.occs(t));
            let coeff = ps * pt * C64::new(amp, 0.0);
            match basis.lookup_pairs(&pairs) {
                Some(target) => out[target] += coeff,
                None => *dropped.entry(pairs).or_insert(ZERO) += coeff,
            }
        }
    }
    let dropped_norm = dropped
        .values()
        .map(|z| z.norm_sqr())
        .sum::<f64>()
        .sqrt();
    (out, dropped_norm)
}

/// Dense-scale matrix of the identification map F (x) F -> F with column
/// index s * dim + t. Intended for small bases; refuses above 10^6 columns.
pub fn identification_matrix(basis: &FockBasis) -> Result<CsrMatrix> {
    let dim = basis.dim();
    let cols = dim.checked_mul(dim).filter(|&c| c <= 1_000_000);
    let Some(cols) = cols else {
        return Err(Error::refusal(
            "identification matrix requested above the supported size",
        ));
    };
    let mut trips = Vec::new();
    for s in 0..dim {
        for t in 0..dim {
            let (pairs, amp) = combined_amplitude(basis.occs(s), basis.occs(t));
            if let Some(target) = basis.lookup_pairs(&pairs) {
                trips.push((target as u32, (s * dim + t) as u32, C64::new(amp, 0.0)));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(dim, cols, trips))
}

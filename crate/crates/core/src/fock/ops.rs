//! Ladder operators and second quantization on the truncated basis.
//!
//! Truncation semantics: a creation amplitude that would leave the capped
//! space is dropped (the operator maps the top sector to zero there). All
//! identities that hold exactly do so on the guarded subspace with total
//! occupancy at most n_max - 1.

use crate::error::{Error, Result};
use crate::fock::FockBasis;
use crate::linalg::{C64, CsrMatrix, HermBuilder, HermOp, ZERO};

/// Matrix of a_mode: amplitude sqrt(n_mode), photon number drops by one.
pub fn annihilation(basis: &FockBasis, mode: usize) -> CsrMatrix {
    assert!(mode < basis.mode_count());
    let mut trips = Vec::new();
    for s in 0..basis.dim() {
        if let Some((t, n)) = basis.with_removed(s, mode) {
            trips.push((t as u32, s as u32, C64::new((n as f64).sqrt(), 0.0)));
        }
    }
    CsrMatrix::from_triplets(basis.dim(), basis.dim(), trips)
}

/// Matrix of a_mode^dagger, the exact adjoint of [`annihilation`].
pub fn creation(basis: &FockBasis, mode: usize) -> CsrMatrix {
    annihilation(basis, mode).adjoint()
}

/// Diagonal of dGamma(b) for a one-particle multiplication operator b.
pub fn second_quantize(basis: &FockBasis, b: &[f64]) -> Vec<f64> {
    assert_eq!(b.len(), basis.mode_count());
    (0..basis.dim())
        .map(|s| {
            basis
                .occs(s)
                .iter()
                .map(|&(m, c)| c as f64 * b[m as usize])
                .sum()
        })
        .collect()
}

/// Diagonal of the number operator dGamma(1).
pub fn number_diag(basis: &FockBasis) -> Vec<f64> {
    (0..basis.dim())
        .map(|s| basis.total_occupation(s) as f64)
        .collect()
}

/// Diagonal of Gamma(b) for diagonal one-particle b: product of b_m^{n_m}.
pub fn gamma_diag(basis: &FockBasis, b: &[f64]) -> Vec<f64> {
    assert_eq!(b.len(), basis.mode_count());
    (0..basis.dim())
        .map(|s| {
            basis
                .occs(s)
                .iter()
                .map(|&(m, c)| b[m as usize].powi(c as i32))
                .product()
        })
        .collect()
}

/// dGamma(b) for a general Hermitian one-particle operator given in the
/// [`HermOp`] container (the storage guarantees Hermiticity).
pub fn second_quantize_offdiag(basis: &FockBasis, b: &HermOp) -> Result<HermOp> {
    if b.dim != basis.mode_count() {
        return Err(Error::config(
            "fock.one_particle",
            "one-particle operator dimension must equal the mode count",
        ));
    }
    let mut out = HermBuilder::new(basis.dim());
    for s in 0..basis.dim() {
        for &(m, c) in basis.occs(s) {
            out.add_diag(s, c as f64 * b.diag[m as usize]);
        }
        // For each stored upper entry b_pq (p < q), the hop q -> p carries
        // amplitude b_pq sqrt(n_q (n_p + 1)); the reverse hop is the mirror.
        for ((p, q), v) in b.rows.iter().zip(&b.cols).zip(&b.vals) {
            let (p, q) = (*p as usize, *q as usize);
            if let Some((t, n_q, n_p1)) = basis.with_moved(s, q, p) {
                let amp = v * C64::new((n_q as f64 * n_p1 as f64).sqrt(), 0.0);
                out.add_offdiag(t, s, amp);
            }
        }
    }
    Ok(out.finish())
}

/// Field operator phi(h) = a(h) + a*(h) with a(h) = sum conj(h_m) a_m.
///
/// The coefficients are the already-smeared per-mode values (quadrature
/// weight square roots folded in by the caller).
pub fn field_operator(basis: &FockBasis, coeffs: &[C64]) -> HermOp {
    assert_eq!(coeffs.len(), basis.mode_count());
    let mut out = HermBuilder::new(basis.dim());
    for s in 0..basis.dim() {
        if basis.total_occupation(s) >= basis.n_max() {
            continue;
        }
        for (m, h) in coeffs.iter().enumerate() {
            if *h == ZERO {
                continue;
            }
            let (t, n1) = basis
                .with_added(s, m)
                .expect("guarded by the total check above");
            // <t| phi |s> = h_m sqrt(n_m + 1); t sits in the higher sector,
            // so the stored upper entry is the conjugate.
            out.add_offdiag(s, t, h.conj() * C64::new((n1 as f64).sqrt(), 0.0));
        }
    }
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dense_mul, dense_op_norm, dot, lapack, norm, LinOp, ONE};
    use crate::fock::dimension;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    /// Dense column-major copy of a CSR matrix restricted to square shape.
    fn dense(a: &CsrMatrix) -> Vec<C64> {
        a.to_dense()
    }

    /// Projector onto total occupancy <= n_max - 1, as a dense diagonal.
    fn guard(basis: &FockBasis) -> Vec<C64> {
        let n = basis.dim();
        let mut p = vec![ZERO; n * n];
        for i in 0..n {
            if basis.total_occupation(i) + 1 <= basis.n_max() {
                p[i + i * n] = ONE;
            }
        }
        p
    }

    fn max_abs(a: &[C64]) -> f64 {
        a.iter().fold(0.0f64, |m, v| m.max(v.norm()))
    }

    #[test]
    fn single_mode_ladder() {
        let b = FockBasis::build(1, 3).unwrap();
        let a = annihilation(&b, 0);
        // a |2> = sqrt(2) |1>
        let mut v = vec![ZERO; 4];
        v[2] = ONE;
        let w = a.apply_to(&v);
        assert!((w[1] - c(2f64.sqrt(), 0.0)).norm() < 1e-15);
        // a annihilates the vacuum.
        let mut vac = vec![ZERO; 4];
        vac[0] = ONE;
        assert!(norm(&a.apply_to(&vac)) == 0.0);
        // a^dagger on the top state truncates to zero.
        let ad = creation(&b, 0);
        let mut top = vec![ZERO; 4];
        top[3] = ONE;
        assert!(norm(&ad.apply_to(&top)) == 0.0);
    }

    #[test]
    fn ccr_exact_on_guarded_subspace() {
        let b = FockBasis::build(3, 2).unwrap();
        let n = b.dim();
        let p = guard(&b);
        for i in 0..3 {
            for j in 0..3 {
                let ai = dense(&annihilation(&b, i));
                let adj = dense(&creation(&b, j));
                let mut comm = dense_mul(&ai, &adj, n, n, n);
                let ba = dense_mul(&adj, &ai, n, n, n);
                for (x, y) in comm.iter_mut().zip(&ba) {
                    *x -= y;
                }
                if i == j {
                    for d in 0..n {
                        comm[d + d * n] -= ONE;
                    }
                }
                let g = dense_mul(&comm, &p, n, n, n);
                assert!(max_abs(&g) < 1e-14, "CCR failed for i={i}, j={j}");
                // [a_i, a_j] = 0 everywhere, no guard needed.
                let aj = dense(&annihilation(&b, j));
                let mut cc = dense_mul(&ai, &aj, n, n, n);
                let cc2 = dense_mul(&aj, &ai, n, n, n);
                for (x, y) in cc.iter_mut().zip(&cc2) {
                    *x -= y;
                }
                assert!(max_abs(&cc) == 0.0);
            }
        }
    }

    #[test]
    fn adjointness_is_exact() {
        let b = FockBasis::build(4, 2).unwrap();
        for m in 0..4 {
            let a = annihilation(&b, m);
            let ad = creation(&b, m);
            let d1 = dense(&a.adjoint());
            let d2 = dense(&ad);
            assert_eq!(d1, d2);
        }
    }

    #[test]
    fn diagonal_second_quantization() {
        let b = FockBasis::build(3, 3).unwrap();
        let idx = b.index_of_occupations(&[1, 0, 2]).unwrap();
        let n_op = number_diag(&b);
        assert_eq!(n_op[idx], 3.0);
        let dg = second_quantize(&b, &[0.5, 10.0, 2.0]);
        assert_eq!(dg[idx], 0.5 + 4.0);
        // Vacuum expectation of any dGamma vanishes.
        assert_eq!(dg[0], 0.0);
        // || dGamma(b) (N+1)^{-1} || <= max |b|.
        let bound = dg
            .iter()
            .zip(&n_op)
            .map(|(d, n)| (d / (n + 1.0)).abs())
            .fold(0.0f64, f64::max);
        assert!(bound <= 10.0 + 1e-15);
    }

    #[test]
    fn offdiag_reduces_to_diagonal() {
        let b = FockBasis::build(3, 2).unwrap();
        let bd = vec![0.3, -1.2, 2.5];
        let one = HermOp::diagonal(bd.clone());
        let dg = second_quantize_offdiag(&b, &one).unwrap();
        assert_eq!(dg.nnz_upper(), 0);
        assert_eq!(dg.diag, second_quantize(&b, &bd));
    }

    #[test]
    fn offdiag_identity_gives_number() {
        let b = FockBasis::build(3, 2).unwrap();
        let eye = HermOp::diagonal(vec![1.0; 3]);
        let n_op = second_quantize_offdiag(&b, &eye).unwrap();
        assert_eq!(n_op.diag, number_diag(&b));
    }

    #[test]
    fn sector_preservation() {
        let b = FockBasis::build(3, 3).unwrap();
        let mut one = HermBuilder::new(3);
        one.add_diag(0, 0.7);
        one.add_offdiag(0, 2, c(0.2, 0.4));
        one.add_offdiag(1, 2, c(-0.1, 0.0));
        let dg = second_quantize_offdiag(&b, &one.finish()).unwrap();
        for ((r, cl), _) in dg.rows.iter().zip(&dg.cols).zip(&dg.vals) {
            assert_eq!(
                b.total_occupation(*r as usize),
                b.total_occupation(*cl as usize)
            );
        }
    }

    #[test]
    fn dgamma_commutes_with_creation_as_one_particle_action() {
        // [dGamma(b), a*(h)] = a*(b h) on the guarded subspace.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let basis = FockBasis::build(3, 3).unwrap();
        let n = basis.dim();
        let mut one = HermBuilder::new(3);
        for i in 0..3 {
            one.add_diag(i, rng.gen_range(-1.0..1.0));
        }
        for (i, j) in [(0usize, 1usize), (0, 2), (1, 2)] {
            one.add_offdiag(i, j, c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        }
        let b1 = one.finish();
        let h: Vec<C64> = (0..3)
            .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        // b h at the one-particle level (dense small apply).
        let bh = b1.apply_vec(&h);

        let dg = second_quantize_offdiag(&basis, &b1).unwrap();
        let a_star_h = {
            let mut acc = CsrMatrix::zero(n, n);
            for m in 0..3 {
                let cr = creation(&basis, m);
                let mut trips = Vec::new();
                for r in 0..n {
                    for t in acc.row_ptr[r]..acc.row_ptr[r + 1] {
                        trips.push((r as u32, acc.col_idx[t], acc.values[t]));
                    }
                    for t in cr.row_ptr[r]..cr.row_ptr[r + 1] {
                        trips.push((r as u32, cr.col_idx[t], h[m] * cr.values[t]));
                    }
                }
                acc = CsrMatrix::from_triplets(n, n, trips);
            }
            acc
        };
        let a_star_bh = {
            let mut trips = Vec::new();
            for m in 0..3 {
                let cr = creation(&basis, m);
                for r in 0..n {
                    for t in cr.row_ptr[r]..cr.row_ptr[r + 1] {
                        trips.push((r as u32, cr.col_idx[t], bh[m] * cr.values[t]));
                    }
                }
            }
            CsrMatrix::from_triplets(n, n, trips)
        };

        let dd = dg.to_dense();
        let da = dense(&a_star_h);
        let mut comm = dense_mul(&dd, &da, n, n, n);
        let ad = dense_mul(&da, &dd, n, n, n);
        for (x, y) in comm.iter_mut().zip(&ad) {
            *x -= y;
        }
        let mut expect = dense(&a_star_bh);
        for (x, y) in comm.iter_mut().zip(expect.iter_mut()) {
            *x -= *y;
        }
        let p = guard(&basis);
        let resid = dense_mul(&comm, &p, n, n, n);
        assert!(max_abs(&resid) < 1e-12);
    }

    #[test]
    fn field_operator_vacuum_norm_and_sector() {
        let b = FockBasis::build(3, 2).unwrap();
        let h = vec![c(0.3, 0.1), c(-0.2, 0.0), c(0.05, -0.4)];
        let phi = field_operator(&b, &h);
        let mut vac = vec![ZERO; b.dim()];
        vac[0] = ONE;
        let out = phi.apply_vec(&vac);
        let expect: f64 = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!((norm(&out) - expect).abs() < 1e-14);
        // phi Omega lives entirely in the one-photon sector.
        let n_op = number_diag(&b);
        let weighted: f64 = out
            .iter()
            .enumerate()
            .map(|(i, z)| n_op[i] * z.norm_sqr())
            .sum();
        assert!((weighted - expect * expect).abs() < 1e-14);
    }

    #[test]
    fn ladder_relative_bounds() {
        // || a(h) (N+1)^{-1/2} || <= ||h|| and same for the creation part.
        let b = FockBasis::build(3, 3).unwrap();
        let n = b.dim();
        let h = vec![c(0.4, -0.3), c(0.0, 0.9), c(-0.7, 0.2)];
        let hnorm = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let n_op = number_diag(&b);
        let mut scale = vec![ZERO; n * n];
        for i in 0..n {
            scale[i + i * n] = c(1.0 / (n_op[i] + 1.0).sqrt(), 0.0);
        }
        for creation_part in [false, true] {
            let mut op = vec![ZERO; n * n];
            for m in 0..3 {
                let l = if creation_part {
                    dense(&creation(&b, m))
                } else {
                    dense(&annihilation(&b, m))
                };
                let coefft = if creation_part { h[m] } else { h[m].conj() };
                for (o, v) in op.iter_mut().zip(&l) {
                    *o += coefft * v;
                }
            }
            let prod = dense_mul(&op, &scale, n, n, n);
            let nrm = dense_op_norm(&prod, n, n).unwrap();
            assert!(nrm <= hnorm * (1.0 + 1e-12), "part={creation_part}");
        }
    }

    #[test]
    fn field_operator_form_bound() {
        // +-phi(h) <= alpha dGamma(w) + (1/alpha) sum |h|^2 / w as forms.
        let b = FockBasis::build(4, 3).unwrap();
        let n = b.dim();
        let w = [0.5, 1.0, 1.5, 2.0];
        let h = vec![c(0.3, 0.2), c(-0.1, 0.4), c(0.2, 0.0), c(0.0, -0.3)];
        let phi = field_operator(&b, &h);
        let dg = second_quantize(&b, &w);
        let cbound: f64 = h
            .iter()
            .zip(&w)
            .map(|(z, w)| z.norm_sqr() / w)
            .sum();
        for alpha in [0.5, 1.0, 2.0] {
            for sign in [-1.0, 1.0] {
                let mut mtx = phi.to_dense();
                for v in mtx.iter_mut() {
                    *v *= c(sign, 0.0);
                }
                for i in 0..n {
                    mtx[i + i * n] += c(alpha * dg[i] + cbound / alpha, 0.0);
                }
                let evs = lapack::heev_full(&mut mtx, n).unwrap();
                assert!(evs[0] >= -1e-10, "alpha={alpha} sign={sign}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn dimension_formula_matches_enumeration(m in 1usize..6, n_max in 0usize..4) {
            let b = FockBasis::build(m, n_max).unwrap();
            prop_assert_eq!(b.dim() as u128, dimension(m, n_max));
            // Sector sizes are binomials; totals are consistent.
            for n in 0..=n_max {
                for idx in b.sector_range(n) {
                    prop_assert_eq!(b.total_occupation(idx), n);
                }
            }
        }

        #[test]
        fn ccr_random_pair(m in 1usize..6, n_max in 1usize..4, seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let basis = FockBasis::build(m, n_max).unwrap();
            let i = rng.gen_range(0..m);
            let j = rng.gen_range(0..m);
            let n = basis.dim();
            // Apply [a_i, a_j^dagger] to a random guarded vector.
            let mut v = vec![ZERO; n];
            for (idx, z) in v.iter_mut().enumerate() {
                if basis.total_occupation(idx) + 1 <= n_max {
                    *z = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                }
            }
            let ai = annihilation(&basis, i);
            let adj = creation(&basis, j);
            let lhs = ai.apply_to(&adj.apply_to(&v));
            let rhs = adj.apply_to(&ai.apply_to(&v));
            let mut diff: Vec<C64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            if i == j {
                for (d, z) in diff.iter_mut().zip(&v) {
                    *d -= z;
                }
            }
            prop_assert!(norm(&diff) < 1e-12 * (1.0 + norm(&v)));
        }

        #[test]
        fn number_commutes_with_dgamma(seed in 0u64..200) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let basis = FockBasis::build(4, 2).unwrap();
            let mut one = HermBuilder::new(4);
            for i in 0..4 {
                one.add_diag(i, rng.gen_range(-1.0..1.0));
            }
            one.add_offdiag(0, 3, c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            one.add_offdiag(1, 2, c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let dg = second_quantize_offdiag(&basis, &one.finish()).unwrap();
            let n_op = number_diag(&basis);
            let v: Vec<C64> = (0..basis.dim())
                .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            // N dGamma(b) v == dGamma(b) N v since dGamma preserves sectors.
            let dv = dg.apply_vec(&v);
            let lhs: Vec<C64> = dv.iter().enumerate().map(|(i, z)| c(n_op[i], 0.0) * z).collect();
            let nv: Vec<C64> = v.iter().enumerate().map(|(i, z)| c(n_op[i], 0.0) * z).collect();
            let rhs = dg.apply_vec(&nv);
            let diff: Vec<C64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            prop_assert!(norm(&diff) < 1e-12 * (1.0 + norm(&v)));
        }
    }

    #[test]
    fn dot_is_sesquilinear_sanity() {
        let x = vec![c(1.0, 2.0)];
        let y = vec![c(0.5, -0.5)];
        let d = dot(&x, &y);
        assert!((d - c(1.0, 2.0).conj() * c(0.5, -0.5)).norm() < A_TOL);
    }

    const A_TOL: f64 = 1e-15;
}

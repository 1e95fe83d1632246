//! Sparse matrix containers used by every assembly stage.
//!
//! `HermOp` stores a Hermitian matrix as a real diagonal plus the strict
//! upper triangle; Hermitian symmetry is a storage invariant, not a runtime
//! check. `CsrMatrix` is a general rectangular complex matrix in compressed
//! row form, used for non-Hermitian maps (ladder operators, isometries).

use crate::linalg::C64;

/// Minimal operator interface for iterative solvers.
pub trait LinOp {
    fn dim(&self) -> usize;
    /// y = A x. `y` is overwritten.
    fn apply(&self, x: &[C64], y: &mut [C64]);

    fn apply_vec(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); self.dim()];
        self.apply(x, &mut y);
        y
    }
}

/// Hermitian sparse matrix: real diagonal + strict upper triangle.
#[derive(Debug, Clone)]
pub struct HermOp {
    pub dim: usize,
    pub diag: Vec<f64>,
    pub rows: Vec<u32>,
    pub cols: Vec<u32>,
    pub vals: Vec<C64>,
}

impl HermOp {
    pub fn diagonal(diag: Vec<f64>) -> Self {
        HermOp {
            dim: diag.len(),
            diag,
            rows: Vec::new(),
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::diagonal(vec![0.0; dim])
    }

    pub fn nnz_upper(&self) -> usize {
        self.vals.len()
    }

    /// Entry count of the full matrix rebuilt from the stored triangle.
    pub fn nnz_full(&self) -> usize {
        self.dim + 2 * self.vals.len()
    }

    pub fn max_abs_entry(&self) -> f64 {
        let d = self.diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.vals.iter().fold(d, |m, v| m.max(v.norm()))
    }

    /// One-norm (max absolute column sum), exact.
    pub fn one_norm(&self) -> f64 {
        let mut col = vec![0.0f64; self.dim];
        for (i, d) in self.diag.iter().enumerate() {
            col[i] += d.abs();
        }
        for ((r, c), v) in self.rows.iter().zip(&self.cols).zip(&self.vals) {
            let a = v.norm();
            col[*r as usize] += a;
            col[*c as usize] += a;
        }
        col.into_iter().fold(0.0, f64::max)
    }

    /// In-place axpy on the stored triangles: self += s * other.
    pub fn add_scaled(&mut self, s: f64, other: &HermOp) {
        assert_eq!(self.dim, other.dim);
        for (d, o) in self.diag.iter_mut().zip(&other.diag) {
            *d += s * o;
        }
        let mut trips: Vec<(u32, u32, C64)> = self
            .rows
            .iter()
            .zip(&self.cols)
            .zip(&self.vals)
            .map(|((r, c), v)| (*r, *c, *v))
            .collect();
        trips.extend(
            other
                .rows
                .iter()
                .zip(&other.cols)
                .zip(&other.vals)
                .map(|((r, c), v)| (*r, *c, s * *v)),
        );
        let merged = merge_upper(trips);
        self.rows = merged.0;
        self.cols = merged.1;
        self.vals = merged.2;
    }

    pub fn scale(&mut self, s: f64) {
        for d in &mut self.diag {
            *d *= s;
        }
        for v in &mut self.vals {
            *v *= s;
        }
    }

    /// Column-major dense copy, both triangles filled.
    pub fn to_dense(&self) -> Vec<C64> {
        let n = self.dim;
        let mut a = vec![C64::new(0.0, 0.0); n * n];
        for i in 0..n {
            a[i + i * n] = C64::new(self.diag[i], 0.0);
        }
        for ((r, c), v) in self.rows.iter().zip(&self.cols).zip(&self.vals) {
            let (r, c) = (*r as usize, *c as usize);
            a[r + c * n] = *v;
            a[c + r * n] = v.conj();
        }
        a
    }

    /// Full CSR copy for faster repeated matvecs.
    pub fn to_csr(&self) -> CsrMatrix {
        let n = self.dim;
        let mut trips = Vec::with_capacity(self.nnz_full());
        for i in 0..n {
            if self.diag[i] != 0.0 {
                trips.push((i as u32, i as u32, C64::new(self.diag[i], 0.0)));
            }
        }
        for ((r, c), v) in self.rows.iter().zip(&self.cols).zip(&self.vals) {
            trips.push((*r, *c, *v));
            trips.push((*c, *r, v.conj()));
        }
        CsrMatrix::from_triplets(n, n, trips)
    }

    pub fn expectation(&self, x: &[C64]) -> f64 {
        let y = self.apply_vec(x);
        crate::linalg::dot(x, &y).re
    }
}

impl LinOp for HermOp {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        for i in 0..self.dim {
            y[i] = C64::new(self.diag[i], 0.0) * x[i];
        }
        for ((r, c), v) in self.rows.iter().zip(&self.cols).zip(&self.vals) {
            let (r, c) = (*r as usize, *c as usize);
            y[r] += v * x[c];
            y[c] += v.conj() * x[r];
        }
    }
}

/// Accumulates Hermitian triplets; canonicalizes lower entries to the upper
/// triangle and merges duplicates on finish.
pub struct HermBuilder {
    dim: usize,
    diag: Vec<f64>,
    trips: Vec<(u32, u32, C64)>,
}

impl HermBuilder {
    pub fn new(dim: usize) -> Self {
        HermBuilder {
            dim,
            diag: vec![0.0; dim],
            trips: Vec::new(),
        }
    }

    pub fn add_diag(&mut self, i: usize, v: f64) {
        self.diag[i] += v;
    }

    /// Adds A[r,c] += v with r != c; the mirrored entry is implied.
    pub fn add_offdiag(&mut self, r: usize, c: usize, v: C64) {
        debug_assert_ne!(r, c);
        if v == C64::new(0.0, 0.0) {
            return;
        }
        if r < c {
            self.trips.push((r as u32, c as u32, v));
        } else {
            self.trips.push((c as u32, r as u32, v.conj()));
        }
    }

    pub fn finish(self) -> HermOp {
        let (rows, cols, vals) = merge_upper(self.trips);
        HermOp {
            dim: self.dim,
            diag: self.diag,
            rows,
            cols,
            vals,
        }
    }
}

fn merge_upper(mut trips: Vec<(u32, u32, C64)>) -> (Vec<u32>, Vec<u32>, Vec<C64>) {
    trips.sort_unstable_by_key(|t| (t.0, t.1));
    let mut rows = Vec::with_capacity(trips.len());
    let mut cols = Vec::with_capacity(trips.len());
    let mut vals: Vec<C64> = Vec::with_capacity(trips.len());
    for (r, c, v) in trips {
        if let (Some(&lr), Some(&lc)) = (rows.last(), cols.last()) {
            if lr == r && lc == c {
                *vals.last_mut().expect("parallel arrays") += v;
                continue;
            }
        }
        rows.push(r);
        cols.push(c);
        vals.push(v);
    }
    // Drop exact zeros produced by cancellation.
    let keep: Vec<bool> = vals.iter().map(|v| *v != C64::new(0.0, 0.0)).collect();
    let filter = |src: Vec<u32>| -> Vec<u32> {
        src.into_iter()
            .zip(&keep)
            .filter_map(|(x, k)| k.then_some(x))
            .collect()
    };
    let rows = filter(rows);
    let cols = filter(cols);
    let vals = vals
        .into_iter()
        .zip(&keep)
        .filter_map(|(x, k)| k.then_some(x))
        .collect();
    (rows, cols, vals)
}

/// General rectangular complex sparse matrix, compressed row storage.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<C64>,
}

impl CsrMatrix {
    pub fn from_triplets(nrows: usize, ncols: usize, mut trips: Vec<(u32, u32, C64)>) -> Self {
        trips.sort_unstable_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx: Vec<u32> = Vec::with_capacity(trips.len());
        let mut values: Vec<C64> = Vec::with_capacity(trips.len());
        let mut last: Option<(u32, u32)> = None;
        for (r, c, v) in trips {
            debug_assert!((r as usize) < nrows && (c as usize) < ncols);
            if last == Some((r, c)) {
                *values.last_mut().expect("parallel arrays") += v;
                continue;
            }
            col_idx.push(c);
            values.push(v);
            row_ptr[r as usize + 1] = col_idx.len();
            last = Some((r, c));
        }
        // Rows without entries inherit the previous boundary.
        for r in 1..=nrows {
            if row_ptr[r] < row_ptr[r - 1] {
                row_ptr[r] = row_ptr[r - 1];
            }
        }
        CsrMatrix {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn zero(nrows: usize, ncols: usize) -> Self {
        CsrMatrix {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// y = A x with x of length ncols; y of length nrows.
    pub fn apply_into(&self, x: &[C64], y: &mut [C64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for r in 0..self.nrows {
            let mut acc = C64::new(0.0, 0.0);
            for t in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[t] * x[self.col_idx[t] as usize];
            }
            y[r] = acc;
        }
    }

    pub fn apply_to(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); self.nrows];
        self.apply_into(x, &mut y);
        y
    }

    /// y = A* x (conjugate transpose apply); x length nrows, y length ncols.
    pub fn adjoint_apply(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); self.ncols];
        for r in 0..self.nrows {
            let xr = x[r];
            if xr == C64::new(0.0, 0.0) {
                continue;
            }
            for t in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[t] as usize] += self.values[t].conj() * xr;
            }
        }
        y
    }

    /// Materialized conjugate transpose.
    pub fn adjoint(&self) -> CsrMatrix {
        let mut trips = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            for t in self.row_ptr[r]..self.row_ptr[r + 1] {
                trips.push((self.col_idx[t], r as u32, self.values[t].conj()));
            }
        }
        CsrMatrix::from_triplets(self.ncols, self.nrows, trips)
    }

    /// Column-major dense copy.
    pub fn to_dense(&self) -> Vec<C64> {
        let mut a = vec![C64::new(0.0, 0.0); self.nrows * self.ncols];
        for r in 0..self.nrows {
            for t in self.row_ptr[r]..self.row_ptr[r + 1] {
                a[r + self.col_idx[t] as usize * self.nrows] = self.values[t];
            }
        }
        a
    }

    pub fn frobenius(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }
}

impl LinOp for CsrMatrix {
    fn dim(&self) -> usize {
        debug_assert_eq!(self.nrows, self.ncols);
        self.nrows
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.apply_into(x, y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, norm};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn herm_builder_canonicalizes_and_merges() {
        let mut b = HermBuilder::new(3);
        b.add_diag(0, 2.0);
        b.add_offdiag(0, 1, c(1.0, 1.0));
        b.add_offdiag(1, 0, c(1.0, -1.0)); // mirror of the same entry
        b.add_offdiag(2, 1, c(0.5, 0.0));
        let h = b.finish();
        assert_eq!(h.nnz_upper(), 2);
        let d = h.to_dense();
        // Column-major: entry (row, col) sits at row + col * n.
        assert_eq!(d[3], c(2.0, 2.0));
        assert_eq!(d[1], c(2.0, -2.0));
        assert_eq!(d[7], c(0.5, 0.0));
    }

    #[test]
    fn herm_apply_matches_dense() {
        let mut b = HermBuilder::new(4);
        for i in 0..4 {
            b.add_diag(i, i as f64 - 1.5);
        }
        b.add_offdiag(0, 2, c(0.3, -0.7));
        b.add_offdiag(1, 3, c(-1.1, 0.2));
        b.add_offdiag(0, 1, c(0.0, 1.0));
        let h = b.finish();
        let x: Vec<C64> = (0..4).map(|i| c(i as f64, 1.0 - i as f64)).collect();
        let y = h.apply_vec(&x);
        let d = h.to_dense();
        for r in 0..4 {
            let mut acc = c(0.0, 0.0);
            for col in 0..4 {
                acc += d[r + col * 4] * x[col];
            }
            assert!((acc - y[r]).norm() < 1e-14);
        }
        // Hermitian expectation is real.
        let e = dot(&x, &y);
        assert!(e.im.abs() < 1e-13);
    }

    #[test]
    fn csr_adjoint_identity() {
        let trips = vec![
            (0u32, 1u32, c(1.0, 2.0)),
            (2, 0, c(-0.5, 0.3)),
            (1, 1, c(0.0, -1.0)),
        ];
        let a = CsrMatrix::from_triplets(3, 2, trips);
        let x = vec![c(0.2, -0.1), c(1.0, 0.5)];
        let y = vec![c(-1.0, 0.0), c(0.3, 0.3), c(0.0, 2.0)];
        // <y, A x> == <A* y, x>
        let lhs = dot(&y, &a.apply_to(&x));
        let rhs = dot(&a.adjoint_apply(&y), &x);
        assert!((lhs - rhs).norm() < 1e-14);
        let adj = a.adjoint();
        assert_eq!(adj.nrows, 2);
        let z = adj.apply_to(&y);
        let z2 = a.adjoint_apply(&y);
        assert!(norm(&z) > 0.0);
        for (u, v) in z.iter().zip(&z2) {
            assert!((u - v).norm() < 1e-14);
        }
    }

    #[test]
    fn csr_duplicate_triplets_sum() {
        let trips = vec![(0u32, 0u32, c(1.0, 0.0)), (0, 0, c(2.0, 1.0))];
        let a = CsrMatrix::from_triplets(1, 1, trips);
        assert_eq!(a.nnz(), 1);
        assert_eq!(a.values[0], c(3.0, 1.0));
    }

    #[test]
    fn herm_to_csr_same_action() {
        let mut b = HermBuilder::new(5);
        for i in 0..5 {
            b.add_diag(i, (i * i) as f64 * 0.1);
        }
        b.add_offdiag(0, 4, c(1.0, -1.0));
        b.add_offdiag(2, 3, c(0.4, 0.9));
        let h = b.finish();
        let csr = h.to_csr();
        let x: Vec<C64> = (0..5).map(|i| c((i as f64).sin(), (i as f64).cos())).collect();
        let y1 = h.apply_vec(&x);
        let y2 = csr.apply_to(&x);
        for (u, v) in y1.iter().zip(&y2) {
            assert!((u - v).norm() < 1e-14);
        }
    }
}

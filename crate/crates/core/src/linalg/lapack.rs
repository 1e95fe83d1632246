//! Thin FFI bindings to the system LAPACK (shipped inside libopenblas).
//!
//! Only the drivers this crate actually uses are bound: zheev (full
//! Hermitian eigendecomposition), zheevr (windowed / indexed subsets),
//! dstevr (real symmetric tridiagonal), dsyev (small real symmetric) and
//! zgesv (general complex solve). All wrappers do the standard two-phase
//! workspace query and return a typed error on nonzero `info`.
//!
//! Matrices cross the boundary as column-major slices, length n*n.

use crate::error::{Error, Result};
use crate::linalg::C64;
use std::os::raw::c_char;

extern "C" {
    fn zheev_(
        jobz: *const c_char,
        uplo: *const c_char,
        n: *const i32,
        a: *mut C64,
        lda: *const i32,
        w: *mut f64,
        work: *mut C64,
        lwork: *const i32,
        rwork: *mut f64,
        info: *mut i32,
    );

    fn zheevr_(
        jobz: *const c_char,
        range: *const c_char,
        uplo: *const c_char,
        n: *const i32,
        a: *mut C64,
        lda: *const i32,
        vl: *const f64,
        vu: *const f64,
        il: *const i32,
        iu: *const i32,
        abstol: *const f64,
        m: *mut i32,
        w: *mut f64,
        z: *mut C64,
        ldz: *const i32,
        isuppz: *mut i32,
        work: *mut C64,
        lwork: *const i32,
        rwork: *mut f64,
        lrwork: *const i32,
        iwork: *mut i32,
        liwork: *const i32,
        info: *mut i32,
    );

    fn dstevr_(
        jobz: *const c_char,
        range: *const c_char,
        n: *const i32,
        d: *mut f64,
        e: *mut f64,
        vl: *const f64,
        vu: *const f64,
        il: *const i32,
        iu: *const i32,
        abstol: *const f64,
        m: *mut i32,
        w: *mut f64,
        z: *mut f64,
        ldz: *const i32,
        isuppz: *mut i32,
        work: *mut f64,
        lwork: *const i32,
        iwork: *mut i32,
        liwork: *const i32,
        info: *mut i32,
    );

    fn dsyev_(
        jobz: *const c_char,
        uplo: *const c_char,
        n: *const i32,
        a: *mut f64,
        lda: *const i32,
        w: *mut f64,
        work: *mut f64,
        lwork: *const i32,
        info: *mut i32,
    );

    fn zgesv_(
        n: *const i32,
        nrhs: *const i32,
        a: *mut C64,
        lda: *const i32,
        ipiv: *mut i32,
        b: *mut C64,
        ldb: *const i32,
        info: *mut i32,
    );
}

fn check(routine: &'static str, info: i32) -> Result<()> {
    if info == 0 {
        Ok(())
    } else {
        Err(Error::Lapack { routine, info })
    }
}

const JOB_V: *const c_char = b"V\0".as_ptr() as *const c_char;
const UPLO_L: *const c_char = b"L\0".as_ptr() as *const c_char;

/// Full eigendecomposition of a Hermitian matrix (column-major, n*n).
/// Returns ascending eigenvalues; `a` is overwritten with the eigenvectors
/// (column j is the eigenvector of eigenvalue j).
pub fn heev_full(a: &mut [C64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return Ok(Vec::new());
    }
    let nn = n as i32;
    let mut w = vec![0.0f64; n];
    let mut rwork = vec![0.0f64; (3 * n).max(1)];
    let mut info = 0i32;
    // workspace query
    let mut wkopt = C64::new(0.0, 0.0);
    let query = -1i32;
    unsafe {
        zheev_(JOB_V, UPLO_L, &nn, a.as_mut_ptr(), &nn, w.as_mut_ptr(), &mut wkopt, &query, rwork.as_mut_ptr(), &mut info);
    }
    check("zheev", info)?;
    let lwork = wkopt.re as i32;
    let mut work = vec![C64::new(0.0, 0.0); lwork.max(1) as usize];
    unsafe {
        zheev_(JOB_V, UPLO_L, &nn, a.as_mut_ptr(), &nn, w.as_mut_ptr(), work.as_mut_ptr(), &lwork, rwork.as_mut_ptr(), &mut info);
    }
    check("zheev", info)?;
    Ok(w)
}

/// Subset selection for [`heevr`].
pub enum EigRange {
    /// Eigenvalues with 1-based indices il..=iu (ascending order).
    Index(usize, usize),
    /// Eigenvalues in the half-open interval (vl, vu].
    Value(f64, f64),
}

/// Windowed Hermitian eigendecomposition via the RRR driver.
/// `a` (column-major, destroyed) is the matrix; returns (eigenvalues,
/// eigenvectors flattened column-major n x found).
pub fn heevr(a: &mut [C64], n: usize, range: &EigRange) -> Result<(Vec<f64>, Vec<C64>)> {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let nn = n as i32;
    let (range_c, vl, vu, il, iu) = match *range {
        EigRange::Index(il, iu) => {
            assert!(il >= 1 && il <= iu && iu <= n, "bad index range {il}..={iu} for n={n}");
            (b"I\0".as_ptr() as *const c_char, 0.0, 0.0, il as i32, iu as i32)
        }
        EigRange::Value(vl, vu) => {
            assert!(vl < vu, "empty value range");
            (b"V\0".as_ptr() as *const c_char, vl, vu, 1, 1)
        }
    };
    let nev_max = match *range {
        EigRange::Index(il, iu) => iu - il + 1,
        EigRange::Value(..) => n,
    };
    let abstol = 0.0f64; // default: eps * |T| via the driver
    let mut m = 0i32;
    let mut w = vec![0.0f64; n];
    let mut z = vec![C64::new(0.0, 0.0); n * nev_max];
    let mut isuppz = vec![0i32; 2 * n.max(1)];
    let mut info = 0i32;

    // workspace query
    let (mut wkopt, mut rwkopt, mut iwkopt) = (C64::new(0.0, 0.0), 0.0f64, 0i32);
    let query = -1i32;
    unsafe {
        zheevr_(
            JOB_V, range_c, UPLO_L, &nn, a.as_mut_ptr(), &nn, &vl, &vu, &il, &iu, &abstol, &mut m,
            w.as_mut_ptr(), z.as_mut_ptr(), &nn, isuppz.as_mut_ptr(),
            &mut wkopt, &query, &mut rwkopt, &query, &mut iwkopt, &query, &mut info,
        );
    }
    check("zheevr", info)?;
    let lwork = wkopt.re as i32;
    let lrwork = rwkopt as i32;
    let liwork = iwkopt;
    let mut work = vec![C64::new(0.0, 0.0); lwork.max(1) as usize];
    let mut rwork = vec![0.0f64; lrwork.max(1) as usize];
    let mut iwork = vec![0i32; liwork.max(1) as usize];
    unsafe {
        zheevr_(
            JOB_V, range_c, UPLO_L, &nn, a.as_mut_ptr(), &nn, &vl, &vu, &il, &iu, &abstol, &mut m,
            w.as_mut_ptr(), z.as_mut_ptr(), &nn, isuppz.as_mut_ptr(),
            work.as_mut_ptr(), &lwork, rwork.as_mut_ptr(), &lrwork, iwork.as_mut_ptr(), &liwork, &mut info,
        );
    }
    check("zheevr", info)?;
    let found = m as usize;
    w.truncate(found);
    z.truncate(n * found);
    Ok((w, z))
}

/// Eigendecomposition of a real symmetric tridiagonal matrix.
/// `diag` has length n, `offdiag` length n-1. Returns (values, vectors
/// column-major n x found).
pub fn stevr(diag: &[f64], offdiag: &[f64], range: &EigRange) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = diag.len();
    assert_eq!(offdiag.len(), n.saturating_sub(1));
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let nn = n as i32;
    let mut d = diag.to_vec();
    // dstevr wants e of length n (last entry unused)
    let mut e = {
        let mut e = offdiag.to_vec();
        e.push(0.0);
        e
    };
    let (range_c, vl, vu, il, iu) = match *range {
        EigRange::Index(il, iu) => {
            assert!(il >= 1 && il <= iu && iu <= n);
            (b"I\0".as_ptr() as *const c_char, 0.0, 0.0, il as i32, iu as i32)
        }
        EigRange::Value(vl, vu) => {
            assert!(vl < vu);
            (b"V\0".as_ptr() as *const c_char, vl, vu, 1, 1)
        }
    };
    let nev_max = match *range {
        EigRange::Index(il, iu) => iu - il + 1,
        EigRange::Value(..) => n,
    };
    let abstol = 0.0f64;
    let mut m = 0i32;
    let mut w = vec![0.0f64; n];
    let mut z = vec![0.0f64; n * nev_max];
    let mut isuppz = vec![0i32; 2 * n];
    let mut info = 0i32;

    let (mut wkopt, mut iwkopt) = (0.0f64, 0i32);
    let query = -1i32;
    unsafe {
        dstevr_(
            JOB_V, range_c, &nn, d.as_mut_ptr(), e.as_mut_ptr(), &vl, &vu, &il, &iu, &abstol, &mut m,
            w.as_mut_ptr(), z.as_mut_ptr(), &nn, isuppz.as_mut_ptr(),
            &mut wkopt, &query, &mut iwkopt, &query, &mut info,
        );
    }
    check("dstevr", info)?;
    let lwork = wkopt as i32;
    let liwork = iwkopt;
    let mut work = vec![0.0f64; lwork.max(1) as usize];
    let mut iwork = vec![0i32; liwork.max(1) as usize];
    unsafe {
        dstevr_(
            JOB_V, range_c, &nn, d.as_mut_ptr(), e.as_mut_ptr(), &vl, &vu, &il, &iu, &abstol, &mut m,
            w.as_mut_ptr(), z.as_mut_ptr(), &nn, isuppz.as_mut_ptr(),
            work.as_mut_ptr(), &lwork, iwork.as_mut_ptr(), &liwork, &mut info,
        );
    }
    check("dstevr", info)?;
    let found = m as usize;
    w.truncate(found);
    z.truncate(n * found);
    Ok((w, z))
}

/// Full eigendecomposition of a small real symmetric matrix
/// (column-major, overwritten with eigenvectors). Ascending eigenvalues.
pub fn syev_full(a: &mut [f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    if n == 0 {
        return Ok(Vec::new());
    }
    let nn = n as i32;
    let mut w = vec![0.0f64; n];
    let mut info = 0i32;
    let mut wkopt = 0.0f64;
    let query = -1i32;
    unsafe {
        dsyev_(JOB_V, UPLO_L, &nn, a.as_mut_ptr(), &nn, w.as_mut_ptr(), &mut wkopt, &query, &mut info);
    }
    check("dsyev", info)?;
    let lwork = wkopt as i32;
    let mut work = vec![0.0f64; lwork.max(1) as usize];
    unsafe {
        dsyev_(JOB_V, UPLO_L, &nn, a.as_mut_ptr(), &nn, w.as_mut_ptr(), work.as_mut_ptr(), &lwork, &mut info);
    }
    check("dsyev", info)?;
    Ok(w)
}

/// Solve A X = B for general complex A (column-major, destroyed).
/// `b` holds nrhs right-hand sides column-major and is overwritten with X.
pub fn gesv(a: &mut [C64], b: &mut [C64], n: usize, nrhs: usize) -> Result<()> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n * nrhs);
    if n == 0 {
        return Ok(());
    }
    let nn = n as i32;
    let nr = nrhs as i32;
    let mut ipiv = vec![0i32; n];
    let mut info = 0i32;
    unsafe {
        zgesv_(&nn, &nr, a.as_mut_ptr(), &nn, ipiv.as_mut_ptr(), b.as_mut_ptr(), &nn, &mut info);
    }
    check("zgesv", info)
}

//! Real spherical harmonics, their triple-product coefficients, and
//! spherical Bessel functions.
//!
//! Harmonics are evaluated from Cartesian components of a unit vector, so
//! they are polynomial everywhere including the poles. The convention pairs
//! negative orders with sine azimuthals and positive with cosine, all
//! orthonormal on the sphere.
//!
//! Triple products `∫ Y_a Y_mid Y_b dΩ` for outer degrees up to 3 and middle
//! degrees up to 6 are tabulated once by a product quadrature whose degree
//! exceeds every integrand degree, so the table is exact to rounding. These
//! two ingredients turn plane-wave matrix elements between orbitals into
//! finite sums over Bessel-weighted radial integrals.

use std::sync::OnceLock;

use crate::grid::gauss_legendre;

/// Largest outer harmonic degree in the triple-product table.
pub const TABLE_OUTER_L: u32 = 3;
/// Largest middle harmonic degree in the triple-product table; equals twice
/// the outer bound because products of two outer harmonics live there.
pub const TABLE_MID_L: u32 = 6;

/// Flat index of a real harmonic: degrees first, orders `-l..=l` within.
#[inline]
pub fn harmonic_index(l: u32, m: i32) -> usize {
    debug_assert!(m.unsigned_abs() <= l);
    (l * l) as usize + (l as i32 + m) as usize
}

/// All real harmonics with degree at most `l_max` at a unit vector, indexed
/// by [`harmonic_index`].
pub fn harmonics_up_to(l_max: u32, n: [f64; 3]) -> Vec<f64> {
    let lm = l_max as usize;
    let [x, y, z] = n;
    // Azimuthal factors without poles: c_m + i s_m = (x + i y)^m.
    let mut c = vec![0.0; lm + 1];
    let mut s = vec![0.0; lm + 1];
    c[0] = 1.0;
    for m in 1..=lm {
        c[m] = c[m - 1] * x - s[m - 1] * y;
        s[m] = s[m - 1] * x + c[m - 1] * y;
    }
    // q[l][m] is the associated Legendre value with sin^m(theta) divided out,
    // a polynomial in z.
    let mut q = vec![vec![0.0; lm + 1]; lm + 1];
    q[0][0] = 1.0;
    for m in 1..=lm {
        q[m][m] = q[m - 1][m - 1] * (2 * m - 1) as f64;
    }
    for m in 0..lm {
        q[m + 1][m] = (2 * m + 1) as f64 * z * q[m][m];
    }
    for m in 0..=lm {
        for l in m + 2..=lm {
            q[l][m] = ((2 * l - 1) as f64 * z * q[l - 1][m]
                - (l - 1 + m) as f64 * q[l - 2][m])
                / (l - m) as f64;
        }
    }

    let mut out = vec![0.0; (lm + 1) * (lm + 1)];
    for l in 0..=lm {
        for m in 0..=l {
            let norm = normalization(l as u32, m as u32);
            if m == 0 {
                out[harmonic_index(l as u32, 0)] = norm * q[l][0];
            } else {
                let v = std::f64::consts::SQRT_2 * norm * q[l][m];
                out[harmonic_index(l as u32, m as i32)] = v * c[m];
                out[harmonic_index(l as u32, -(m as i32))] = v * s[m];
            }
        }
    }
    out
}

/// One real harmonic at a unit vector.
pub fn real_harmonic(l: u32, m: i32, n: [f64; 3]) -> f64 {
    harmonics_up_to(l, n)[harmonic_index(l, m)]
}

fn normalization(l: u32, m: u32) -> f64 {
    let mut ratio = 1.0;
    // (l - m)! / (l + m)!
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * ratio).sqrt()
}

const OUTER_DIM: usize = ((TABLE_OUTER_L + 1) * (TABLE_OUTER_L + 1)) as usize;
const MID_DIM: usize = ((TABLE_MID_L + 1) * (TABLE_MID_L + 1)) as usize;

static TRIPLE_TABLE: OnceLock<Vec<f64>> = OnceLock::new();

/// Build the triple-product table by quadrature that is exact for the
/// polynomial integrands involved (total degree at most 12).
fn triple_table() -> &'static [f64] {
    TRIPLE_TABLE.get_or_init(|| {
        let (zs, zw) = gauss_legendre(8);
        let n_az = 32usize;
        let dphi = 2.0 * std::f64::consts::PI / n_az as f64;
        let mut table = vec![0.0; OUTER_DIM * MID_DIM * OUTER_DIM];
        for (&z, &wz) in zs.iter().zip(&zw) {
            let rho = (1.0 - z * z).max(0.0).sqrt();
            for j in 0..n_az {
                let phi = dphi * (j as f64 + 0.5);
                let point = [rho * phi.cos(), rho * phi.sin(), z];
                let weight = wz * dphi;
                let ys = harmonics_up_to(TABLE_MID_L, point);
                for a in 0..OUTER_DIM {
                    let ya = ys[a] * weight;
                    for mid in 0..MID_DIM {
                        let yam = ya * ys[mid];
                        let row = (a * MID_DIM + mid) * OUTER_DIM;
                        for b in 0..OUTER_DIM {
                            table[row + b] += yam * ys[b];
                        }
                    }
                }
            }
        }
        table
    })
}

/// Triple product `∫ Y_{la,ma} Y_{l,m} Y_{lb,mb} dΩ` of real harmonics.
/// Outer degrees must stay within [`TABLE_OUTER_L`], the middle degree
/// within [`TABLE_MID_L`].
pub fn triple_product(la: u32, ma: i32, l: u32, m: i32, lb: u32, mb: i32) -> f64 {
    assert!(la <= TABLE_OUTER_L && lb <= TABLE_OUTER_L && l <= TABLE_MID_L);
    let table = triple_table();
    table[(harmonic_index(la, ma) * MID_DIM + harmonic_index(l, m)) * OUTER_DIM
        + harmonic_index(lb, mb)]
}

/// Spherical Bessel functions `j_0..j_{l_max}` at `x >= 0`.
///
/// Uses the ascending series where the upward recurrence would amplify the
/// irregular solution (degrees above the argument) and the recurrence where
/// it is stable.
pub fn spherical_bessel(l_max: u32, x: f64) -> Vec<f64> {
    assert!(x >= 0.0 && x.is_finite(), "argument must be finite and nonnegative");
    let lm = l_max as usize;
    let mut out = vec![0.0; lm + 1];
    if x < 0.1 {
        for l in 0..=lm {
            out[l] = bessel_series(l as u32, x);
        }
        return out;
    }
    out[0] = x.sin() / x;
    if lm >= 1 {
        out[1] = x.sin() / (x * x) - x.cos() / x;
    }
    let mut l = 1;
    while l < lm && (l + 1) as f64 <= x {
        out[l + 1] = (2 * l + 1) as f64 / x * out[l] - out[l - 1];
        l += 1;
    }
    for k in (l + 1).max(2)..=lm {
        out[k] = bessel_series(k as u32, x);
    }
    out
}

fn bessel_series(l: u32, x: f64) -> f64 {
    if x == 0.0 {
        return if l == 0 { 1.0 } else { 0.0 };
    }
    let mut prefactor = 1.0;
    for k in 1..=l {
        // x^l / (2l+1)!! built jointly to postpone under/overflow.
        prefactor *= x / (2 * k + 1) as f64;
    }
    let t = -0.5 * x * x;
    let mut term = 1.0;
    let mut acc = 1.0;
    for k in 1..400 {
        term *= t / (k as f64 * (2 * l + 1 + 2 * k as u32) as f64);
        acc += term;
        if term.abs() < 1e-18 * acc.abs().max(1e-30) {
            break;
        }
    }
    prefactor * acc
}

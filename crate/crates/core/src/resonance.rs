//! Golden-rule resonance matrices between dressed atomic levels.
//!
//! Emission from level `i` to level `j` conserves fiber energy on a radial
//! shell per photon direction. The resonance matrix is the angular
//! quadrature, over the fiber's direction set, of the energy-shell surface
//! measure times the outer product of the level-to-level vertex blocks. Per
//! unit squared coupling; callers scale by `g^2`.
//!
//! Two independent routes compute the same object. The production path
//! locates each shell radius by safeguarded bisection and pulls the radial
//! delta function back through the shell slope. The oracle path never finds
//! roots: it sums a Lorentzian of shrinking width over a dense mode grid
//! and extrapolates the width to zero.

use ndarray::Array2;

use crate::atom::{form_factor_matrix, AtomBasis, FormFactorSpec};
use crate::error::{Error, Result};
use crate::fiber::FiberSpace;
use crate::grid::ModeGrid;
use crate::linalg::lapack::heev_full;
use crate::linalg::C64;

/// One energy shell: the radius where emission along `direction` conserves
/// fiber energy, with the surface weight of the radial delta function.
#[derive(Debug, Clone, Copy)]
pub struct ShellRoot {
    pub direction: [f64; 3],
    pub dir_weight: f64,
    pub radius: f64,
    /// Radial derivative of the shell function at the root.
    pub slope: f64,
    /// `radius^2 / |slope|`, the surface element of the pullback.
    pub surface: f64,
}

/// Shell function for emission at radius `r` along `direction`:
/// final minus initial fiber energy with one photon of momentum `r d`.
fn shell_value(m_total: f64, momentum: [f64; 3], direction: [f64; 3], delta_e: f64, r: f64) -> f64 {
    let p_par: f64 = momentum.iter().zip(&direction).map(|(p, d)| p * d).sum();
    r * r / (2.0 * m_total) + r * (1.0 - p_par / m_total) + delta_e
}

/// Root of the shell function on `(0, k_uv]` by safeguarded bisection.
///
/// `delta_e` is the level energy drop `E_lower - E_upper`, negative for a
/// genuine emission pair. Without a sign change there is no shell and the
/// direction contributes nothing (`None`). A root with a grazing slope is
/// refused: the surface weight diverges and the quadrature means nothing.
pub fn shell_root(
    m_total: f64,
    momentum: [f64; 3],
    direction: [f64; 3],
    delta_e: f64,
    k_uv: f64,
) -> Result<Option<ShellRoot>> {
    if delta_e >= 0.0 {
        return Ok(None);
    }
    let f = |r: f64| shell_value(m_total, momentum, direction, delta_e, r);
    let (mut lo, mut hi) = (0.0f64, k_uv);
    if f(hi) < 0.0 {
        return Err(Error::refusal(format!(
            "emission shell along ({:.3}, {:.3}, {:.3}) exceeds the cutoff {k_uv}",
            direction[0], direction[1], direction[2]
        )));
    }
    for _ in 0..120 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * k_uv {
            break;
        }
    }
    let radius = 0.5 * (lo + hi);
    let slope = radius / m_total + 1.0
        - momentum.iter().zip(&direction).map(|(p, d)| p * d).sum::<f64>() / m_total;
    if slope.abs() < 1e-10 {
        return Err(Error::refusal(format!(
            "grazing emission shell at radius {radius:.6e}: slope {slope:.3e} \
             leaves the surface weight undefined"
        )));
    }
    let surface = radius * radius / slope.abs();
    Ok(Some(ShellRoot { direction, dir_weight: 0.0, radius, slope, surface }))
}

/// Resonance matrix of one ordered level pair at one total momentum.
#[derive(Debug, Clone)]
pub struct FgrMatrix {
    pub level_upper: usize,
    pub level_lower: usize,
    pub momentum: [f64; 3],
    /// Hermitian, positive semidefinite; side equals the upper multiplicity.
    pub matrix: Array2<C64>,
    pub shells: Vec<ShellRoot>,
    pub trace: f64,
    pub min_eig: f64,
}

/// Golden-rule matrix for decay from `level_upper` to `level_lower`,
/// per unit squared coupling, on the fiber's direction quadrature.
///
/// The elastic pair is excluded: its shell sits at radius zero where the
/// surface measure degenerates and the vertex is switched off anyway, so
/// the matrix would be identically zero by construction rather than by
/// computation. Pairs with no energy to release return the zero matrix.
pub fn fgr_matrix(
    space: &FiberSpace,
    momentum: [f64; 3],
    level_upper: usize,
    level_lower: usize,
) -> Result<FgrMatrix> {
    let atom = &space.atom;
    if level_upper >= atom.n_levels() || level_lower >= atom.n_levels() {
        return Err(Error::config(
            "fgr.levels",
            format!("pair ({level_upper}, {level_lower}) outside the {} kept", atom.n_levels()),
        ));
    }
    if level_upper == level_lower {
        return Err(Error::config(
            "fgr.levels",
            "elastic pair excluded: its shell degenerates at radius zero",
        ));
    }
    let m_total = atom.masses.total();
    let speed = momentum.iter().map(|p| p * p).sum::<f64>().sqrt() / m_total;
    if speed >= 1.0 {
        return Err(Error::refusal(format!(
            "fiber speed {speed:.3} reaches the photon speed; emission shells \
             lose uniqueness there"
        )));
    }
    let delta_e = atom.levels[level_lower].energy - atom.levels[level_upper].energy;
    let mult = atom.levels[level_upper].multiplicity();
    let mut matrix = Array2::zeros((mult, mult));
    let mut shells = Vec::new();

    for (d, &dir) in space.grid.directions.iter().enumerate() {
        let Some(mut root) =
            shell_root(m_total, momentum, dir, delta_e, space.grid.k_uv)?
        else {
            continue;
        };
        root.dir_weight = space.grid.direction_weights[d];
        let k = [root.radius * dir[0], root.radius * dir[1], root.radius * dir[2]];
        let block = form_factor_matrix(atom, &space.ff, k, level_upper, level_lower)?;
        let coeff = root.dir_weight * root.surface;
        for a in 0..mult {
            for b in 0..mult {
                let mut acc = C64::new(0.0, 0.0);
                for c in 0..block.ncols() {
                    acc += block[(a, c)] * block[(b, c)].conj();
                }
                matrix[(a, b)] += acc * coeff;
            }
        }
        shells.push(root);
    }

    let (trace, min_eig) = hermitian_summary(&matrix)?;
    Ok(FgrMatrix { level_upper, level_lower, momentum, matrix, shells, trace, min_eig })
}

fn hermitian_summary(m: &Array2<C64>) -> Result<(f64, f64)> {
    let n = m.nrows();
    let trace = (0..n).map(|i| m[(i, i)].re).sum();
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let mut a = Vec::with_capacity(n * n);
    for col in 0..n {
        for row in 0..n {
            a.push(m[(row, col)]);
        }
    }
    let w = heev_full(&mut a, n)?;
    Ok((trace, w[0]))
}

/// Oracle estimate of the same resonance matrix: a Lorentzian of width
/// `epsilon` replaces the shell delta function and the momentum integral
/// becomes a straight sum over a dense mode grid. Widths must come in
/// descending order; two Richardson stages remove the linear and quadratic
/// width bias. No root finding anywhere.
#[derive(Debug, Clone)]
pub struct FgrOracle {
    pub matrix: Array2<C64>,
    pub epsilons: Vec<f64>,
    /// Traces of the raw per-width sums, before extrapolation.
    pub stage_traces: Vec<f64>,
    /// Whether the raw traces approached the limit monotonically.
    pub monotone: bool,
}

pub fn fgr_oracle(
    atom: &AtomBasis,
    ff: &FormFactorSpec,
    dense: &ModeGrid,
    momentum: [f64; 3],
    level_upper: usize,
    level_lower: usize,
    epsilons: &[f64],
) -> Result<FgrOracle> {
    if epsilons.len() < 3 {
        return Err(Error::config("fgr.epsilons", "need at least three widths"));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config("fgr.epsilons", "widths must strictly decrease"));
    }
    if level_upper == level_lower {
        return Err(Error::config("fgr.levels", "elastic pair excluded"));
    }
    let m_total = atom.masses.total();
    let delta_e = atom.levels[level_lower].energy - atom.levels[level_upper].energy;
    let mult = atom.levels[level_upper].multiplicity();
    let tensor = crate::atom::coupling_tensor(atom, ff, dense)?;
    let upper = atom.levels[level_upper].orbitals.clone();
    let lower = atom.levels[level_lower].orbitals.clone();

    let mut stages: Vec<Array2<C64>> = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let mut sum = Array2::zeros((mult, mult));
        for (q, &w) in dense.weights.iter().enumerate() {
            if dense.soft[q] {
                continue;
            }
            let r = dense.dispersion_free[q];
            let dir = {
                let k = dense.modes[q];
                [k[0] / r, k[1] / r, k[2] / r]
            };
            let s = shell_value(m_total, momentum, dir, delta_e, r);
            let lorentz = eps / (std::f64::consts::PI * (s * s + eps * eps));
            if lorentz == 0.0 {
                continue;
            }
            let block = &tensor.blocks[q];
            let coeff = w * lorentz;
            for (a, oa) in upper.clone().enumerate() {
                for (b, ob) in upper.clone().enumerate() {
                    let mut acc = C64::new(0.0, 0.0);
                    for oc in lower.clone() {
                        acc += block[(oa, oc)] * block[(ob, oc)].conj();
                    }
                    sum[(a, b)] += acc * coeff;
                }
            }
        }
        stages.push(sum);
    }

    let stage_traces: Vec<f64> =
        stages.iter().map(|s| (0..mult).map(|i| s[(i, i)].re).sum()).collect();
    let monotone = stage_traces.windows(2).all(|w| w[1] >= w[0])
        || stage_traces.windows(2).all(|w| w[1] <= w[0]);

    // First stage removes the linear width bias, second the quadratic.
    let n = stages.len();
    let a1 = richardson_pair(&stages[n - 2], &stages[n - 3], ratio(epsilons, n - 2, n - 3), 1);
    let a2 = richardson_pair(&stages[n - 1], &stages[n - 2], ratio(epsilons, n - 1, n - 2), 1);
    let matrix = richardson_pair(&a2, &a1, ratio(epsilons, n - 1, n - 2), 2);

    Ok(FgrOracle { matrix, epsilons: epsilons.to_vec(), stage_traces, monotone })
}

fn ratio(eps: &[f64], fine: usize, coarse: usize) -> f64 {
    eps[coarse] / eps[fine]
}

/// `fine + (fine - coarse) / (rho^order - 1)` entrywise.
fn richardson_pair(fine: &Array2<C64>, coarse: &Array2<C64>, rho: f64, order: u32) -> Array2<C64> {
    let denom = rho.powi(order as i32) - 1.0;
    let mut out = fine.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        *v += (fine[(i, j)] - coarse[(i, j)]) / denom;
    }
    out
}

/// Relative Frobenius distance between two level matrices.
pub fn relative_frobenius(a: &Array2<C64>, b: &Array2<C64>) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        diff += (x - y).norm_sqr();
        scale += y.norm_sqr();
    }
    (diff / scale.max(1e-300)).sqrt()
}

/// Total decay matrix of one level: the sum of the pair matrices over
/// every strictly lower level.
#[derive(Debug, Clone)]
pub struct GammaMatrix {
    pub level: usize,
    pub momentum: [f64; 3],
    /// Hermitian, positive semidefinite; side equals the level multiplicity.
    pub matrix: Array2<C64>,
    pub pairs: Vec<FgrMatrix>,
    pub trace: f64,
    pub min_eig: f64,
}

/// Sum the golden-rule matrices of `level` over all lower-energy levels.
///
/// The ground level has nothing to decay into and gets the zero matrix;
/// that is a statement about the model, not a failure.
pub fn gamma_matrix(space: &FiberSpace, momentum: [f64; 3], level: usize) -> Result<GammaMatrix> {
    let atom = &space.atom;
    if level >= atom.n_levels() {
        return Err(Error::config(
            "gamma.level",
            format!("level {level} outside the {} kept", atom.n_levels()),
        ));
    }
    let mult = atom.levels[level].multiplicity();
    let mut matrix = Array2::zeros((mult, mult));
    let mut pairs = Vec::new();
    for lower in 0..atom.n_levels() {
        if atom.levels[lower].energy >= atom.levels[level].energy {
            continue;
        }
        let pair = fgr_matrix(space, momentum, level, lower)?;
        matrix += &pair.matrix;
        pairs.push(pair);
    }
    let (trace, min_eig) = hermitian_summary(&matrix)?;
    Ok(GammaMatrix { level, momentum, matrix, pairs, trace, min_eig })
}

/// One row of a momentum scan of the level decay matrix.
#[derive(Debug, Clone, Copy)]
pub struct H2Point {
    pub momentum: [f64; 3],
    pub min_eig: f64,
    pub trace: f64,
}

/// Momentum scan: smallest decay eigenvalue of one level across a momentum
/// list, with the infimum and where it is attained.
#[derive(Debug, Clone)]
pub struct H2Scan {
    pub level: usize,
    pub points: Vec<H2Point>,
    pub infimum: f64,
    pub argmin: [f64; 3],
}

pub fn h2_scan(space: &FiberSpace, momenta: &[[f64; 3]], level: usize) -> Result<H2Scan> {
    if momenta.is_empty() {
        return Err(Error::config("fgr.momenta", "need at least one momentum"));
    }
    let mut points = Vec::with_capacity(momenta.len());
    let mut infimum = f64::INFINITY;
    let mut argmin = momenta[0];
    for &p in momenta {
        let m = gamma_matrix(space, p, level)?;
        if m.min_eig < infimum {
            infimum = m.min_eig;
            argmin = p;
        }
        points.push(H2Point { momentum: p, min_eig: m.min_eig, trace: m.trace });
    }
    Ok(H2Scan { level, points, infimum, argmin })
}

//! Bound states of the two-body atom in its internal coordinate.
//!
//! The atom is an electron-nucleus pair interacting through a central
//! potential. After removing the centre of mass, the internal Hamiltonian is
//! `-Δ/(2m) + V(|x|)` with reduced mass `m`. This module solves the radial
//! problem channel by channel, assembles the lowest bound levels with their
//! degeneracies, and provides the matrix elements that couple those levels to
//! photon modes: plane-wave vertex factors weighted by ultraviolet profiles,
//! and exponential weights used for localization estimates.
//!
//! Orbitals are real: a radial function times a real spherical harmonic.
//! All radial integrals use the uniform log grid of the solver, so basis
//! orthonormality holds to machine precision by construction.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Mutex, OnceLock};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::hash::ContentHasher;
use crate::linalg::lapack::syev_full;
use crate::{Error, Result};

pub mod formfactor;
pub mod harmonics;
pub mod radial;

pub use formfactor::{
    coupling_tensor, form_factor_matrix, vertex_matrix, CouplingTensor, FormFactorSpec, Profile,
};

/// Largest angular momentum the harmonic tables support.
pub const MAX_CHANNEL_L: u32 = 3;

/// Electron and nucleus masses. Units fix the physical electron mass at 1;
/// tests sometimes use equal masses to make the reduced mass exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Masses {
    pub electron: f64,
    pub nucleus: f64,
}

impl Masses {
    pub fn reduced(&self) -> f64 {
        1.0 / (1.0 / self.electron + 1.0 / self.nucleus)
    }

    pub fn total(&self) -> f64 {
        self.electron + self.nucleus
    }

    /// Weight of the electron plane-wave phase in the internal coordinate.
    pub fn electron_share(&self) -> f64 {
        self.nucleus / self.total()
    }

    /// Weight of the nucleus plane-wave phase; the two shares sum to 1.
    pub fn nucleus_share(&self) -> f64 {
        self.electron / self.total()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("masses.electron", self.electron), ("masses.nucleus", self.nucleus)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for Masses {
    fn default() -> Self {
        Masses { electron: 1.0, nucleus: 1836.152_673 }
    }
}

/// Central potential families accepted by the radial solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Potential {
    /// `-charge / r`.
    Coulomb { charge: f64 },
    /// `-charge / sqrt(r^2 + softening^2)`.
    SoftCoulomb { charge: f64, softening: f64 },
    /// `-depth` inside `radius`, zero outside.
    Well { depth: f64, radius: f64 },
    /// Piecewise-linear interpolation of samples; clamped to the end values
    /// outside the tabulated range.
    Tabulated { r: Vec<f64>, v: Vec<f64> },
}

impl Potential {
    pub fn value(&self, r: f64) -> f64 {
        match self {
            Potential::Coulomb { charge } => -charge / r,
            Potential::SoftCoulomb { charge, softening } => {
                -charge / (r * r + softening * softening).sqrt()
            }
            Potential::Well { depth, radius } => {
                if r < *radius {
                    -depth
                } else {
                    0.0
                }
            }
            Potential::Tabulated { r: rs, v } => {
                if r <= rs[0] {
                    v[0]
                } else if r >= rs[rs.len() - 1] {
                    v[v.len() - 1]
                } else {
                    let j = rs.partition_point(|&x| x < r).max(1);
                    let t = (r - rs[j - 1]) / (rs[j] - rs[j - 1]);
                    v[j - 1] + t * (v[j] - v[j - 1])
                }
            }
        }
    }

    /// Potential coefficient for one stencil cell `[r_lo, r_hi]` around `r`.
    /// Smooth families use the point value; the well and tabulated families
    /// use the exact cell average so edges and kinks stay second-order.
    pub fn stencil_value(&self, r_lo: f64, r: f64, r_hi: f64) -> f64 {
        match self {
            Potential::Coulomb { .. } | Potential::SoftCoulomb { .. } => self.value(r),
            Potential::Well { depth, radius } => {
                let covered = (radius.min(r_hi) - r_lo).clamp(0.0, r_hi - r_lo);
                -depth * covered / (r_hi - r_lo)
            }
            Potential::Tabulated { r: rs, v } => {
                linear_table_average(rs, v, r_lo, r_hi)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Potential::Coulomb { charge } => {
                if !charge.is_finite() || *charge <= 0.0 {
                    return Err(Error::config("potential.charge", "must be positive"));
                }
            }
            Potential::SoftCoulomb { charge, softening } => {
                if !charge.is_finite() || *charge <= 0.0 {
                    return Err(Error::config("potential.charge", "must be positive"));
                }
                if !softening.is_finite() || *softening <= 0.0 {
                    return Err(Error::config("potential.softening", "must be positive"));
                }
            }
            Potential::Well { depth, radius } => {
                if !depth.is_finite() || *depth <= 0.0 {
                    return Err(Error::config("potential.depth", "must be positive"));
                }
                if !radius.is_finite() || *radius <= 0.0 {
                    return Err(Error::config("potential.radius", "must be positive"));
                }
            }
            Potential::Tabulated { r, v } => {
                if r.len() < 2 || r.len() != v.len() {
                    return Err(Error::config(
                        "potential.r",
                        "need at least two samples, same length as v",
                    ));
                }
                if r[0] <= 0.0 || r.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::config("potential.r", "must be positive and increasing"));
                }
                if r.iter().chain(v.iter()).any(|x| !x.is_finite()) {
                    return Err(Error::config("potential", "samples must be finite"));
                }
            }
        }
        Ok(())
    }

    fn push_hash(&self, h: &mut ContentHasher) {
        match self {
            Potential::Coulomb { charge } => {
                h.push_str("coulomb");
                h.push_f64(*charge);
            }
            Potential::SoftCoulomb { charge, softening } => {
                h.push_str("soft-coulomb");
                h.push_f64(*charge);
                h.push_f64(*softening);
            }
            Potential::Well { depth, radius } => {
                h.push_str("well");
                h.push_f64(*depth);
                h.push_f64(*radius);
            }
            Potential::Tabulated { r, v } => {
                h.push_str("tabulated");
                h.push_f64_slice(r);
                h.push_f64_slice(v);
            }
        }
    }
}

/// Mean of a piecewise-linear table over `[lo, hi]`, clamped to the end
/// values outside the tabulated range.
fn linear_table_average(rs: &[f64], vs: &[f64], lo: f64, hi: f64) -> f64 {
    debug_assert!(hi > lo);
    let val = |r: f64| -> f64 {
        if r <= rs[0] {
            vs[0]
        } else if r >= rs[rs.len() - 1] {
            vs[vs.len() - 1]
        } else {
            let j = rs.partition_point(|&x| x < r).max(1);
            let t = (r - rs[j - 1]) / (rs[j] - rs[j - 1]);
            vs[j - 1] + t * (vs[j] - vs[j - 1])
        }
    };
    // Breakpoints inside the cell split it into purely linear pieces, so the
    // trapezoid over each piece is exact.
    let mut knots = vec![lo];
    let start = rs.partition_point(|&x| x <= lo);
    for &rk in &rs[start..] {
        if rk >= hi {
            break;
        }
        knots.push(rk);
    }
    knots.push(hi);
    let mut acc = 0.0;
    for pair in knots.windows(2) {
        acc += 0.5 * (val(pair[0]) + val(pair[1])) * (pair[1] - pair[0]);
    }
    acc / (hi - lo)
}

/// Uniform log-spaced radial grid. `points` is the coarse resolution; the
/// solver refines by exact step halving and the returned basis carries
/// `2 * points - 1` samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialGridSpec {
    pub r_min: f64,
    pub r_max: f64,
    pub points: usize,
}

impl RadialGridSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.r_min.is_finite() || self.r_min <= 0.0 {
            return Err(Error::config("grid.r_min", "must be positive"));
        }
        if !self.r_max.is_finite() || self.r_max <= self.r_min {
            return Err(Error::config("grid.r_max", "must exceed r_min"));
        }
        if self.points < 32 {
            return Err(Error::config("grid.points", "need at least 32 points"));
        }
        if self.points > 250_000 {
            return Err(Error::config("grid.points", "more than 250000 points refused"));
        }
        Ok(())
    }

    /// Node count of the grid the basis functions are stored on.
    pub fn basis_points(&self) -> usize {
        2 * self.points - 1
    }

    /// Node count of the finest solver stage.
    pub fn fine_points(&self) -> usize {
        4 * self.points - 3
    }
}

impl Default for RadialGridSpec {
    fn default() -> Self {
        // The deep inner wall keeps the s-wave Dirichlet error (order r_min)
        // far below every tolerance; log spacing makes it nearly free.
        RadialGridSpec { r_min: 1e-13, r_max: 60.0, points: 1600 }
    }
}

/// Full description of the atomic problem: potential, masses, how many
/// angular channels to scan and how many levels to keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSpec {
    pub potential: Potential,
    pub masses: Masses,
    pub l_max: u32,
    pub n_levels: usize,
    pub grid: RadialGridSpec,
}

impl AtomSpec {
    pub fn validate(&self) -> Result<()> {
        self.potential.validate()?;
        self.masses.validate()?;
        self.grid.validate()?;
        if self.l_max > MAX_CHANNEL_L {
            return Err(Error::config(
                "atom.l_max",
                format!("harmonic tables stop at l = {MAX_CHANNEL_L}"),
            ));
        }
        if self.n_levels == 0 {
            return Err(Error::config("atom.n_levels", "need at least one level"));
        }
        if self.n_levels > 16 {
            return Err(Error::config("atom.n_levels", "more than 16 levels refused"));
        }
        Ok(())
    }

    pub fn solve(&self) -> Result<AtomBasis> {
        solve_atom(self)
    }
}

/// One radial eigenfunction `u(r)`, sampled on the fine grid and normalized
/// so that the weighted square sum is 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadialFunction {
    pub l: u32,
    /// Richardson-extrapolated channel eigenvalue.
    pub energy: f64,
    /// Relative change between the last two extrapolation stages.
    pub drift: f64,
    pub samples: Vec<f64>,
}

/// One orthonormal bound orbital: `radials[radial](r)/r` times the real
/// spherical harmonic `(l, m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orbital {
    pub level: usize,
    pub radial: usize,
    pub l: u32,
    pub m: i32,
}

/// A group of orbitals degenerate in energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub energy: f64,
    pub orbitals: Range<usize>,
}

impl Level {
    pub fn multiplicity(&self) -> usize {
        self.orbitals.end - self.orbitals.start
    }
}

/// The assembled bound-state family: levels in increasing energy, orbitals
/// grouped by level, shared radial samples, and the quadrature that makes the
/// family orthonormal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtomBasis {
    pub masses: Masses,
    pub levels: Vec<Level>,
    pub orbitals: Vec<Orbital>,
    pub radials: Vec<RadialFunction>,
    /// Fine-grid radii.
    pub r: Vec<f64>,
    /// Quadrature weights for `∫ f(r) dr` on the log grid: `h * r_i`.
    pub w: Vec<f64>,
    /// Worst relative Richardson drift over the kept radial functions.
    pub drift: f64,
    pub hash: String,
}

impl AtomBasis {
    pub fn n_orbitals(&self) -> usize {
        self.orbitals.len()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn ground_energy(&self) -> f64 {
        self.levels[0].energy
    }

    pub fn level_orbitals(&self, level: usize) -> &[Orbital] {
        &self.orbitals[self.levels[level].orbitals.clone()]
    }

    /// Energy gap between neighbouring kept levels, `levels[j+1] - levels[j]`.
    pub fn gap_above(&self, level: usize) -> Option<f64> {
        let e = self.levels.get(level + 1)?.energy;
        Some(e - self.levels[level].energy)
    }

    /// Radial samples of an orbital's `u` function.
    pub fn u(&self, orbital: usize) -> &[f64] {
        &self.radials[self.orbitals[orbital].radial].samples
    }

    /// Gram matrix of the orbital family under the stored quadrature.
    /// Identity up to rounding; exposed for diagnostics.
    pub fn gram(&self) -> Array2<f64> {
        let n = self.n_orbitals();
        let mut g = Array2::zeros((n, n));
        for a in 0..n {
            for b in 0..n {
                let oa = self.orbitals[a];
                let ob = self.orbitals[b];
                if oa.l != ob.l || oa.m != ob.m {
                    continue;
                }
                g[(a, b)] = self.radial_integral(oa.radial, ob.radial, |_| 1.0);
            }
        }
        g
    }

    /// Weighted radial integral `∫ u_a(r) u_b(r) f(r) dr`.
    pub fn radial_integral(&self, ra: usize, rb: usize, f: impl Fn(f64) -> f64) -> f64 {
        let ua = &self.radials[ra].samples;
        let ub = &self.radials[rb].samples;
        let mut acc = 0.0;
        for i in 0..self.r.len() {
            acc += ua[i] * ub[i] * f(self.r[i]) * self.w[i];
        }
        acc
    }
}

/// Solve the channels, group degenerate eigenvalues, and assemble the basis.
///
/// Fails with a refusal when the potential binds fewer levels than requested,
/// when no bound state exists at all, or when the ground level is not simple;
/// fails with a convergence error when the extrapolation drift of any kept
/// channel exceeds `1e-6` relative.
pub fn solve_atom(spec: &AtomSpec) -> Result<AtomBasis> {
    spec.validate()?;
    let cache_key = spec_fingerprint(spec);
    let cache = ATOM_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().expect("atom cache lock").get(&cache_key) {
        return Ok(hit.clone());
    }
    let m = spec.masses.reduced();
    let per_channel = spec.n_levels + 2;

    let mut channels = Vec::new();
    for l in 0..=spec.l_max {
        channels.push(radial::solve_channel(&spec.potential, m, l, per_channel, &spec.grid)?);
    }

    // Candidate bound states across all channels, sorted by energy.
    let mut candidates: Vec<(f64, u32, usize)> = Vec::new();
    for (ci, ch) in channels.iter().enumerate() {
        for (k, &e) in ch.energies.iter().enumerate() {
            candidates.push((e, ci as u32, k));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));

    let e0 = candidates.first().map(|c| c.0).unwrap_or(0.0);
    if e0 >= -1e-12 {
        return Err(Error::refusal(format!(
            "potential binds no state: lowest eigenvalue {e0:.3e} is not negative"
        )));
    }
    let bound_cut = -1e-10 * e0.abs();
    candidates.retain(|c| c.0 < bound_cut);

    // Group by energy; members of a degenerate level agree far better than
    // the grouping width when the solver has converged.
    let group_eps = 1e-9 * e0.abs();
    let mut groups: Vec<Vec<(f64, u32, usize)>> = Vec::new();
    for c in candidates {
        match groups.last_mut() {
            Some(g) if c.0 - g[0].0 <= group_eps => g.push(c),
            _ => groups.push(vec![c]),
        }
    }
    if groups.len() < spec.n_levels {
        return Err(Error::refusal(format!(
            "potential binds only {} level(s), {} requested",
            groups.len(),
            spec.n_levels
        )));
    }
    groups.truncate(spec.n_levels);

    let ground_mult: u32 = groups[0].iter().map(|&(_, ci, _)| 2 * ci + 1).sum();
    if ground_mult != 1 {
        return Err(Error::refusal(format!(
            "ground level is degenerate (multiplicity {ground_mult}); expected a simple ground state"
        )));
    }

    let mut radials = Vec::new();
    let mut orbitals = Vec::new();
    let mut levels = Vec::new();
    let mut worst_drift = 0.0f64;
    for (li, group) in groups.iter().enumerate() {
        let start = orbitals.len();
        let energy = group.iter().map(|g| g.0).sum::<f64>() / group.len() as f64;
        let mut members = group.clone();
        members.sort_by_key(|&(_, ci, _)| ci);
        for (e, ci, k) in members {
            let ch = &channels[ci as usize];
            let drift = ch.drifts[k];
            if drift > 1e-6 {
                return Err(Error::NoConvergence(format!(
                    "channel l={ci} level {k}: extrapolation drift {drift:.2e} exceeds 1e-6"
                )));
            }
            worst_drift = worst_drift.max(drift);
            let radial = radials.len();
            radials.push(RadialFunction {
                l: ci,
                energy: e,
                drift,
                samples: ch.vectors[k].clone(),
            });
            let l = ci as i32;
            for mq in -l..=l {
                orbitals.push(Orbital { level: li, radial, l: ci, m: mq });
            }
        }
        levels.push(Level { energy, orbitals: start..orbitals.len() });
    }

    let (r, w) = radial::basis_grid(&spec.grid);
    lowdin_orthonormalize(&mut radials, &w)?;

    let mut hasher = ContentHasher::new("atom-basis");
    spec.potential.push_hash(&mut hasher);
    hasher.push_f64(spec.masses.electron);
    hasher.push_f64(spec.masses.nucleus);
    hasher.push_f64(spec.grid.r_min);
    hasher.push_f64(spec.grid.r_max);
    hasher.push_u64(spec.grid.points as u64);
    hasher.push_u64(spec.l_max as u64);
    for lv in &levels {
        hasher.push_f64(lv.energy);
        hasher.push_u64(lv.multiplicity() as u64);
    }
    for rad in &radials {
        hasher.push_u64(rad.l as u64);
        hasher.push_f64_slice(&rad.samples);
    }

    let basis = AtomBasis {
        masses: spec.masses,
        levels,
        orbitals,
        radials,
        r,
        w,
        drift: worst_drift,
        hash: hasher.finish_hex(),
    };
    cache
        .lock()
        .expect("atom cache lock")
        .insert(cache_key, basis.clone());
    Ok(basis)
}

static ATOM_CACHE: OnceLock<Mutex<HashMap<String, AtomBasis>>> = OnceLock::new();

fn spec_fingerprint(spec: &AtomSpec) -> String {
    let mut h = ContentHasher::new("atom-spec");
    spec.potential.push_hash(&mut h);
    h.push_f64(spec.masses.electron);
    h.push_f64(spec.masses.nucleus);
    h.push_f64(spec.grid.r_min);
    h.push_f64(spec.grid.r_max);
    h.push_u64(spec.grid.points as u64);
    h.push_u64(spec.l_max as u64);
    h.push_u64(spec.n_levels as u64);
    h.finish_hex()
}

/// Symmetric orthonormalization of the kept radial functions within each
/// angular channel. Cross-channel overlaps vanish by symmetry; within a
/// channel the Gram matrix under the stored quadrature is pushed to the
/// identity by applying its inverse square root. The mixing coefficients are
/// of the size of the discretization error, so each function keeps its label.
fn lowdin_orthonormalize(radials: &mut [RadialFunction], w: &[f64]) -> Result<()> {
    let mut by_l: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, rad) in radials.iter().enumerate() {
        by_l.entry(rad.l).or_default().push(i);
    }
    for idxs in by_l.values() {
        let n = idxs.len();
        if n < 2 {
            continue;
        }
        let mut gram = vec![0.0f64; n * n];
        for (a, &ia) in idxs.iter().enumerate() {
            for (b, &ib) in idxs.iter().enumerate().skip(a) {
                let s: f64 = radials[ia]
                    .samples
                    .iter()
                    .zip(&radials[ib].samples)
                    .zip(w)
                    .map(|((ua, ub), wj)| ua * ub * wj)
                    .sum();
                gram[b * n + a] = s;
                gram[a * n + b] = s;
            }
        }
        let eigs = syev_full(&mut gram, n)?;
        if eigs[0] <= 0.5 {
            return Err(Error::NoConvergence(format!(
                "radial overlap matrix is ill conditioned (smallest eigenvalue {:.2e})",
                eigs[0]
            )));
        }
        let mut inv_sqrt = vec![0.0f64; n * n];
        for a in 0..n {
            for b in 0..=a {
                let s: f64 = eigs
                    .iter()
                    .enumerate()
                    .map(|(k, lam)| gram[k * n + a] * gram[k * n + b] / lam.sqrt())
                    .sum();
                inv_sqrt[b * n + a] = s;
                inv_sqrt[a * n + b] = s;
            }
        }
        let old: Vec<Vec<f64>> = idxs.iter().map(|&i| radials[i].samples.clone()).collect();
        for (a, &ia) in idxs.iter().enumerate() {
            let mut mixed = vec![0.0f64; w.len()];
            for (b, src) in old.iter().enumerate() {
                let c = inv_sqrt[b * n + a];
                for (mj, sj) in mixed.iter_mut().zip(src) {
                    *mj += c * sj;
                }
            }
            radials[ia].samples = mixed;
        }
    }
    Ok(())
}

/// Matrix of the multiplication operator `exp(alpha * |x|)` over the orbital
/// family. Diagonal in the angular labels; positive semidefinite because it
/// is the Gram matrix of the weighted orbitals.
///
/// Rejects exponents whose weight would overflow on the stored grid and
/// names the largest acceptable `alpha` in the refusal.
///
/// Accuracy note: once `alpha` reaches the sum of the two slowest decay
/// rates in the basis, the weighted cross integrals stop converging in
/// `r_max` and the weight amplifies the solver's residual basis cross-talk
/// exponentially. Entries are then good to roughly the cross-talk times the
/// weighted cross integral rather than to quadrature accuracy.
pub fn exp_weight(atom: &AtomBasis, alpha: f64) -> Result<Array2<f64>> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::config("alpha", "must be a nonnegative finite number"));
    }
    let r_max = *atom.r.last().expect("nonempty grid");
    const MAX_EXPONENT: f64 = 600.0;
    if alpha * r_max > MAX_EXPONENT {
        return Err(Error::refusal(format!(
            "exp weight overflows at alpha = {alpha}: grid reaches r = {r_max}, \
             largest acceptable alpha is {:.6}",
            MAX_EXPONENT / r_max
        )));
    }
    let n = atom.n_orbitals();
    let mut mat = Array2::zeros((n, n));
    for a in 0..n {
        for b in a..n {
            let oa = atom.orbitals[a];
            let ob = atom.orbitals[b];
            if oa.l != ob.l || oa.m != ob.m {
                continue;
            }
            let v = atom.radial_integral(oa.radial, ob.radial, |r| (alpha * r).exp());
            mat[(a, b)] = v;
            mat[(b, a)] = v;
        }
    }
    Ok(mat)
}

/// Asymptotic decay rate of a radial function, as the coefficient `s` of the
/// fit `ln |u| = a + nu ln r + s r` over the outer tail. The `ln r` term
/// absorbs the power-law prefactor, so for a bound state of energy `E` the
/// fitted `s` approaches `-sqrt(2 m |E|)`.
pub fn tail_slope(atom: &AtomBasis, radial: usize) -> Result<f64> {
    let u = &atom.radials[radial].samples;
    let r = &atom.r;
    let r_tail = r
        .iter()
        .zip(u)
        .rev()
        .find(|&(_, &ui)| ui.abs() > 1e-14)
        .map(|(&ri, _)| ri)
        .ok_or_else(|| Error::NoConvergence("radial function vanishes everywhere".into()))?;
    let (lo, hi) = (0.5 * r_tail, 0.9 * r_tail);
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for (&ri, &ui) in r.iter().zip(u) {
        if ri >= lo && ri <= hi && ui.abs() > 1e-250 {
            rows.push([1.0, ri.ln(), ri]);
            ys.push(ui.abs().ln());
        }
    }
    if rows.len() < 10 {
        return Err(Error::NoConvergence(format!(
            "tail window [{lo:.3}, {hi:.3}] holds only {} usable points",
            rows.len()
        )));
    }
    // Normal equations of the 3-parameter fit.
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for (row, &y) in rows.iter().zip(&ys) {
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * y;
        }
    }
    let sol = solve3(ata, aty).ok_or_else(|| {
        Error::NoConvergence("tail fit normal equations are singular".into())
    })?;
    Ok(sol[2])
}

/// Gaussian elimination with partial pivoting for a 3 by 3 system.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for k in row + 1..3 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Lowest internal energy reachable by states confined to `|x| >= r_floor`,
/// minimized over the channels the spec keeps. A hard Dirichlet wall at the
/// floor makes this an upper bound on the constrained infimum; sweeping the
/// floor outward and extrapolating recovers the unbinding threshold.
pub fn constrained_ground_energy(spec: &AtomSpec, r_floor: f64) -> Result<f64> {
    spec.validate()?;
    if !r_floor.is_finite() || r_floor <= spec.grid.r_min {
        return Err(Error::config(
            "thresholds.r_floor",
            "constraint radius must lie inside the radial grid",
        ));
    }
    let m = spec.masses.reduced();
    let mut best = f64::INFINITY;
    for l in 0..=spec.l_max {
        best = best.min(radial::constrained_ground(&spec.potential, m, l, &spec.grid, r_floor)?);
    }
    Ok(best)
}

/// Smallest eigenvalue of a symmetric matrix, for definiteness diagnostics.
pub fn min_symmetric_eig(mat: &Array2<f64>) -> Result<f64> {
    let n = mat.nrows();
    let mut a = Vec::with_capacity(n * n);
    for col in 0..n {
        for row in 0..n {
            a.push(mat[(row, col)]);
        }
    }
    let w = syev_full(&mut a, n)?;
    Ok(w.first().copied().unwrap_or(0.0))
}

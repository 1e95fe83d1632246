//! Positive-commutator machinery on fiber spaces.
//!
//! The conjugate operator is `A = dGamma(a) + iD`: the second-quantized
//! radial derivative plus a coupling-adapted off-diagonal rotation `D` built
//! from the level projector, the smeared ladder operators, and a squared
//! resolvent of the free fiber operator at the level energy. Window
//! compressions of `[H, iA]` quantify the positivity that rules out
//! embedded eigenvalues in the continuum limit; the Feshbach reduction and
//! the virial residual probe the same structure from two other sides.
//!
//! Windows here always mean coordinate windows of the free operator: the
//! free fiber diagonal selects the basis states, never the perturbed
//! eigenvectors. Compressing onto exact eigenvectors of the full matrix is
//! pointless: the virial identity zeroes the diagonal there and the form
//! could never come out positive on a finite grid.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fiber::{Dispersion, FiberOperator, FiberSpace};
use crate::fock::ops;
use crate::grid::ModeGrid;
use crate::linalg::lapack::{gesv, heev_full};
use crate::linalg::sparse::{CsrMatrix, HermBuilder, HermOp, LinOp};
use crate::linalg::{self, C64};

/// Smallest resolvent width the diagonal solves accept.
pub const EPSILON_FLOOR: f64 = 1e-10;

/// Dense cutoff for the Feshbach subspace assembly.
const FESHBACH_DENSE_CAP: usize = 1200;

/// Symmetrized radial derivative on the mode grid, one radial stencil per
/// direction, exactly Hermitian in the plain amplitude inner product.
///
/// With `S = W^{1/2} D W^{-1/2}` for the one-sided/central difference `D`
/// on function values and the quadrature weights `W`, the generator is
/// `(i/2)(S - S^T)`. In the continuum limit this is `i(d/dr + 1/r)`, the
/// operator whose commutator with the radius is the identity; the discrete
/// commutator reproduces that only as a quadratic form on smooth
/// amplitudes, which is the resolution diagnostic reported elsewhere.
pub fn dilation_generator(grid: &ModeGrid) -> Result<HermOp> {
    let r_count = grid.radial_points.len();
    if r_count < 3 {
        return Err(Error::refusal(format!(
            "radial stencil needs at least 3 shells per direction, got {r_count}"
        )));
    }
    let h = grid.radial_step;
    let n_dirs = grid.directions.len();
    // Recover each direction's radial line from the stored index maps.
    let mut lines = vec![vec![usize::MAX; r_count]; n_dirs];
    for q in 0..grid.mode_count() {
        lines[grid.angular_index[q] as usize][grid.radial_index[q] as usize] = q;
    }
    let mut b = HermBuilder::new(grid.mode_count());
    for line in &lines {
        for s in 0..r_count - 1 {
            let (q_lo, q_hi) = (line[s], line[s + 1]);
            let rho = (grid.weights[q_lo] / grid.weights[q_hi]).sqrt();
            // Central differences inside, one-sided rows at the ends; the
            // antisymmetrization keeps Hermiticity regardless of the rows.
            let d_up = if s == 0 { 1.0 / h } else { 0.5 / h };
            let d_dn = if s + 1 == r_count - 1 { -1.0 / h } else { -0.5 / h };
            let val = 0.5 * (rho * d_up - d_dn / rho);
            b.add_offdiag(q_lo, q_hi, C64::new(0.0, val));
        }
    }
    Ok(b.finish())
}

/// One-particle commutator `i (m a - a m)` of a real diagonal `m` with a
/// zero-diagonal Hermitian stencil `a`.
pub fn diag_commutator(m: &[f64], a: &HermOp) -> HermOp {
    let mut b = HermBuilder::new(a.dim);
    for ((r, c), v) in a.rows.iter().zip(&a.cols).zip(&a.vals) {
        let (r, c) = (*r as usize, *c as usize);
        b.add_offdiag(r, c, C64::new(0.0, 1.0) * (m[r] - m[c]) * v);
    }
    b.finish()
}

/// Lift a Fock-space Hermitian operator to the fiber product space,
/// acting as the identity on the orbital factor.
pub fn lift_fock(space: &FiberSpace, f: &HermOp) -> HermOp {
    let n_at = space.n_orbitals();
    let mut b = HermBuilder::new(space.dim());
    for (s, d) in f.diag.iter().enumerate() {
        for alpha in 0..n_at {
            b.add_diag(s * n_at + alpha, *d);
        }
    }
    for ((r, c), v) in f.rows.iter().zip(&f.cols).zip(&f.vals) {
        let (r, c) = (*r as usize, *c as usize);
        for alpha in 0..n_at {
            b.add_offdiag(r * n_at + alpha, c * n_at + alpha, *v);
        }
    }
    b.finish()
}

/// Second-quantized dilation generator on the fiber space.
pub fn dgamma_dilation(space: &FiberSpace) -> Result<HermOp> {
    let a = dilation_generator(&space.grid)?;
    let fock = ops::second_quantize_offdiag(&space.fock, &a)?;
    Ok(lift_fock(space, &fock))
}

/// Photon-raising ladder smeared with the vertex family, quadrature weights
/// folded in, coupling left out. The lowering partner is the adjoint.
pub fn ladder_raise(space: &FiberSpace) -> CsrMatrix {
    let n_at = space.n_orbitals();
    let fock = &space.fock;
    let mut trips = Vec::new();
    for s in 0..fock.dim() {
        if fock.total_occupation(s) >= fock.n_max() {
            continue;
        }
        for (m, block) in space.tensor.blocks.iter().enumerate() {
            if space.grid.soft[m] {
                continue;
            }
            let (t, n1) = fock.with_added(s, m).expect("guarded by the total check");
            let amp = space.grid.weights[m].sqrt() * (n1 as f64).sqrt();
            for ap in 0..n_at {
                for aq in 0..n_at {
                    let v = block[(ap, aq)] * amp;
                    if v != C64::new(0.0, 0.0) {
                        trips.push((
                            (t * n_at + ap) as u32,
                            (s * n_at + aq) as u32,
                            v,
                        ));
                    }
                }
            }
        }
    }
    CsrMatrix::from_triplets(space.dim(), space.dim(), trips)
}

/// Field operator with per-mode orbital blocks already smeared (weights and
/// any one-particle transforms folded into the blocks).
fn field_from_blocks(space: &FiberSpace, blocks: &[ndarray::Array2<C64>]) -> HermOp {
    let n_at = space.n_orbitals();
    let fock = &space.fock;
    let mut b = HermBuilder::new(space.dim());
    for s in 0..fock.dim() {
        if fock.total_occupation(s) >= fock.n_max() {
            continue;
        }
        for (m, block) in blocks.iter().enumerate() {
            let (t, n1) = fock.with_added(s, m).expect("guarded by the total check");
            let amp = (n1 as f64).sqrt();
            for ap in 0..n_at {
                for aq in 0..n_at {
                    let v = block[(ap, aq)] * amp;
                    if v != C64::new(0.0, 0.0) {
                        b.add_offdiag(t * n_at + ap, s * n_at + aq, v);
                    }
                }
            }
        }
    }
    b.finish()
}

/// Parameters of the conjugate operator at one level and momentum.
///
/// When `theta` or `epsilon` are left unset they follow the coupling as
/// `g^kappa` and `g^alpha`; the exponents must satisfy
/// `0 < kappa < alpha < 1`.
#[derive(Debug, Clone, Copy)]
pub struct ConjugateSpec {
    pub level: usize,
    pub momentum: [f64; 3],
    pub coupling: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub theta: Option<f64>,
    pub epsilon: Option<f64>,
    pub beta: f64,
}

impl ConjugateSpec {
    pub fn defaults(level: usize, momentum: [f64; 3], coupling: f64) -> Self {
        ConjugateSpec {
            level,
            momentum,
            coupling,
            kappa: 0.25,
            alpha: 0.5,
            theta: None,
            epsilon: None,
            beta: 0.1,
        }
    }

    pub fn theta(&self) -> f64 {
        self.theta.unwrap_or_else(|| self.coupling.powf(self.kappa))
    }

    pub fn epsilon(&self) -> f64 {
        match self.epsilon {
            Some(v) => v,
            // Uncoupled probes never touch the resolvent, but a zero width
            // would still poison the stored diagonal with infinities.
            None if self.coupling == 0.0 => 1.0,
            None => self.coupling.powf(self.alpha),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa < self.alpha && self.alpha < 1.0) {
            return Err(Error::config(
                "conjugate.exponents",
                format!("need 0 < kappa < alpha < 1, got ({}, {})", self.kappa, self.alpha),
            ));
        }
        if self.coupling < 0.0 || !self.coupling.is_finite() {
            return Err(Error::config("conjugate.coupling", "coupling must be finite and >= 0"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config("conjugate.beta", "beta must sit in (0, 1)"));
        }
        let eps = self.epsilon();
        if self.coupling > 0.0 && eps < EPSILON_FLOOR {
            return Err(Error::refusal(format!(
                "resolvent width {eps:.3e} sits below the solver floor {EPSILON_FLOOR:.0e}"
            )));
        }
        Ok(())
    }
}

/// Assembled conjugate-operator bundle at one `(level, momentum, coupling)`.
#[derive(Debug, Clone)]
pub struct ConjugateOperator {
    pub space: Arc<FiberSpace>,
    pub spec: ConjugateSpec,
    pub theta: f64,
    pub epsilon: f64,
    /// Full fiber operator at the spec's coupling, free dispersion.
    pub h: FiberOperator,
    /// Free fiber diagonal at the same momentum.
    pub free_diag: Vec<f64>,
    pub dgamma_a: HermOp,
    /// The Hermitian contribution `iD`.
    pub i_d: HermOp,
    /// `A = dGamma(a) + iD`.
    pub a_full: HermOp,
    /// Field operator smeared with the derivative-transformed vertex, no
    /// coupling factor.
    pub phi_ia_f: HermOp,
    /// `M = P_j a(F) R_eps^2 P-bar_j`; `D = g theta (M - M^dagger)`.
    m_block: CsrMatrix,
    raise: CsrMatrix,
    lower: CsrMatrix,
    pub resolvent2: Vec<f64>,
    /// Fiber indices spanning level `j` tensored with the vacuum.
    pub level_states: Vec<usize>,
    pub level_energy: f64,
    pub d_norm: f64,
    /// Max deviation of the compressed free operator from the level energy.
    pub level_identity_error: f64,
}

/// Build the conjugate operator and every piece of the `B` form.
pub fn conjugate_operator(space: &Arc<FiberSpace>, spec: &ConjugateSpec) -> Result<ConjugateOperator> {
    spec.validate()?;
    let atom = &space.atom;
    if spec.level >= atom.n_levels() {
        return Err(Error::config(
            "conjugate.level",
            format!("level {} outside the {} kept", spec.level, atom.n_levels()),
        ));
    }
    let g = spec.coupling;
    let theta = spec.theta();
    let epsilon = spec.epsilon();

    let h = space.assemble(spec.momentum, g, Dispersion::Free)?;
    let h0 = space.assemble(spec.momentum, 0.0, Dispersion::Free)?;
    let free_diag = h0.op.diag.clone();

    let pi2 = spec.momentum.iter().map(|p| p * p).sum::<f64>();
    let level_energy = atom.levels[spec.level].energy + pi2 / (2.0 * atom.masses.total());

    let n_at = space.n_orbitals();
    let vacuum = space.fock.sector_range(0).start;
    let level_states: Vec<usize> = atom.levels[spec.level]
        .orbitals
        .clone()
        .map(|alpha| space.state_index(vacuum, alpha))
        .collect();

    let scale = free_diag.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let level_identity_error = level_states
        .iter()
        .map(|&p| (free_diag[p] - level_energy).abs())
        .fold(0.0, f64::max);
    if level_identity_error > 1e-10 * scale {
        return Err(Error::refusal(format!(
            "free diagonal misses the level energy by {level_identity_error:.3e}"
        )));
    }

    let resolvent2: Vec<f64> = free_diag
        .iter()
        .map(|d| {
            let x = d - level_energy;
            1.0 / (x * x + epsilon * epsilon)
        })
        .collect();

    let dgamma_a = dgamma_dilation(space)?;
    let raise = ladder_raise(space);
    let lower = raise.adjoint();

    // M rows live on the level-vacuum states; columns on the one-photon
    // sector the lowering ladder reaches from them.
    let mut in_level = vec![false; space.dim()];
    for &p in &level_states {
        in_level[p] = true;
    }
    let mut m_trips = Vec::new();
    let dense_rows: Vec<Vec<C64>> = level_states
        .iter()
        .map(|&p| {
            let mut e = vec![C64::new(0.0, 0.0); space.dim()];
            e[p] = C64::new(1.0, 0.0);
            // Row p of a(F) is column p of a*(F) conjugated.
            let mut col = raise.apply_to(&e);
            for v in &mut col {
                *v = v.conj();
            }
            col
        })
        .collect();
    for (row, &p) in dense_rows.iter().zip(&level_states) {
        for (q, v) in row.iter().enumerate() {
            if *v != C64::new(0.0, 0.0) && !in_level[q] {
                m_trips.push((p as u32, q as u32, v * resolvent2[q]));
            }
        }
    }
    let m_block = CsrMatrix::from_triplets(space.dim(), space.dim(), m_trips.clone());

    // iD = i g theta (M - M^dagger): level-vacuum indices sit below every
    // one-photon index, so the M entries are already the upper triangle.
    let mut b = HermBuilder::new(space.dim());
    for (r, c, v) in &m_trips {
        b.add_offdiag(*r as usize, *c as usize, C64::new(0.0, 1.0) * g * theta * v);
    }
    let i_d = b.finish();

    let mut a_full = dgamma_a.clone();
    a_full.add_scaled(1.0, &i_d);

    // Operator norm of D = g theta (M - M^dagger): the largest singular
    // value of M, from the small Gram matrix over the level rows.
    let m_j = level_states.len();
    let mut gram = vec![C64::new(0.0, 0.0); m_j * m_j];
    let scaled_rows: Vec<Vec<C64>> = dense_rows
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(q, v)| if in_level[q] { C64::new(0.0, 0.0) } else { v * resolvent2[q] })
                .collect()
        })
        .collect();
    for i in 0..m_j {
        for jj in 0..m_j {
            gram[i + jj * m_j] = linalg::dot(&scaled_rows[i], &scaled_rows[jj]);
        }
    }
    let d_norm = if m_j == 0 {
        0.0
    } else {
        let w = heev_full(&mut gram, m_j)?;
        g * theta * w.last().copied().unwrap_or(0.0).max(0.0).sqrt()
    };

    // Derivative-transformed vertex blocks: C'_m = sum_m' (i a)_{m m'} C_m'
    // with C_m = sqrt(w_m) B_m.
    let a_one = dilation_generator(&space.grid)?;
    let n_modes = space.grid.mode_count();
    let zero = ndarray::Array2::<C64>::zeros((n_at, n_at));
    let base: Vec<ndarray::Array2<C64>> = (0..n_modes)
        .map(|m| {
            if space.grid.soft[m] {
                zero.clone()
            } else {
                space.tensor.blocks[m].clone() * C64::new(space.grid.weights[m].sqrt(), 0.0)
            }
        })
        .collect();
    let mut transformed = vec![zero; n_modes];
    for ((r, c), v) in a_one.rows.iter().zip(&a_one.cols).zip(&a_one.vals) {
        let (r, c) = (*r as usize, *c as usize);
        let iv = C64::new(0.0, 1.0) * v;
        transformed[r] = &transformed[r] + &(&base[c] * iv);
        transformed[c] = &transformed[c] + &(&base[r] * C64::new(0.0, 1.0) * v.conj());
    }
    let phi_ia_f = field_from_blocks(space, &transformed);

    Ok(ConjugateOperator {
        space: Arc::clone(space),
        spec: *spec,
        theta,
        epsilon,
        h,
        free_diag,
        dgamma_a,
        i_d,
        a_full,
        phi_ia_f,
        m_block,
        raise,
        lower,
        resolvent2,
        level_states,
        level_energy,
        d_norm,
        level_identity_error,
    })
}

impl ConjugateOperator {
    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    /// `D x` with `D = g theta (M - M^dagger)`.
    pub fn d_apply(&self, x: &[C64]) -> Vec<C64> {
        let gt = self.spec.coupling * self.theta;
        let mut y = self.m_block.apply_to(x);
        let adj = self.m_block.adjoint_apply(x);
        for (a, b) in y.iter_mut().zip(&adj) {
            *a = (*a - b) * gt;
        }
        y
    }

    /// `B x = (1 - beta)(1 - P_Omega) x - g phi(iaF) x - [H, D] x`.
    pub fn b_apply(&self, x: &[C64]) -> Vec<C64> {
        let n_at = self.space.n_orbitals();
        let vac = self.space.fock.sector_range(0);
        let one_minus_beta = 1.0 - self.spec.beta;
        let mut out: Vec<C64> = x
            .iter()
            .enumerate()
            .map(|(p, v)| {
                if vac.contains(&(p / n_at)) {
                    C64::new(0.0, 0.0)
                } else {
                    v * one_minus_beta
                }
            })
            .collect();
        let phi = self.phi_ia_f.apply_vec(x);
        for (o, p) in out.iter_mut().zip(&phi) {
            *o -= p * self.spec.coupling;
        }
        let hd = self.h.op.apply_vec(&self.d_apply(x));
        let dh = self.d_apply(&self.h.op.apply_vec(x));
        for ((o, a), b) in out.iter_mut().zip(&hd).zip(&dh) {
            *o -= a - b;
        }
        out
    }

    /// Compressed `B` on the level block, against the closed product form
    /// `2 g^2 theta P_j a(F) R_eps^2 a*(F) P_j`. Returns the max entrywise
    /// deviation relative to the product form's scale.
    pub fn step_identity_error(&self) -> f64 {
        let m_j = self.level_states.len();
        let g = self.spec.coupling;
        let mut lhs = vec![C64::new(0.0, 0.0); m_j * m_j];
        let mut rhs = vec![C64::new(0.0, 0.0); m_j * m_j];
        for (jj, &q) in self.level_states.iter().enumerate() {
            let mut e = vec![C64::new(0.0, 0.0); self.dim()];
            e[q] = C64::new(1.0, 0.0);
            let bq = self.b_apply(&e);
            let mut up = self.raise.apply_to(&e);
            for (v, r2) in up.iter_mut().zip(&self.resolvent2) {
                *v *= *r2;
            }
            let down = self.lower.apply_to(&up);
            for (i, &p) in self.level_states.iter().enumerate() {
                lhs[i + jj * m_j] = bq[p];
                rhs[i + jj * m_j] = down[p] * (2.0 * g * g * self.theta);
            }
        }
        let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.norm())).max(1e-300);
        lhs.iter()
            .zip(&rhs)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).norm()))
            / scale
    }

    /// Smallest eigenvalue of `P_j a(F) R_eps^2 a*(F) P_j`, the quantity
    /// whose shrinking-width limit is the resonance matrix over the width.
    pub fn shell_gram_min_eig(&self) -> Result<f64> {
        let m_j = self.level_states.len();
        let mut gmat = vec![C64::new(0.0, 0.0); m_j * m_j];
        let cols: Vec<Vec<C64>> = self
            .level_states
            .iter()
            .map(|&p| {
                let mut e = vec![C64::new(0.0, 0.0); self.dim()];
                e[p] = C64::new(1.0, 0.0);
                let mut up = self.raise.apply_to(&e);
                for (v, r2) in up.iter_mut().zip(&self.resolvent2) {
                    *v *= r2.sqrt();
                }
                up
            })
            .collect();
        for i in 0..m_j {
            for jj in 0..m_j {
                gmat[i + jj * m_j] = linalg::dot(&cols[i], &cols[jj]);
            }
        }
        let w = heev_full(&mut gmat, m_j)?;
        Ok(w.first().copied().unwrap_or(0.0))
    }
}

/// Window compression of the commutator form `[H, iA]`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MourreReport {
    pub level: usize,
    pub momentum: [f64; 3],
    pub coupling: f64,
    pub window: (f64, f64),
    /// States of the free diagonal inside the window before restriction.
    pub window_dim: usize,
    /// States kept after the sub-roof and soft-freeness restrictions.
    pub kept_dim: usize,
    pub min_eig: f64,
    pub predicted_scale: f64,
    pub vacuous: bool,
    pub pass: bool,
}

/// Compress `[H, iA]` onto the coordinate window of the free diagonal.
///
/// `restrict` keeps only states with total occupation at most `n_max - 1`,
/// where every second-quantized commutation identity is exact; states with
/// soft occupation are always dropped because they decouple and would pad
/// the form with zero rows. `predicted_scale` is the caller's resonance
/// budget, stored for the report.
pub fn mourre_form(
    h: &FiberOperator,
    free_diag: &[f64],
    a: &HermOp,
    window: (f64, f64),
    restrict: bool,
    predicted_scale: f64,
) -> Result<MourreReport> {
    let space = &h.space;
    if free_diag.len() != space.dim() || a.dim != space.dim() {
        return Err(Error::config("mourre.shapes", "operator dimensions disagree"));
    }
    if !(window.0 < window.1) {
        return Err(Error::config("mourre.window", "window must be a nonempty interval"));
    }
    let n_at = space.n_orbitals();
    let soft_free = space.soft_free_fock();
    let roof = space.fock.n_max().saturating_sub(1);
    let mut kept = Vec::new();
    let mut window_dim = 0usize;
    for (p, d) in free_diag.iter().enumerate() {
        if *d <= window.0 || *d > window.1 {
            continue;
        }
        window_dim += 1;
        let f = p / n_at;
        if !soft_free[f] {
            continue;
        }
        if restrict && space.fock.total_occupation(f) > roof {
            continue;
        }
        kept.push(p);
    }
    let kept_dim = kept.len();
    if kept_dim == 0 {
        return Ok(MourreReport {
            level: 0,
            momentum: h.momentum,
            coupling: h.coupling,
            window,
            window_dim,
            kept_dim,
            min_eig: 0.0,
            predicted_scale,
            vacuous: true,
            pass: false,
        });
    }
    let mut k = vec![C64::new(0.0, 0.0); kept_dim * kept_dim];
    for (jj, &q) in kept.iter().enumerate() {
        let mut e = vec![C64::new(0.0, 0.0); space.dim()];
        e[q] = C64::new(1.0, 0.0);
        let ha = h.op.apply_vec(&a.apply_vec(&e));
        let ah = a.apply_vec(&h.op.apply_vec(&e));
        for (i, &p) in kept.iter().enumerate() {
            k[i + jj * kept_dim] = C64::new(0.0, 1.0) * (ha[p] - ah[p]);
        }
    }
    // Symmetrize away the rounding skew before the eigensolve.
    for i in 0..kept_dim {
        for jj in 0..i {
            let avg = (k[i + jj * kept_dim] + k[jj + i * kept_dim].conj()) * 0.5;
            k[i + jj * kept_dim] = avg;
            k[jj + i * kept_dim] = avg.conj();
        }
    }
    let w = heev_full(&mut k, kept_dim)?;
    let min_eig = w[0];
    Ok(MourreReport {
        level: 0,
        momentum: h.momentum,
        coupling: h.coupling,
        window,
        window_dim,
        kept_dim,
        min_eig,
        predicted_scale,
        vacuous: false,
        pass: min_eig > 0.0,
    })
}

/// Mourre report for an assembled conjugate operator: window centered at
/// the level energy, compression restricted to the exact-identity roof.
pub fn mourre_report(
    conj: &ConjugateOperator,
    half_width: f64,
    predicted_scale: f64,
) -> Result<MourreReport> {
    if !(half_width > 0.0) {
        return Err(Error::config("mourre.half_width", "half width must be positive"));
    }
    let win = (conj.level_energy - half_width, conj.level_energy + half_width);
    let mut rep = mourre_form(&conj.h, &conj.free_diag, &conj.a_full, win, true, predicted_scale)?;
    rep.level = conj.spec.level;
    Ok(rep)
}

/// Feshbach reduction of the `B` form onto the level block.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FeshbachReport {
    pub level: usize,
    pub window: (f64, f64),
    pub lambda0: f64,
    pub subspace_dim: usize,
    pub min_singular: f64,
    pub min_eig_e: f64,
    /// `lambda0 - min eig(E)`; the reduction is isospectral when the bottom
    /// eigenvector keeps a level component, so this should vanish.
    pub isospectral_gap: f64,
    /// Column-major dense `E` on the level block.
    pub e_matrix: Vec<C64>,
}

/// Schur-complement reduction of the compressed `B` onto the level block.
///
/// The complement subspace is the free coordinate window with the level
/// states removed. `lambda0` defaults to the bottom eigenvalue of the
/// compressed `B`; the reduction refuses when `B_SS - lambda0` has a
/// singular value at or below `1e-8` times its scale.
pub fn feshbach(
    conj: &ConjugateOperator,
    half_width: f64,
    lambda0: Option<f64>,
) -> Result<FeshbachReport> {
    let window = (conj.level_energy - half_width, conj.level_energy + half_width);
    let space = &conj.space;
    let n_at = space.n_orbitals();
    let soft_free = space.soft_free_fock();
    let mut in_level = vec![false; space.dim()];
    for &p in &conj.level_states {
        in_level[p] = true;
    }
    let mut subspace: Vec<usize> = conj.level_states.clone();
    for (p, d) in conj.free_diag.iter().enumerate() {
        if *d > window.0 && *d <= window.1 && !in_level[p] && soft_free[p / n_at] {
            subspace.push(p);
        }
    }
    let m_j = conj.level_states.len();
    let n = subspace.len();
    if n == m_j {
        return Err(Error::refusal(
            "complement window is empty: the reduction has nothing to eliminate",
        ));
    }
    if n > FESHBACH_DENSE_CAP {
        return Err(Error::refusal(format!(
            "compressed subspace of dimension {n} exceeds the dense cap {FESHBACH_DENSE_CAP}"
        )));
    }

    let mut bmat = vec![C64::new(0.0, 0.0); n * n];
    for (jj, &q) in subspace.iter().enumerate() {
        let mut e = vec![C64::new(0.0, 0.0); space.dim()];
        e[q] = C64::new(1.0, 0.0);
        let bq = conj.b_apply(&e);
        for (i, &p) in subspace.iter().enumerate() {
            bmat[i + jj * n] = bq[p];
        }
    }
    for i in 0..n {
        for jj in 0..i {
            let avg = (bmat[i + jj * n] + bmat[jj + i * n].conj()) * 0.5;
            bmat[i + jj * n] = avg;
            bmat[jj + i * n] = avg.conj();
        }
    }

    let lambda0 = match lambda0 {
        Some(v) => v,
        None => {
            let mut copy = bmat.clone();
            heev_full(&mut copy, n)?[0]
        }
    };

    let ns = n - m_j;
    let mut bss = vec![C64::new(0.0, 0.0); ns * ns];
    for j in 0..ns {
        for i in 0..ns {
            bss[i + j * ns] = bmat[(m_j + i) + (m_j + j) * n];
        }
        bss[j + j * ns] -= lambda0;
    }
    let mut probe = bss.clone();
    let wss = heev_full(&mut probe, ns)?;
    let scale = wss.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let min_singular = wss.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min_singular <= 1e-8 * scale {
        return Err(Error::refusal(format!(
            "complement block is singular at the probe energy: smallest singular value \
             {min_singular:.3e} against scale {scale:.3e}"
        )));
    }

    // E = B_PP - B_PS (B_SS - lambda0)^{-1} B_SP.
    let mut bsp = vec![C64::new(0.0, 0.0); ns * m_j];
    for j in 0..m_j {
        for i in 0..ns {
            bsp[i + j * ns] = bmat[(m_j + i) + j * n];
        }
    }
    let mut solved = bsp.clone();
    gesv(&mut bss, &mut solved, ns, m_j)?;
    let mut e_matrix = vec![C64::new(0.0, 0.0); m_j * m_j];
    for j in 0..m_j {
        for i in 0..m_j {
            let mut acc = bmat[i + j * n];
            for s in 0..ns {
                // B_PS = B_SP^dagger entry (s, i) conjugated.
                acc -= bmat[(m_j + s) + i * n].conj() * solved[s + j * ns];
            }
            e_matrix[i + j * m_j] = acc;
        }
    }
    for i in 0..m_j {
        for jj in 0..i {
            let avg = (e_matrix[i + jj * m_j] + e_matrix[jj + i * m_j].conj()) * 0.5;
            e_matrix[i + jj * m_j] = avg;
            e_matrix[jj + i * m_j] = avg.conj();
        }
    }
    let mut copy = e_matrix.clone();
    let we = heev_full(&mut copy, m_j)?;
    let min_eig_e = we[0];
    Ok(FeshbachReport {
        level: conj.spec.level,
        window,
        lambda0,
        subspace_dim: n,
        min_singular,
        min_eig_e,
        isospectral_gap: lambda0 - min_eig_e,
        e_matrix,
    })
}

/// Virial residual of a candidate eigenvector.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct VirialReport {
    pub residual: f64,
    pub a_psi_norm: f64,
    pub bound: f64,
    pub pass: bool,
}

/// `<psi, [H, iA] psi> = -2 Im <H psi, A psi>`, reported against ten times
/// the eigenpair residual scaled by the conjugate image norm.
pub fn virial(h: &dyn LinOp, a: &HermOp, psi: &[C64], eigen_residual: f64) -> VirialReport {
    let hp = h.apply_vec(psi);
    let ap = a.apply_vec(psi);
    let residual = -2.0 * linalg::dot(&hp, &ap).im;
    let a_psi_norm = linalg::norm(&ap);
    let bound = 10.0 * eigen_residual * a_psi_norm;
    VirialReport { residual, a_psi_norm, bound, pass: residual.abs() < bound.max(f64::MIN_POSITIVE) }
}

/// Two-route commutator comparison on the full truncated space.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TwoRouteReport {
    /// Max deviation between the direct commutator and the expanded form,
    /// relative to the direct form's largest entry, off the top sector.
    pub max_rel: f64,
    /// Same deviation over entries touching the top photon sector.
    pub top_edge_rel: f64,
    /// Entrywise distance of the second-quantized stencil commutator from
    /// the formal number operator; a grid-resolution diagnostic, order one
    /// by construction on any finite stencil.
    pub formal_number_gap: f64,
}

/// Compare `i(HA - AH)` against the expanded form
/// `dGamma([omega, ia]) + kinetic terms - g phi(iaF) - [H, D]`, all pieces
/// dense. The one-particle commutators stay in their discrete form, which
/// the second-quantization maps through exactly; the substitution of the
/// formal identity for `[omega, ia]` is reported, never asserted.
pub fn two_route_check(conj: &ConjugateOperator) -> Result<TwoRouteReport> {
    let space = &conj.space;
    let dim = space.dim();
    if dim > 1500 {
        return Err(Error::refusal(format!(
            "dense two-route comparison capped at 1500 states, got {dim}"
        )));
    }
    let n_at = space.n_orbitals();
    let g = conj.spec.coupling;
    let m_total = space.atom.masses.total();

    let h_d = conj.h.op.to_dense();
    let a_d = conj.a_full.to_dense();
    let ha = linalg::dense_mul(&h_d, &a_d, dim, dim, dim);
    let ah = linalg::dense_mul(&a_d, &h_d, dim, dim, dim);
    let mut direct = vec![C64::new(0.0, 0.0); dim * dim];
    for (o, (x, y)) in direct.iter_mut().zip(ha.iter().zip(&ah)) {
        *o = C64::new(0.0, 1.0) * (x - y);
    }

    let a_one = dilation_generator(&space.grid)?;
    let omega: Vec<f64> = space.grid.dispersion_free.clone();
    let omega_comm = diag_commutator(&omega, &a_one);
    let number_like = lift_fock(space, &ops::second_quantize_offdiag(&space.fock, &omega_comm)?);

    let mut expanded = number_like.to_dense();

    // Kinetic part: sum_l (K_l C_l + C_l K_l - 2 Pi_l C_l) / 2M with
    // K_l = dGamma(k_l) diagonal and C_l = dGamma([k_l, ia]).
    for axis in 0..3 {
        let k_axis: Vec<f64> = space.grid.modes.iter().map(|k| k[axis]).collect();
        let c_one = diag_commutator(&k_axis, &a_one);
        let c_l = lift_fock(space, &ops::second_quantize_offdiag(&space.fock, &c_one)?);
        let k_diag: Vec<f64> =
            (0..dim).map(|p| space.photon_momentum()[p / n_at][axis]).collect();
        let c_dense = c_l.to_dense();
        let pi_l = conj.spec.momentum[axis];
        for col in 0..dim {
            for row in 0..dim {
                let v = c_dense[row + col * dim];
                let sym = (k_diag[row] + k_diag[col] - 2.0 * pi_l) / (2.0 * m_total);
                expanded[row + col * dim] += v * sym;
            }
        }
    }

    let phi_dense = conj.phi_ia_f.to_dense();
    for (o, p) in expanded.iter_mut().zip(&phi_dense) {
        *o -= p * g;
    }

    // [H, D] as dense products of the sparse pieces.
    let mut d_dense = vec![C64::new(0.0, 0.0); dim * dim];
    for col in 0..dim {
        let mut e = vec![C64::new(0.0, 0.0); dim];
        e[col] = C64::new(1.0, 0.0);
        let dcol = conj.d_apply(&e);
        d_dense[col * dim..(col + 1) * dim].copy_from_slice(&dcol);
    }
    let hd = linalg::dense_mul(&h_d, &d_dense, dim, dim, dim);
    let dh = linalg::dense_mul(&d_dense, &h_d, dim, dim, dim);
    for (o, (x, y)) in expanded.iter_mut().zip(hd.iter().zip(&dh)) {
        *o -= x - y;
    }

    let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.norm())).max(1e-300);
    let top = space.fock.n_max();
    let mut max_rel = 0.0f64;
    let mut top_edge_rel = 0.0f64;
    for col in 0..dim {
        let col_top = space.fock.total_occupation(col / n_at) == top;
        for row in 0..dim {
            let dev = (direct[row + col * dim] - expanded[row + col * dim]).norm() / scale;
            if col_top || space.fock.total_occupation(row / n_at) == top {
                top_edge_rel = top_edge_rel.max(dev);
            } else {
                max_rel = max_rel.max(dev);
            }
        }
    }

    let n_diag = space.number_diag();
    let n_dense = number_like.to_dense();
    let mut formal_number_gap = 0.0f64;
    for col in 0..dim {
        for row in 0..dim {
            let formal = if row == col { C64::new(n_diag[row], 0.0) } else { C64::new(0.0, 0.0) };
            formal_number_gap = formal_number_gap.max((n_dense[row + col * dim] - formal).norm());
        }
    }

    Ok(TwoRouteReport { max_rel, top_edge_rel, formal_number_gap })
}
